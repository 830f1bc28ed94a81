#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "consert/data.hpp"
#include "consert/rng.hpp"

namespace consert {
namespace {

// Frequent filler words; drawn with Zipf weights so a handful of them
// dominate the token counts the way function words do in real text.
constexpr std::array<const char*, 20> kFunctionWords = {
    "the", "a",    "of",   "and", "to",   "in",   "is",   "that", "it",   "was",
    "for", "on",   "with", "as",  "at",   "by",   "this", "from", "very", "just"};

constexpr std::size_t kSlotPool = 30;
constexpr std::size_t kFrameWords = 2;

std::string pseudo_word(std::size_t index) {
  static constexpr const char* kConsonants = "bdfgklmnprstvz";
  static constexpr const char* kVowels = "aeiou";
  constexpr std::size_t kSyllables = 14 * 5;
  constexpr std::size_t kSpace = kSyllables * kSyllables * kSyllables;
  const std::size_t j = (index * 7919 + 101) % kSpace;  // bijective: 7919 is coprime to 70^3
  std::string word;
  for (std::size_t k = 0, rest = j; k < 3; ++k, rest /= kSyllables) {
    const std::size_t s = rest % kSyllables;
    word.push_back(kConsonants[s / 5]);
    word.push_back(kVowels[s % 5]);
  }
  return word;
}

struct Meaning {
  std::size_t tmpl = 0;
  std::size_t slot_a = 0;
  std::size_t slot_b = 0;
};

class Generator {
 public:
  explicit Generator(std::size_t n_templates) : n_templates_(n_templates) {
    for (std::size_t t = 0; t < n_templates; ++t)
      for (std::size_t f = 0; f < kFrameWords; ++f) frames_.push_back(pseudo_word(t * kFrameWords + f));
    for (std::size_t s = 0; s < kSlotPool; ++s) {
      slots_a_.push_back(pseudo_word(10000 + s));
      slots_b_.push_back(pseudo_word(20000 + s));
    }
    double total = 0.0;
    for (std::size_t r = 0; r < kFunctionWords.size(); ++r) {
      total += 1.0 / std::pow(static_cast<double>(r + 1), 1.1);
      zipf_cdf_.push_back(total);
    }
    for (double& c : zipf_cdf_) c /= total;
  }

  Meaning random_meaning(Rng& rng) const {
    return {rng.uniform_index(n_templates_), rng.uniform_index(kSlotPool),
            rng.uniform_index(kSlotPool)};
  }

  std::size_t other_template(Rng& rng, std::size_t t) const {
    return (t + 1 + rng.uniform_index(n_templates_ - 1)) % n_templates_;
  }

  static std::size_t other_slot(Rng& rng, std::size_t s) {
    return (s + 1 + rng.uniform_index(kSlotPool - 1)) % kSlotPool;
  }

  std::string render(const Meaning& m, Rng& rng) const {
    std::vector<std::string> words = {frames_[m.tmpl * kFrameWords], slots_a_[m.slot_a],
                                      frames_[m.tmpl * kFrameWords + 1], slots_b_[m.slot_b]};
    const std::size_t fillers = 2 + rng.uniform_index(4);
    for (std::size_t i = 0; i < fillers; ++i) {
      const std::size_t at = rng.uniform_index(words.size() + 1);
      words.insert(words.begin() + static_cast<std::ptrdiff_t>(at), draw_function_word(rng));
    }
    std::string text;
    for (std::size_t i = 0; i < words.size(); ++i) {
      if (i) text.push_back(' ');
      text += words[i];
    }
    text[0] = static_cast<char>(text[0] - 'a' + 'A');
    text.push_back('.');
    return text;
  }

  static double gold(const Meaning& a, const Meaning& b) {
    return 2.5 * (a.tmpl == b.tmpl) + 1.25 * (a.slot_a == b.slot_a) +
           1.25 * (a.slot_b == b.slot_b);
  }

  /// A partner whose intended gold level is `level` in {0..4} (x1.25).
  Meaning partner(const Meaning& m, std::size_t level, Rng& rng) const {
    Meaning p = m;
    auto change_one_slot = [&] {
      if (rng.bernoulli(0.5)) p.slot_a = other_slot(rng, p.slot_a);
      else p.slot_b = other_slot(rng, p.slot_b);
    };
    switch (level) {
      case 4: break;
      case 3: change_one_slot(); break;
      case 2:
        p.slot_a = other_slot(rng, p.slot_a);
        p.slot_b = other_slot(rng, p.slot_b);
        break;
      case 1:
        p.tmpl = other_template(rng, p.tmpl);
        change_one_slot();
        break;
      default:
        p.tmpl = other_template(rng, p.tmpl);
        p.slot_a = other_slot(rng, p.slot_a);
        p.slot_b = other_slot(rng, p.slot_b);
        break;
    }
    return p;
  }

 private:
  std::string draw_function_word(Rng& rng) const {
    const double u = rng.uniform();
    std::size_t r = 0;
    while (r + 1 < zipf_cdf_.size() && u >= zipf_cdf_[r]) ++r;
    return kFunctionWords[r];
  }

  std::size_t n_templates_;
  std::vector<std::string> frames_;
  std::vector<std::string> slots_a_;
  std::vector<std::string> slots_b_;
  std::vector<double> zipf_cdf_;
};

std::vector<SentencePairExample> make_pairs(const Generator& gen, std::size_t count, Rng& rng) {
  std::vector<SentencePairExample> pairs;
  pairs.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const Meaning a = gen.random_meaning(rng);
    const Meaning b = gen.partner(a, i % 5, rng);
    std::string text_a = gen.render(a, rng);
    std::string text_b = gen.render(b, rng);
    pairs.push_back({std::move(text_a), std::move(text_b), Generator::gold(a, b)});
  }
  return pairs;
}

}  // namespace

SyntheticCorpus make_synthetic_corpus(std::uint64_t seed, const SyntheticOptions& options) {
  const std::size_t n_templates = std::max<std::size_t>(options.n_templates, 2);
  Generator gen(n_templates);
  SyntheticCorpus corpus;

  Rng text_rng = substream(seed, "synthetic.unlabeled");
  for (std::size_t t = 0; t < n_templates; ++t)
    for (std::size_t k = 0; k < options.n_per_template; ++k) {
      Meaning m = gen.random_meaning(text_rng);
      m.tmpl = t;
      corpus.unlabeled.push_back(gen.render(m, text_rng));
    }

  Rng dev_rng = substream(seed, "synthetic.dev");
  corpus.dev = make_pairs(gen, options.n_dev_pairs, dev_rng);
  Rng test_rng = substream(seed, "synthetic.test");
  corpus.test = make_pairs(gen, options.n_test_pairs, test_rng);

  Rng nli_rng = substream(seed, "synthetic.nli");
  for (std::size_t i = 0; i < options.n_nli; ++i) {
    const Meaning premise = gen.random_meaning(nli_rng);
    const auto label = static_cast<NliLabel>(i % kNliClasses);
    Meaning hypothesis = premise;
    switch (label) {
      case NliLabel::kEntailment: break;
      case NliLabel::kNeutral: hypothesis = gen.partner(premise, 3, nli_rng); break;
      case NliLabel::kContradiction: hypothesis = gen.partner(premise, 1, nli_rng); break;
    }
    std::string p = gen.render(premise, nli_rng);
    std::string h = gen.render(hypothesis, nli_rng);
    corpus.nli.push_back({std::move(p), std::move(h), label});
  }
  return corpus;
}

}  // namespace consert
