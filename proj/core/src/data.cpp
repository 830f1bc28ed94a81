#include "consert/data.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <fstream>
#include <iostream>
#include <istream>
#include <map>
#include <numeric>
#include <sstream>

#include "consert/errors.hpp"
#include "consert/rng.hpp"

namespace consert {
namespace {

void stderr_sink(std::string_view message) {
  std::cerr << "warning: " << message << '\n';
}

std::atomic<WarningSink> g_sink{&stderr_sink};

const std::vector<std::string>& special_tokens() {
  static const std::vector<std::string> specials = {"[PAD]", "[UNK]", "[CLS]", "[SEP]"};
  return specials;
}

bool is_ascii_punct(unsigned char c) {
  return (c >= 33 && c <= 47) || (c >= 58 && c <= 64) || (c >= 91 && c <= 96) ||
         (c >= 123 && c <= 126);
}

/// Length in bytes of a whitespace sequence starting at `i`, 0 if none.
std::size_t whitespace_at(std::string_view s, std::size_t i) {
  const auto c = static_cast<unsigned char>(s[i]);
  if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f') return 1;
  auto byte = [&](std::size_t k) {
    return i + k < s.size() ? static_cast<unsigned char>(s[i + k]) : 0u;
  };
  if (c == 0xC2 && (byte(1) == 0xA0 || byte(1) == 0x85)) return 2;  // NBSP, NEL
  if (c == 0xE1 && byte(1) == 0x9A && byte(2) == 0x80) return 3;    // U+1680
  if (c == 0xE2 && byte(1) == 0x80 &&
      ((byte(2) >= 0x80 && byte(2) <= 0x8A) || byte(2) == 0xA8 || byte(2) == 0xA9 ||
       byte(2) == 0xAF))
    return 3;                                                         // U+2000..200A, 2028, 2029, 202F
  if (c == 0xE2 && byte(1) == 0x81 && byte(2) == 0x9F) return 3;     // U+205F
  if (c == 0xE3 && byte(1) == 0x80 && byte(2) == 0x80) return 3;     // U+3000
  return 0;
}

std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const std::size_t tab = line.find('\t', start);
    if (tab == std::string_view::npos) {
      fields.push_back(line.substr(start));
      return fields;
    }
    fields.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
}

std::string format_score(double value) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, res.ptr);
}

template <typename T, typename LineFn>
ParseResult<T> parse_lines(std::istream& in, bool skip_comments, LineFn&& parse_line) {
  ParseResult<T> result;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (skip_comments && line.front() == '#') continue;
    try {
      result.examples.push_back(parse_line(std::string_view(line)));
    } catch (const DataError& e) {
      result.errors.push_back({number, e.what()});
    }
  }
  return result;
}

std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return in;
}

}  // namespace

void warn(std::string_view message) { g_sink.load()(message); }

WarningSink set_warning_sink(WarningSink sink) { return g_sink.exchange(sink); }

void throw_data_error(const std::string& message) { throw DataError(message); }

Vocab::Vocab() {
  for (const std::string& s : special_tokens()) add(s);
}

std::int32_t Vocab::add(const std::string& token) {
  if (auto it = index_.find(token); it != index_.end()) return it->second;
  if (frozen_) throw ContractError("Vocab: cannot insert '" + token + "' into a frozen vocab");
  const auto id = static_cast<std::int32_t>(tokens_.size());
  tokens_.push_back(token);
  index_.emplace(token, id);
  return id;
}

std::int32_t Vocab::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnk : it->second;
}

bool Vocab::contains(std::string_view token) const {
  return index_.count(std::string(token)) > 0;
}

const std::string& Vocab::token(std::int32_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw IndexError("Vocab: id " + std::to_string(id) + " out of range");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

Vocab Vocab::from_tokens(const std::vector<std::string>& tokens) {
  const auto& specials = special_tokens();
  if (tokens.size() < specials.size() ||
      !std::equal(specials.begin(), specials.end(), tokens.begin())) {
    throw DataError("Vocab: token list must start with the special tokens");
  }
  Vocab vocab;
  for (std::size_t i = specials.size(); i < tokens.size(); ++i) {
    if (vocab.contains(tokens[i])) throw DataError("Vocab: duplicate token '" + tokens[i] + "'");
    vocab.add(tokens[i]);
  }
  vocab.freeze();
  return vocab;
}

std::vector<std::string> normalize_tokens(std::string_view text) {
  std::vector<std::string> pieces;
  std::string current;
  auto flush = [&] {
    std::size_t b = 0, e = current.size();
    while (b < e && is_ascii_punct(static_cast<unsigned char>(current[b]))) ++b;
    while (e > b && is_ascii_punct(static_cast<unsigned char>(current[e - 1]))) --e;
    if (e > b) pieces.push_back(current.substr(b, e - b));
    current.clear();
  };
  for (std::size_t i = 0; i < text.size();) {
    if (std::size_t ws = whitespace_at(text, i)) {
      flush();
      i += ws;
      continue;
    }
    char c = text[i];
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
    current.push_back(c);
    ++i;
  }
  flush();
  return pieces;
}

EncodedSentence tokenize(std::string_view text, const Vocab& vocab, std::size_t max_len) {
  if (max_len < 3) throw ConfigError("tokenize: max_len must be at least 3");
  const std::vector<std::string> pieces = normalize_tokens(text);
  const std::size_t keep = std::min(pieces.size(), max_len - 2);
  EncodedSentence out;
  out.token_ids.reserve(keep + 2);
  out.token_ids.push_back(Vocab::kCls);
  for (std::size_t i = 0; i < keep; ++i) out.token_ids.push_back(vocab.id(pieces[i]));
  out.token_ids.push_back(Vocab::kSep);
  out.position_ids.resize(out.token_ids.size());
  std::iota(out.position_ids.begin(), out.position_ids.end(), 0);
  out.attention_mask.assign(out.token_ids.size(), 1.0f);
  return out;
}

Vocab build_vocab(std::span<const std::string> corpus, std::size_t min_count) {
  if (corpus.empty()) throw DataError("build_vocab: empty corpus");
  std::map<std::string, std::size_t> counts;
  for (const std::string& text : corpus)
    for (std::string& piece : normalize_tokens(text)) ++counts[std::move(piece)];
  std::vector<std::pair<std::string, std::size_t>> ordered(counts.begin(), counts.end());
  std::stable_sort(ordered.begin(), ordered.end(), [](const auto& a, const auto& b) {
    return a.second > b.second;  // map order already gives token asc on ties
  });
  Vocab vocab;
  for (const auto& [token, count] : ordered) {
    if (count >= min_count) vocab.add(token);
  }
  vocab.freeze();
  return vocab;
}

Batch collate(std::span<const EncodedSentence> sentences) {
  Batch batch;
  batch.size = sentences.size();
  for (const EncodedSentence& s : sentences) batch.length = std::max(batch.length, s.length());
  batch.token_ids.assign(batch.size * batch.length, Vocab::kPad);
  batch.position_ids.resize(batch.size * batch.length);
  std::vector<float> mask(batch.size * batch.length, 0.0f);
  for (std::size_t b = 0; b < batch.size; ++b) {
    const EncodedSentence& s = sentences[b];
    for (std::size_t t = 0; t < batch.length; ++t) {
      const std::size_t at = b * batch.length + t;
      if (t < s.length()) {
        batch.token_ids[at] = s.token_ids[t];
        batch.position_ids[at] = s.position_ids[t];
        mask[at] = s.attention_mask[t];
      } else {
        batch.position_ids[at] = static_cast<std::int32_t>(t);
      }
    }
  }
  batch.mask = Tensor::from({batch.size, batch.length}, std::move(mask));
  return batch;
}

std::string_view nli_label_name(NliLabel label) {
  switch (label) {
    case NliLabel::kContradiction: return "contradiction";
    case NliLabel::kEntailment: return "entailment";
    case NliLabel::kNeutral: return "neutral";
  }
  return "unknown";
}

NliLabel parse_nli_label(std::string_view name) {
  if (name == "contradiction") return NliLabel::kContradiction;
  if (name == "entailment") return NliLabel::kEntailment;
  if (name == "neutral") return NliLabel::kNeutral;
  throw DataError("unknown NLI label '" + std::string(name) + "'");
}

ParseResult<SentencePairExample> parse_sts_tsv(std::istream& in) {
  return parse_lines<SentencePairExample>(in, true, [](std::string_view line) {
    const auto fields = split_tabs(line);
    if (fields.size() != 3) {
      throw DataError("expected 3 tab-separated fields, got " + std::to_string(fields.size()));
    }
    double score = 0.0;
    const auto* end = fields[2].data() + fields[2].size();
    auto [ptr, ec] = std::from_chars(fields[2].data(), end, score);
    if (ec != std::errc() || ptr != end) {
      throw DataError("unparseable score '" + std::string(fields[2]) + "'");
    }
    if (!(score >= 0.0 && score <= 5.0)) {
      throw DataError("score " + std::string(fields[2]) + " outside [0, 5]");
    }
    return SentencePairExample{std::string(fields[0]), std::string(fields[1]), score};
  });
}

ParseResult<SentencePairExample> load_sts_tsv(const std::filesystem::path& path) {
  auto in = open_input(path);
  return parse_sts_tsv(in);
}

void write_sts_tsv(std::ostream& out, std::span<const SentencePairExample> examples) {
  for (const auto& e : examples)
    out << e.sentence_a << '\t' << e.sentence_b << '\t' << format_score(e.gold) << '\n';
}

ParseResult<NliExample> parse_nli_tsv(std::istream& in) {
  return parse_lines<NliExample>(in, false, [](std::string_view line) {
    const auto fields = split_tabs(line);
    if (fields.size() != 3) {
      throw DataError("expected 3 tab-separated fields, got " + std::to_string(fields.size()));
    }
    return NliExample{std::string(fields[0]), std::string(fields[1]),
                      parse_nli_label(fields[2])};
  });
}

ParseResult<NliExample> load_nli_tsv(const std::filesystem::path& path) {
  auto in = open_input(path);
  return parse_nli_tsv(in);
}

void write_nli_tsv(std::ostream& out, std::span<const NliExample> examples) {
  for (const auto& e : examples)
    out << e.premise << '\t' << e.hypothesis << '\t' << nli_label_name(e.label) << '\n';
}

std::vector<std::string> parse_unlabeled(std::istream& in) {
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

std::vector<std::string> load_unlabeled(const std::filesystem::path& path) {
  auto in = open_input(path);
  return parse_unlabeled(in);
}

void write_unlabeled(std::ostream& out, std::span<const std::string> sentences) {
  for (const auto& s : sentences) out << s << '\n';
}

std::string describe_errors(const std::vector<LineError>& errors, const std::string& source) {
  std::ostringstream msg;
  msg << source << ": " << errors.size() << " malformed line(s)";
  for (const LineError& e : errors) msg << "\n  line " << e.line << ": " << e.message;
  return msg.str();
}

std::vector<std::size_t> subsample_indices(std::size_t pool_size, std::size_t n,
                                           std::uint64_t seed) {
  std::vector<std::size_t> idx(pool_size);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (n >= pool_size) {
    if (n > pool_size) {
      warn("subsample: requested " + std::to_string(n) + " items from a pool of " +
           std::to_string(pool_size) + "; using the whole pool");
    }
    return idx;
  }
  Rng rng(seed);
  // Partial Fisher-Yates: the first n slots become the sample.
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = i + rng.uniform_index(pool_size - i);
    std::swap(idx[i], idx[j]);
  }
  idx.resize(n);
  std::sort(idx.begin(), idx.end());
  return idx;
}

std::vector<std::string> subsample(std::span<const std::string> pool, std::size_t n,
                                   std::uint64_t seed) {
  std::vector<std::string> out;
  for (std::size_t i : subsample_indices(pool.size(), n, seed)) out.push_back(pool[i]);
  return out;
}

}  // namespace consert
