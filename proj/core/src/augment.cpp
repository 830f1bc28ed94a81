#include "consert/augment.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>

#include "consert/errors.hpp"

namespace consert {
namespace {

/// `count` distinct indices from [0, n), chosen uniformly.
std::vector<std::size_t> choose_distinct(std::size_t n, std::size_t count, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < count; ++i) std::swap(idx[i], idx[i + rng.uniform_index(n - i)]);
  idx.resize(count);
  return idx;
}

std::string format_value(float v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace

std::string_view aug_kind_name(AugKind kind) {
  switch (kind) {
    case AugKind::kNone: return "none";
    case AugKind::kShuffle: return "shuffle";
    case AugKind::kTokenCutoff: return "token_cutoff";
    case AugKind::kFeatureCutoff: return "feature_cutoff";
    case AugKind::kDropout: return "dropout";
    case AugKind::kAdversarial: return "adversarial";
  }
  return "unknown";
}

AugmentationSpec AugmentationSpec::parse(std::string_view text) {
  const std::size_t colon = text.find(':');
  const std::string_view name = text.substr(0, colon);
  AugmentationSpec spec;
  if (name == "none") spec = none();
  else if (name == "shuffle") spec = shuffle();
  else if (name == "token_cutoff") spec = token_cutoff();
  else if (name == "feature_cutoff") spec = feature_cutoff();
  else if (name == "dropout") spec = dropout();
  else if (name == "adversarial") spec = adversarial();
  else throw ConfigError("unknown augmentation '" + std::string(text) + "'");

  if (colon != std::string_view::npos) {
    const std::string_view number = text.substr(colon + 1);
    float value = 0.0f;
    auto [ptr, ec] = std::from_chars(number.data(), number.data() + number.size(), value);
    if (ec != std::errc() || ptr != number.data() + number.size()) {
      throw ConfigError("bad augmentation parameter in '" + std::string(text) + "'");
    }
    if (spec.kind == AugKind::kNone || spec.kind == AugKind::kShuffle) {
      throw ConfigError("augmentation '" + std::string(name) + "' takes no parameter");
    }
    spec.value = value;
  }
  return spec;
}

std::string AugmentationSpec::to_string() const {
  std::string out(aug_kind_name(kind));
  if (kind != AugKind::kNone && kind != AugKind::kShuffle) out += ":" + format_value(value);
  return out;
}

void AugmentationSpec::validate(AugmentRegime regime) const {
  switch (kind) {
    case AugKind::kTokenCutoff:
    case AugKind::kFeatureCutoff:
    case AugKind::kDropout:
      if (!(value >= 0.0f && value < 1.0f)) {
        throw ConfigError("augmentation " + to_string() + ": ratio must be in [0, 1)");
      }
      break;
    case AugKind::kAdversarial:
      if (!(value > 0.0f)) throw ConfigError("augmentation adversarial: epsilon must be > 0");
      if (regime != AugmentRegime::kJoint) {
        throw RegimeError("adversarial augmentation needs the supervised loss of the joint regime");
      }
      break;
    default:
      break;
  }
}

std::vector<std::int32_t> shuffle_positions(std::span<const std::int32_t> position_ids,
                                            std::span<const float> mask, Rng& rng) {
  if (position_ids.size() != mask.size()) {
    throw DimensionError("shuffle_positions: " + std::to_string(position_ids.size()) +
                         " ids vs mask of " + std::to_string(mask.size()));
  }
  std::vector<std::int32_t> out(position_ids.begin(), position_ids.end());
  std::vector<std::size_t> real;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i] != 0.0f) real.push_back(i);
  // Fisher-Yates over the real slots only.
  for (std::size_t i = real.size(); i > 1; --i) {
    const std::size_t j = rng.uniform_index(i);
    std::swap(out[real[i - 1]], out[real[j]]);
  }
  return out;
}

std::vector<float> token_cutoff_keep(std::size_t len, std::size_t width,
                                     std::span<const float> mask, float ratio, Rng& rng) {
  if (mask.size() != len) throw DimensionError("token_cutoff: mask length does not match rows");
  std::vector<std::size_t> real;
  for (std::size_t i = 0; i < len; ++i)
    if (mask[i] != 0.0f) real.push_back(i);
  const auto count = static_cast<std::size_t>(std::floor(static_cast<double>(ratio) * real.size()));
  std::vector<float> keep(len * width, 1.0f);
  for (std::size_t pick : choose_distinct(real.size(), count, rng))
    std::fill_n(keep.begin() + static_cast<std::ptrdiff_t>(real[pick] * width), width, 0.0f);
  return keep;
}

std::vector<float> feature_cutoff_keep(std::size_t len, std::size_t width, float ratio, Rng& rng) {
  const auto count = static_cast<std::size_t>(std::floor(static_cast<double>(ratio) * width));
  std::vector<float> keep(len * width, 1.0f);
  for (std::size_t col : choose_distinct(width, count, rng))
    for (std::size_t r = 0; r < len; ++r) keep[r * width + col] = 0.0f;
  return keep;
}

std::vector<float> dropout_keep(std::size_t count, float p, Rng& rng) {
  std::vector<float> keep(count, 1.0f);
  for (float& k : keep)
    if (rng.bernoulli(p)) k = 0.0f;
  return keep;
}

namespace {

std::vector<float> apply_keep(std::span<const float> e, const std::vector<float>& keep) {
  std::vector<float> out(e.begin(), e.end());
  for (std::size_t i = 0; i < out.size(); ++i)
    if (keep[i] == 0.0f) out[i] = 0.0f;
  return out;
}

}  // namespace

std::vector<float> token_cutoff(std::span<const float> embeddings, std::size_t width,
                                std::span<const float> mask, float ratio, Rng& rng) {
  if (width == 0 || embeddings.size() % width != 0) {
    throw DimensionError("token_cutoff: matrix size not a multiple of width");
  }
  return apply_keep(embeddings,
                    token_cutoff_keep(embeddings.size() / width, width, mask, ratio, rng));
}

std::vector<float> feature_cutoff(std::span<const float> embeddings, std::size_t width,
                                  float ratio, Rng& rng) {
  if (width == 0 || embeddings.size() % width != 0) {
    throw DimensionError("feature_cutoff: matrix size not a multiple of width");
  }
  return apply_keep(embeddings, feature_cutoff_keep(embeddings.size() / width, width, ratio, rng));
}

std::vector<float> dropout_noise(std::span<const float> embeddings, float p, Rng& rng) {
  return apply_keep(embeddings, dropout_keep(embeddings.size(), p, rng));
}

std::vector<float> fgv_perturbation(std::span<const float> embeddings,
                                    std::span<const float> gradient, float epsilon,
                                    AugmentRegime regime) {
  AugmentationSpec::adversarial(epsilon).validate(regime);
  if (embeddings.size() != gradient.size()) {
    throw DimensionError("fgv_perturbation: gradient size does not match embeddings");
  }
  double sq = 0.0;
  for (float g : gradient) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  std::vector<float> out(embeddings.begin(), embeddings.end());
  if (norm < 1e-12) return out;
  const double factor = epsilon / norm;
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<float>(out[i] + factor * gradient[i]);
  return out;
}

View make_view(const EncodedSentence& sentence, const AugmentationSpec& spec,
               std::size_t width, Rng& rng) {
  View view{sentence.token_ids, sentence.position_ids, sentence.attention_mask, {}, false, 0.0f};
  const std::size_t len = sentence.length();
  switch (spec.kind) {
    case AugKind::kNone:
      break;
    case AugKind::kShuffle:
      view.position_ids = shuffle_positions(sentence.position_ids, sentence.attention_mask, rng);
      break;
    case AugKind::kTokenCutoff:
      view.keep = token_cutoff_keep(len, width, sentence.attention_mask, spec.value, rng);
      break;
    case AugKind::kFeatureCutoff:
      view.keep = feature_cutoff_keep(len, width, spec.value, rng);
      break;
    case AugKind::kDropout:
      view.keep = dropout_keep(len * width, spec.value, rng);
      break;
    case AugKind::kAdversarial:
      view.adversarial = true;
      view.epsilon = spec.value;
      break;
  }
  return view;
}

ViewPair make_view_pair(const EncodedSentence& sentence, const AugmentationSpec& spec1,
                        const AugmentationSpec& spec2, std::size_t width, std::uint64_t seed,
                        AugmentRegime regime) {
  spec1.validate(regime);
  spec2.validate(regime);
  Rng first_rng = substream(seed, "view", 0);
  Rng second_rng = substream(seed, "view", 1);
  return {make_view(sentence, spec1, width, first_rng), make_view(sentence, spec2, width, second_rng)};
}

}  // namespace consert
