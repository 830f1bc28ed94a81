#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "consert/data.hpp"
#include "consert/rng.hpp"

namespace consert {

enum class AugKind { kNone, kShuffle, kTokenCutoff, kFeatureCutoff, kDropout, kAdversarial };

std::string_view aug_kind_name(AugKind kind);

/// Whether supervised gradients are available to the augmentation.
enum class AugmentRegime { kUnsupervised, kJoint };

/// One view-generating transformation. `value` is the cutoff ratio, the
/// dropout probability or the adversarial epsilon, depending on `kind`.
struct AugmentationSpec {
  AugKind kind = AugKind::kNone;
  float value = 0.0f;

  static AugmentationSpec none() { return {AugKind::kNone, 0.0f}; }
  static AugmentationSpec shuffle() { return {AugKind::kShuffle, 0.0f}; }
  static AugmentationSpec token_cutoff(float ratio = 0.15f) { return {AugKind::kTokenCutoff, ratio}; }
  static AugmentationSpec feature_cutoff(float ratio = 0.2f) { return {AugKind::kFeatureCutoff, ratio}; }
  static AugmentationSpec dropout(float p = 0.2f) { return {AugKind::kDropout, p}; }
  static AugmentationSpec adversarial(float epsilon = 1.0f) { return {AugKind::kAdversarial, epsilon}; }

  /// "none", "shuffle", "token_cutoff[:r]", "feature_cutoff[:r]",
  /// "dropout[:p]", "adversarial[:eps]"; omitted values take the defaults above.
  static AugmentationSpec parse(std::string_view text);
  std::string to_string() const;

  /// Throws ConfigError for out-of-range values and RegimeError for
  /// adversarial outside the joint regime.
  void validate(AugmentRegime regime) const;

  bool operator==(const AugmentationSpec&) const = default;
};

/// Permutes the position ids of mask-1 entries; others are untouched.
std::vector<std::int32_t> shuffle_positions(std::span<const std::int32_t> position_ids,
                                            std::span<const float> mask, Rng& rng);

/// Multiplicative keep masks over an L x d embedding matrix (1 keep, 0 erase).
std::vector<float> token_cutoff_keep(std::size_t len, std::size_t width,
                                     std::span<const float> mask, float ratio, Rng& rng);
std::vector<float> feature_cutoff_keep(std::size_t len, std::size_t width, float ratio, Rng& rng);
std::vector<float> dropout_keep(std::size_t count, float p, Rng& rng);

/// The same transformations applied to a row-major L x d matrix.
std::vector<float> token_cutoff(std::span<const float> embeddings, std::size_t width,
                                std::span<const float> mask, float ratio, Rng& rng);
std::vector<float> feature_cutoff(std::span<const float> embeddings, std::size_t width,
                                  float ratio, Rng& rng);
std::vector<float> dropout_noise(std::span<const float> embeddings, float p, Rng& rng);

/// Fast gradient value step: e + epsilon * g / ||g||_2 with the norm taken
/// over the whole tensor; returns e unchanged when ||g||_2 < 1e-12.
std::vector<float> fgv_perturbation(std::span<const float> embeddings,
                                    std::span<const float> gradient, float epsilon,
                                    AugmentRegime regime);

/// One augmented input. `keep` is an L x d multiplicative mask (empty means
/// all ones). Adversarial views carry only the flag; their perturbation
/// depends on a supervised gradient and is added during training.
struct View {
  std::vector<std::int32_t> token_ids;
  std::vector<std::int32_t> position_ids;
  std::vector<float> attention_mask;
  std::vector<float> keep;
  bool adversarial = false;
  float epsilon = 0.0f;

  std::size_t length() const { return token_ids.size(); }
};

struct ViewPair {
  View first;
  View second;
};

View make_view(const EncodedSentence& sentence, const AugmentationSpec& spec,
               std::size_t width, Rng& rng);

/// Applies spec1 and spec2 with independent substreams of `seed`.
ViewPair make_view_pair(const EncodedSentence& sentence, const AugmentationSpec& spec1,
                        const AugmentationSpec& spec2, std::size_t width, std::uint64_t seed,
                        AugmentRegime regime);

}  // namespace consert
