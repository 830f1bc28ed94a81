#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "consert/tape.hpp"

namespace consert {

/// Normalized temperature-scaled cross-entropy over 2N representations in
/// which rows 2k and 2k+1 are the two views of example k. Each row is an
/// anchor whose positive is its partner; the other 2N-2 rows are negatives.
/// Returns the mean over all 2N anchors.
Tensor nt_xent(Tape& tape, const Tensor& representations, float temperature);

/// Index of the positive partner of row i.
inline std::size_t partner_index(std::size_t i) { return i ^ 1u; }

/// [r1, r2, |r1 - r2|] along the last axis.
Tensor pair_features(Tape& tape, const Tensor& r1, const Tensor& r2);

/// Linear head over pair features: logits = f W + b, W is [3d, C].
struct PairClassifierParams {
  Tensor weight;
  Tensor bias;

  static PairClassifierParams init(std::size_t width, std::size_t classes, std::uint64_t seed);
  std::vector<Tensor> tensors() const { return {weight, bias}; }
};

Tensor classifier_logits(Tape& tape, const Tensor& features, const PairClassifierParams& head);

/// Mean cross-entropy of the head's logits against integer labels.
Tensor classification_loss(Tape& tape, const Tensor& features, const PairClassifierParams& head,
                           std::span<const std::int32_t> labels);

/// ce + alpha * contrastive.
Tensor joint_loss(Tape& tape, const Tensor& ce, const Tensor& contrastive, float alpha);

}  // namespace consert
