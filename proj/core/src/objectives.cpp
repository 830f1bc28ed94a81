#include "consert/objectives.hpp"

#include <cmath>
#include <string>

#include "consert/errors.hpp"
#include "consert/rng.hpp"

namespace consert {

Tensor nt_xent(Tape& tape, const Tensor& representations, float temperature) {
  if (!(temperature > 0.0f) || !std::isfinite(temperature)) {
    throw ConfigError("nt_xent: temperature must be positive, got " + std::to_string(temperature));
  }
  if (representations.rank() != 2) {
    throw DimensionError("nt_xent: representations must be [2N, d], got " +
                         shape_to_string(representations.shape()));
  }
  const std::size_t rows = representations.dim(0);
  if (rows < 2 || rows % 2 != 0) {
    throw DimensionError("nt_xent: need an even number of at least 2 rows, got " +
                         std::to_string(rows));
  }
  return tape.contrastive_xent(representations, temperature);
}

Tensor pair_features(Tape& tape, const Tensor& r1, const Tensor& r2) {
  if (r1.shape() != r2.shape()) {
    throw DimensionError("pair_features: " + shape_to_string(r1.shape()) + " vs " +
                         shape_to_string(r2.shape()));
  }
  return tape.concat({r1, r2, tape.abs_diff(r1, r2)});
}

PairClassifierParams PairClassifierParams::init(std::size_t width, std::size_t classes,
                                                std::uint64_t seed) {
  Rng rng(derive_seed(seed, "classifier.init"));
  PairClassifierParams head;
  head.weight = Tensor::zeros({3 * width, classes}, true);
  for (float& v : head.weight.mutable_data()) v = rng.normal(0.0f, 0.02f);
  head.bias = Tensor::zeros({classes}, true);
  return head;
}

Tensor classifier_logits(Tape& tape, const Tensor& features, const PairClassifierParams& head) {
  if (features.rank() != 2 || features.dim(1) != head.weight.dim(0)) {
    throw DimensionError("classifier: features " + shape_to_string(features.shape()) +
                         " do not match weight " + shape_to_string(head.weight.shape()));
  }
  return tape.add_bias(tape.matmul(features, head.weight), head.bias);
}

Tensor classification_loss(Tape& tape, const Tensor& features, const PairClassifierParams& head,
                           std::span<const std::int32_t> labels) {
  return tape.cross_entropy(classifier_logits(tape, features, head), labels);
}

Tensor joint_loss(Tape& tape, const Tensor& ce, const Tensor& contrastive, float alpha) {
  if (ce.numel() != 1 || contrastive.numel() != 1) {
    throw DimensionError("joint_loss: both terms must be scalars");
  }
  if (!(alpha >= 0.0f) || !std::isfinite(alpha)) {
    throw ConfigError("joint_loss: alpha must be a finite non-negative number");
  }
  return tape.add(ce, tape.scale(contrastive, alpha));
}

}  // namespace consert
