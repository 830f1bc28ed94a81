#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "consert/tensor.hpp"

namespace consert {

enum class GradMode { kEnabled, kDisabled };

/// Records differentiable operations in execution order and replays them in
/// reverse to accumulate gradients.
///
/// An operation is recorded only when one of its inputs requires gradients;
/// its output then requires gradients as well. Every forward output is
/// checked for NaN/Inf and a NumericError names the producing operation.
///
/// A Tape is single-threaded. Independent tapes may run concurrently as long
/// as they do not mutate shared leaves.
class Tape {
 public:
  explicit Tape(GradMode mode = GradMode::kEnabled) : mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// [..., K] x [K, N] -> [..., N]
  Tensor matmul(const Tensor& a, const Tensor& b);
  /// [M, K] x [N, K]^T -> [M, N]
  Tensor matmul_transposed(const Tensor& a, const Tensor& b);
  Tensor add(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  Tensor scale(const Tensor& a, float factor);
  /// [..., N] + bias[N]
  Tensor add_bias(const Tensor& a, const Tensor& bias);
  /// Softmax over the last axis.
  Tensor softmax(const Tensor& a);
  /// Normalizes over the last axis, then applies gain and bias of size N.
  Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                    float eps = 1e-5f);
  /// tanh approximation.
  Tensor gelu(const Tensor& x);
  /// Gathers rows of table[V, D]; output shape is prefix + [D].
  Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids,
                   const Shape& prefix, const std::string& table_name = "embedding");
  /// x[B, L, D], mask[B, L] in {0,1} -> [B, D]; divides by the mask count.
  Tensor masked_mean(const Tensor& x, const Tensor& mask);
  /// Row-wise L2 normalization of [..., D].
  Tensor l2_normalize(const Tensor& x);
  /// Row-wise cosine of two [..., D] tensors -> [...].
  Tensor cosine(const Tensor& a, const Tensor& b);
  /// Concatenation along the last axis.
  Tensor concat(const std::vector<Tensor>& parts);
  Tensor abs_diff(const Tensor& a, const Tensor& b);
  /// Mean softmax cross-entropy of logits[B, C] against integer labels.
  Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> labels);
  Tensor sum(const Tensor& x);
  /// Fused contrastive cross-entropy over [2N, d] rows where rows 2k and
  /// 2k+1 are positives; cosine similarities divided by temperature, self
  /// pairs excluded.
  Tensor contrastive_xent(const Tensor& reps, float temperature);
  /// Square [M, M] matrix with its diagonal replaced by `value` (no gradient
  /// flows to replaced entries).
  Tensor fill_diagonal(const Tensor& x, float value);
  /// Multi-head scaled dot-product attention over q, k, v of shape [B, L, D].
  /// Keys with mask 0 are excluded from every query's softmax.
  Tensor self_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        const Tensor& mask, std::size_t heads);

  /// Fills gradients of every tensor reachable from `loss`. Gradients of
  /// tensors touched by this tape are reset first, so the result is exactly
  /// d loss / d tensor for this tape.
  void backward(const Tensor& loss);

  std::size_t size() const { return records_.size(); }
  const std::string& op_name(std::size_t index) const { return records_[index].name; }
  bool records_enabled() const { return mode_ == GradMode::kEnabled; }

 private:
  struct Record {
    std::string name;
    std::vector<Tensor> inputs;
    Tensor output;
    std::function<void()> backward;
  };

  bool should_record(std::initializer_list<const Tensor*> inputs) const;
  Tensor finish(const char* name, Tensor output, std::vector<Tensor> inputs,
                std::function<void()> backward);

  GradMode mode_;
  std::vector<Record> records_;
};

}  // namespace consert
