#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "consert/data.hpp"
#include "consert/tape.hpp"

namespace consert {

enum class Pooling { kLastLayerMean, kLastTwoLayersMean };

std::string_view pooling_name(Pooling pooling);
/// Accepts "last_layer_mean"/"last_layer" and "last_two_layers_mean"/"last_two".
Pooling parse_pooling(std::string_view name);

/// Architecture of the pre-LN transformer encoder. `pooling` is the
/// evaluation pooling; training always pools the last layer.
struct EncoderConfig {
  std::size_t vocab_size = 0;
  std::size_t max_len = 64;
  std::size_t d_model = 64;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_ff = 256;
  Pooling pooling = Pooling::kLastTwoLayersMean;

  /// Throws ConfigError naming the offending field.
  void validate() const;
  bool operator==(const EncoderConfig&) const = default;
};

struct LayerParams {
  Tensor ln1_gain, ln1_bias;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_gain, ln2_bias;
  Tensor ff_w1, ff_b1, ff_w2, ff_b2;
};

struct EncoderParams {
  EncoderConfig config;
  Tensor token_embedding;     // [vocab_size, d_model]
  Tensor position_embedding;  // [max_len, d_model]
  std::vector<LayerParams> layers;

  /// Every learnable tensor with a stable dotted name, in a fixed order.
  std::vector<std::pair<std::string, Tensor>> named() const;
  std::vector<Tensor> tensors() const;
  /// Deep copy.
  EncoderParams clone() const;
  /// Bitwise equality of config and every value.
  bool identical_to(const EncoderParams& other) const;
};

/// normal(0, 0.02) weights, zero biases, unit layer-norm gains.
EncoderParams init_params(const EncoderConfig& config, std::uint64_t seed);

/// Token plus position embedding for a [batch, len] grid of ids -> [batch, len, d].
Tensor embed(Tape& tape, const EncoderParams& params, std::span<const std::int32_t> token_ids,
             std::span<const std::int32_t> position_ids, std::size_t batch, std::size_t len);

/// Runs every block over e[batch, len, d]; returns each block's output.
std::vector<Tensor> encode(Tape& tape, const EncoderParams& params, const Tensor& embeddings,
                           const Tensor& mask);

/// Mask-aware mean of the last layer, or the mean of the last two layers'
/// mask-aware means -> [batch, d].
Tensor pool(Tape& tape, const std::vector<Tensor>& layer_outputs, const Tensor& mask,
            Pooling pooling);

/// embed + encode + pool for a collated batch with the identity view.
Tensor encode_batch(Tape& tape, const EncoderParams& params, const Batch& batch,
                    Pooling pooling);

/// Gradient-free sentence vectors, processed in chunks of `chunk` sentences.
/// `pool_masks`, when given, replaces the attention mask for pooling only
/// (one vector per sentence, same length as its encoding).
std::vector<std::vector<float>> embed_sentences(
    const EncoderParams& params, std::span<const EncodedSentence> sentences, Pooling pooling,
    std::size_t chunk = 64, const std::vector<std::vector<float>>* pool_masks = nullptr);

}  // namespace consert
