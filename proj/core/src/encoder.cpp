#include "consert/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "consert/errors.hpp"
#include "consert/rng.hpp"

namespace consert {

std::string_view pooling_name(Pooling pooling) {
  return pooling == Pooling::kLastLayerMean ? "last_layer_mean" : "last_two_layers_mean";
}

Pooling parse_pooling(std::string_view name) {
  if (name == "last_layer_mean" || name == "last_layer") return Pooling::kLastLayerMean;
  if (name == "last_two_layers_mean" || name == "last_two") return Pooling::kLastTwoLayersMean;
  throw ConfigError("unknown pooling mode '" + std::string(name) + "'");
}

void EncoderConfig::validate() const {
  auto positive = [](std::size_t v, const char* field) {
    if (v == 0) throw ConfigError(std::string("encoder.") + field + " must be positive");
  };
  positive(vocab_size, "vocab_size");
  positive(d_model, "d_model");
  positive(n_layers, "n_layers");
  positive(n_heads, "n_heads");
  positive(d_ff, "d_ff");
  if (max_len < 2) throw ConfigError("encoder.max_len must be at least 2");
  if (d_model % n_heads != 0) {
    throw ConfigError("encoder.d_model (" + std::to_string(d_model) +
                      ") must be divisible by encoder.n_heads (" + std::to_string(n_heads) + ")");
  }
  if (pooling == Pooling::kLastTwoLayersMean && n_layers < 2) {
    throw ConfigError("encoder.pooling last_two_layers_mean needs at least 2 layers");
  }
}

std::vector<std::pair<std::string, Tensor>> EncoderParams::named() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("embeddings.token", token_embedding);
  out.emplace_back("embeddings.position", position_embedding);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    const LayerParams& l = layers[i];
    out.emplace_back(p + "ln1.gain", l.ln1_gain);
    out.emplace_back(p + "ln1.bias", l.ln1_bias);
    out.emplace_back(p + "attn.wq", l.wq);
    out.emplace_back(p + "attn.bq", l.bq);
    out.emplace_back(p + "attn.wk", l.wk);
    out.emplace_back(p + "attn.bk", l.bk);
    out.emplace_back(p + "attn.wv", l.wv);
    out.emplace_back(p + "attn.bv", l.bv);
    out.emplace_back(p + "attn.wo", l.wo);
    out.emplace_back(p + "attn.bo", l.bo);
    out.emplace_back(p + "ln2.gain", l.ln2_gain);
    out.emplace_back(p + "ln2.bias", l.ln2_bias);
    out.emplace_back(p + "ffn.w1", l.ff_w1);
    out.emplace_back(p + "ffn.b1", l.ff_b1);
    out.emplace_back(p + "ffn.w2", l.ff_w2);
    out.emplace_back(p + "ffn.b2", l.ff_b2);
  }
  return out;
}

std::vector<Tensor> EncoderParams::tensors() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named()) out.push_back(t);
  return out;
}

EncoderParams EncoderParams::clone() const {
  EncoderParams copy;
  copy.config = config;
  copy.token_embedding = token_embedding.clone();
  copy.position_embedding = position_embedding.clone();
  for (const LayerParams& l : layers) {
    copy.layers.push_back({l.ln1_gain.clone(), l.ln1_bias.clone(), l.wq.clone(), l.bq.clone(),
                           l.wk.clone(), l.bk.clone(), l.wv.clone(), l.bv.clone(), l.wo.clone(),
                           l.bo.clone(), l.ln2_gain.clone(), l.ln2_bias.clone(),
                           l.ff_w1.clone(), l.ff_b1.clone(), l.ff_w2.clone(), l.ff_b2.clone()});
  }
  return copy;
}

bool EncoderParams::identical_to(const EncoderParams& other) const {
  if (!(config == other.config)) return false;
  const auto mine = tensors();
  const auto theirs = other.tensors();
  if (mine.size() != theirs.size()) return false;
  for (std::size_t i = 0; i < mine.size(); ++i) {
    if (mine[i].shape() != theirs[i].shape()) return false;
    if (std::memcmp(mine[i].data().data(), theirs[i].data().data(),
                    mine[i].numel() * sizeof(float)) != 0)
      return false;
  }
  return true;
}

EncoderParams init_params(const EncoderConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(derive_seed(seed, "encoder.init"));
  auto normal = [&](Shape shape) {
    Tensor t = Tensor::zeros(std::move(shape), true);
    for (float& v : t.mutable_data()) v = rng.normal(0.0f, 0.02f);
    return t;
  };
  auto zeros = [](std::size_t n) { return Tensor::zeros({n}, true); };
  auto ones = [](std::size_t n) { return Tensor::full({n}, 1.0f, true); };

  const std::size_t d = config.d_model, ff = config.d_ff;
  EncoderParams p;
  p.config = config;
  p.token_embedding = normal({config.vocab_size, d});
  p.position_embedding = normal({config.max_len, d});
  for (std::size_t i = 0; i < config.n_layers; ++i) {
    LayerParams l;
    l.ln1_gain = ones(d);
    l.ln1_bias = zeros(d);
    l.wq = normal({d, d});
    l.bq = zeros(d);
    l.wk = normal({d, d});
    l.bk = zeros(d);
    l.wv = normal({d, d});
    l.bv = zeros(d);
    l.wo = normal({d, d});
    l.bo = zeros(d);
    l.ln2_gain = ones(d);
    l.ln2_bias = zeros(d);
    l.ff_w1 = normal({d, ff});
    l.ff_b1 = zeros(ff);
    l.ff_w2 = normal({ff, d});
    l.ff_b2 = zeros(d);
    p.layers.push_back(std::move(l));
  }
  return p;
}

Tensor embed(Tape& tape, const EncoderParams& params, std::span<const std::int32_t> token_ids,
             std::span<const std::int32_t> position_ids, std::size_t batch, std::size_t len) {
  if (token_ids.size() != position_ids.size() || token_ids.size() != batch * len) {
    throw DimensionError("embed: " + std::to_string(token_ids.size()) + " token ids and " +
                         std::to_string(position_ids.size()) + " position ids for a " +
                         std::to_string(batch) + "x" + std::to_string(len) + " grid");
  }
  if (len > params.config.max_len) {
    throw DimensionError("embed: sequence length " + std::to_string(len) + " exceeds max_len " +
                         std::to_string(params.config.max_len));
  }
  Tensor tokens = tape.embedding(params.token_embedding, token_ids, {batch, len}, "token");
  Tensor positions =
      tape.embedding(params.position_embedding, position_ids, {batch, len}, "position");
  return tape.add(tokens, positions);
}

std::vector<Tensor> encode(Tape& tape, const EncoderParams& params, const Tensor& embeddings,
                           const Tensor& mask) {
  const EncoderConfig& cfg = params.config;
  if (embeddings.rank() != 3 || embeddings.dim(2) != cfg.d_model) {
    throw DimensionError("encode: embeddings " + shape_to_string(embeddings.shape()) +
                         " do not match d_model " + std::to_string(cfg.d_model));
  }
  std::vector<Tensor> outputs;
  outputs.reserve(params.layers.size());
  Tensor x = embeddings;
  for (const LayerParams& l : params.layers) {
    Tensor h = tape.layer_norm(x, l.ln1_gain, l.ln1_bias);
    Tensor q = tape.add_bias(tape.matmul(h, l.wq), l.bq);
    Tensor k = tape.add_bias(tape.matmul(h, l.wk), l.bk);
    Tensor v = tape.add_bias(tape.matmul(h, l.wv), l.bv);
    Tensor attended = tape.self_attention(q, k, v, mask, cfg.n_heads);
    x = tape.add(x, tape.add_bias(tape.matmul(attended, l.wo), l.bo));

    Tensor h2 = tape.layer_norm(x, l.ln2_gain, l.ln2_bias);
    Tensor inner = tape.gelu(tape.add_bias(tape.matmul(h2, l.ff_w1), l.ff_b1));
    x = tape.add(x, tape.add_bias(tape.matmul(inner, l.ff_w2), l.ff_b2));
    outputs.push_back(x);
  }
  return outputs;
}

Tensor pool(Tape& tape, const std::vector<Tensor>& layer_outputs, const Tensor& mask,
            Pooling pooling) {
  if (layer_outputs.empty()) throw ConfigError("pool: no layer outputs");
  Tensor last = tape.masked_mean(layer_outputs.back(), mask);
  if (pooling == Pooling::kLastLayerMean) return last;
  if (layer_outputs.size() < 2) {
    throw ConfigError("pool: last_two_layers_mean needs at least 2 layers");
  }
  Tensor previous = tape.masked_mean(layer_outputs[layer_outputs.size() - 2], mask);
  return tape.scale(tape.add(last, previous), 0.5f);
}

Tensor encode_batch(Tape& tape, const EncoderParams& params, const Batch& batch,
                    Pooling pooling) {
  Tensor e = embed(tape, params, batch.token_ids, batch.position_ids, batch.size, batch.length);
  return pool(tape, encode(tape, params, e, batch.mask), batch.mask, pooling);
}

std::vector<std::vector<float>> embed_sentences(
    const EncoderParams& params, std::span<const EncodedSentence> sentences, Pooling pooling,
    std::size_t chunk, const std::vector<std::vector<float>>* pool_masks) {
  if (chunk == 0) chunk = 1;
  std::vector<std::vector<float>> out;
  out.reserve(sentences.size());
  const std::size_t d = params.config.d_model;
  for (std::size_t start = 0; start < sentences.size(); start += chunk) {
    const std::size_t n = std::min(chunk, sentences.size() - start);
    Batch batch = collate(sentences.subspan(start, n));
    Tape tape(GradMode::kDisabled);
    Tensor e = embed(tape, params, batch.token_ids, batch.position_ids, batch.size, batch.length);
    std::vector<Tensor> layers = encode(tape, params, e, batch.mask);
    Tensor mask = batch.mask;
    if (pool_masks) {
      std::vector<float> values(batch.size * batch.length, 0.0f);
      for (std::size_t b = 0; b < n; ++b) {
        const std::vector<float>& m = (*pool_masks)[start + b];
        std::copy(m.begin(), m.end(), values.begin() + static_cast<std::ptrdiff_t>(b * batch.length));
      }
      mask = Tensor::from({batch.size, batch.length}, std::move(values));
    }
    Tensor pooled = pool(tape, layers, mask, pooling);
    auto pd = pooled.data();
    for (std::size_t b = 0; b < n; ++b) out.emplace_back(pd.begin() + b * d, pd.begin() + (b + 1) * d);
  }
  return out;
}

}  // namespace consert
