#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "consert/augment.hpp"
#include "consert/encoder.hpp"
#include "consert/objectives.hpp"

namespace consert {

enum class Regime { kUnsup, kJoint, kSupUnsup, kJointUnsup };

std::string_view regime_name(Regime regime);
/// "unsup", "joint", "sup-unsup", "joint-unsup".
Regime parse_regime(std::string_view name);
bool regime_needs_nli(Regime regime);
bool regime_needs_unlabeled(Regime regime);

struct TrainConfig {
  Regime regime = Regime::kUnsup;
  std::size_t batch_size = 96;
  float temperature = 0.1f;
  float alpha = 0.15f;
  double lr = 1e-3;
  double warmup_fraction = 0.10;
  /// Steps per training phase.
  std::size_t total_steps = 1000;
  std::size_t eval_every = 200;
  std::uint64_t seed = 42;
  AugmentationSpec aug1 = AugmentationSpec::shuffle();
  AugmentationSpec aug2 = AugmentationSpec::feature_cutoff();

  /// ConfigError for bad values, RegimeError for an adversarial view in a
  /// purely contrastive phase.
  void validate() const;
};

/// Linear warmup over ceil(warmup_fraction * total_steps) steps, then constant.
double lr_at(std::size_t step, const TrainConfig& config);

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::size_t step = 0;
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;
};

/// One bias-corrected Adam update from the tensors' current gradients.
/// Checks every gradient before touching any parameter; a non-finite value
/// raises NumericError naming the parameter.
void adam_step(const NamedParams& params, AdamState& state, double lr, const AdamHyper& hyper = {});

struct EncodedNli {
  EncodedSentence premise;
  EncodedSentence hypothesis;
  std::int32_t label = 0;
};

std::vector<EncodedSentence> encode_all(std::span<const std::string> texts, const Vocab& vocab,
                                        std::size_t max_len);
std::vector<EncodedNli> encode_all(std::span<const NliExample> examples, const Vocab& vocab,
                                   std::size_t max_len);

/// Dev-set score (Spearman x 100) of a set of parameters.
using DevScorer = std::function<double(const EncoderParams&)>;

/// Yields batches of distinct indices: epoch-wise permutations, or, when the
/// batch exceeds the dataset, a with-replacement draw with duplicates removed.
class EpochSampler {
 public:
  EpochSampler(std::size_t dataset_size, std::uint64_t seed, std::string stream);
  std::vector<std::size_t> next(std::size_t batch_size);
  std::size_t epoch() const { return epoch_; }

 private:
  void reshuffle();

  std::size_t size_;
  std::uint64_t seed_;
  std::string stream_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t epoch_ = 0;
  std::size_t draws_ = 0;
  bool warned_ = false;
};

struct StepRecord {
  std::string phase;
  std::size_t step = 0;
  float loss = 0.0f;
  float loss_ce = 0.0f;
  float loss_con = 0.0f;
  double lr = 0.0;
};

struct EvalRecord {
  std::string phase;
  std::size_t step = 0;
  double dev = 0.0;
};

struct PhaseSummary {
  std::string name;
  double best_dev = 0.0;
  std::size_t best_step = 0;
  std::size_t steps = 0;
};

struct TrainResult {
  EncoderParams best;
  double best_dev = 0.0;
  std::vector<StepRecord> steps;
  std::vector<EvalRecord> history;
  std::vector<PhaseSummary> phases;
};

/// Contrastive training on unlabeled sentences. `init` is copied.
TrainResult train_unsupervised(std::span<const EncodedSentence> texts, const EncoderParams& init,
                               const TrainConfig& config, const DevScorer& dev);

/// Any of the four regimes; `nli` or `texts` may be empty when the regime
/// does not use them.
TrainResult train_regime(std::span<const EncodedNli> nli, std::span<const EncodedSentence> texts,
                         const EncoderParams& init, const TrainConfig& config,
                         const DevScorer& dev);

/// phase, step, loss terms, lr, dev score; deterministic text.
void write_metrics_tsv(std::ostream& out, const TrainResult& result);

/// Shortest round-trip decimal text of a number.
std::string format_number(double value);
std::string format_number(float value);

}  // namespace consert
