#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "consert/data.hpp"
#include "consert/encoder.hpp"
#include "consert/train.hpp"

namespace consert {

/// Average ranks (1-based) with ties sharing the mean of their positions.
std::vector<double> fractional_ranks(std::span<const double> values);
double pearson(std::span<const double> x, std::span<const double> y);
/// Pearson correlation of fractional ranks. DegenerateInputError if either
/// side is constant, DimensionError on length mismatch or fewer than 2 items.
double spearman(std::span<const double> pred, std::span<const double> gold);

/// A named STS dataset made of one or more splits; scored as one merged set.
struct StsDataset {
  std::string name;
  std::vector<std::vector<SentencePairExample>> splits;

  std::vector<SentencePairExample> merged() const;
  std::size_t size() const;
};

struct EvalReport {
  /// Spearman x 100 per dataset, in input order.
  std::vector<std::pair<std::string, double>> datasets;
  double average = 0.0;
  std::string checkpoint_id;
  std::string pooling;
  std::string config_hash;

  double score(const std::string& name) const;
  void write_tsv(std::ostream& out) const;
  bool operator==(const EvalReport&) const = default;
};

/// Maps sentences to fixed-size vectors.
using SentenceEmbedder =
    std::function<std::vector<std::vector<float>>(std::span<const std::string>)>;

/// Encoder-backed embedder. Tokens in `pool_exclude` are left out of the
/// pooling mean (a sentence with nothing left is pooled unmasked).
SentenceEmbedder encoder_embedder(const EncoderParams& params, const Vocab& vocab,
                                  Pooling pooling,
                                  std::unordered_set<std::int32_t> pool_exclude = {});

/// Pooling mask of a sentence with the excluded ids switched off.
std::vector<float> frequency_pool_mask(const EncodedSentence& sentence,
                                       const std::unordered_set<std::int32_t>& exclude);

double cosine_similarity(std::span<const float> a, std::span<const float> b);

std::vector<double> predict_similarities(const SentenceEmbedder& embedder,
                                         std::span<const SentencePairExample> pairs);

EvalReport evaluate_sts(const SentenceEmbedder& embedder, std::span<const StsDataset> datasets);
EvalReport evaluate_sts(const EncoderParams& params, const Vocab& vocab,
                        std::span<const StsDataset> datasets, Pooling pooling);

/// Spearman x 100 on one list of pairs.
DevScorer make_dev_scorer(const Vocab& vocab, std::vector<SentencePairExample> pairs,
                          Pooling pooling);

struct SimilarityHistogram {
  std::size_t bins = 0;
  /// counts[g * bins + c]: gold bin g over [0, 5], cosine bin c over [-1, 1].
  std::vector<std::size_t> counts;
  std::vector<double> gold;
  std::vector<double> predicted;
  double mean_pairwise_cosine = 0.0;

  std::size_t count(std::size_t gold_bin, std::size_t cosine_bin) const {
    return counts[gold_bin * bins + cosine_bin];
  }
};

/// The mean pairwise cosine covers all pairs among the first
/// `max_sentences` distinct sentences of the input.
SimilarityHistogram similarity_histogram(const SentenceEmbedder& embedder,
                                         std::span<const SentencePairExample> pairs,
                                         std::size_t bins, std::size_t max_sentences = 400);

/// Token occurrence counts over a reference corpus ([PAD] excluded).
class FrequencyTable {
 public:
  /// Counts the tokenized form of every sentence, [CLS] and [SEP] included.
  static FrequencyTable from_corpus(std::span<const std::string> sentences, const Vocab& vocab,
                                    std::size_t max_len);
  static FrequencyTable from_pairs(std::span<const SentencePairExample> pairs, const Vocab& vocab,
                                   std::size_t max_len);

  void add(const std::string& token, std::size_t count);
  std::size_t count(const std::string& token) const;
  std::size_t total() const { return total_; }
  bool empty() const { return entries_.empty(); }
  /// Sorted by count descending, then token ascending.
  std::vector<std::pair<std::string, std::size_t>> entries() const;

  /// The k most frequent in-vocabulary tokens; ties go to the smaller id.
  std::vector<std::int32_t> top_k_ids(const Vocab& vocab, std::size_t k) const;

  /// `token<TAB>count` lines sorted by count descending.
  void write_tsv(std::ostream& out) const;
  static FrequencyTable read_tsv(std::istream& in);

 private:
  std::vector<std::pair<std::string, std::size_t>> entries_;
  std::size_t total_ = 0;
};

struct FrequencyMaskPoint {
  std::size_t k = 0;
  EvalReport report;
};

std::vector<FrequencyMaskPoint> frequency_masked_eval(const EncoderParams& params,
                                                      const Vocab& vocab,
                                                      std::span<const StsDataset> datasets,
                                                      const FrequencyTable& table,
                                                      std::span<const std::size_t> k_values,
                                                      Pooling pooling);

/// Everything a sweep cell needs to train and score one model.
struct Experiment {
  EncoderConfig encoder;
  TrainConfig train;
  Vocab vocab;
  std::vector<std::string> unlabeled;
  std::vector<NliExample> nli;
  std::vector<SentencePairExample> dev;
  std::vector<StsDataset> test;
};

/// 16 hex digits identifying an encoder + training configuration.
std::string config_hash(const EncoderConfig& encoder, const TrainConfig& train);

struct CellResult {
  std::string label;
  std::string config_hash;
  double dev = 0.0;  // best dev Spearman x 100
  EvalReport test;
  std::size_t total_steps = 0;
  double runtime_seconds = 0.0;
};

/// Dev and test scores of the untrained encoder.
CellResult untrained_baseline(const Experiment& experiment);

/// Trains with `train` on `unlabeled` (or the experiment's pool when empty)
/// and scores the best-dev checkpoint.
CellResult run_cell(const Experiment& experiment, const TrainConfig& train,
                    std::span<const std::string> unlabeled, std::string label);

/// Worker count for sweeps: CONSERT_THREADS if set, else the hardware
/// concurrency, never more than `cells`.
std::size_t sweep_threads(std::size_t cells);
/// Runs fn(0..count-1) on up to `threads` workers.
void run_parallel(std::size_t count, std::size_t threads,
                  const std::function<void(std::size_t)>& fn);

std::vector<AugmentationSpec> grid_strategies();

struct GridResult {
  std::vector<AugmentationSpec> strategies;
  /// Row-major: cells[i * n + j] used aug1 = strategies[i], aug2 = strategies[j].
  std::vector<CellResult> cells;

  std::size_t size() const { return strategies.size(); }
  const CellResult& at(std::size_t i, std::size_t j) const { return cells[i * size() + j]; }
  std::pair<std::size_t, std::size_t> argmax() const;
};

/// `strategies` must be None, Shuffle, Token Cutoff, Feature Cutoff, Dropout
/// in that order; ContractError otherwise.
GridResult augmentation_grid(const Experiment& experiment,
                             std::span<const AugmentationSpec> strategies);

inline const std::vector<std::size_t> kFewShotSizes = {1, 10, 100, 1000, 10000};

struct FewShotPoint {
  std::size_t requested = 0;
  std::size_t used = 0;
  CellResult cell;
};

std::vector<FewShotPoint> few_shot_sweep(const Experiment& experiment,
                                         std::span<const std::size_t> sizes);

inline const std::vector<float> kTemperatureGrid = {0.01f, 0.03f, 0.05f, 0.08f,
                                                    0.1f,  0.12f, 0.3f,  1.0f};

struct TemperaturePoint {
  float temperature = 0.0f;
  CellResult cell;
};

std::vector<TemperaturePoint> temperature_sweep(const Experiment& experiment,
                                                std::span<const float> temperatures);
std::size_t best_temperature_index(std::span<const TemperaturePoint> points);

inline const std::vector<std::size_t> kBatchSizes = {16, 48, 96, 192, 288};

struct BatchSizePoint {
  std::size_t batch_size = 0;
  std::size_t steps_per_epoch = 0;
  std::size_t total_steps = 0;
  CellResult cell;
};

/// ceil(pool / N) steps per epoch; every size trains for the same number
/// of epochs.
std::size_t steps_per_epoch(std::size_t pool_size, std::size_t batch_size);
std::vector<BatchSizePoint> batch_size_sweep(const Experiment& experiment,
                                             std::span<const std::size_t> sizes, double epochs);

}  // namespace consert
