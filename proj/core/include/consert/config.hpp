#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "consert/data.hpp"
#include "consert/encoder.hpp"
#include "consert/eval.hpp"
#include "consert/train.hpp"

namespace consert {

/// Data locations. Any path may be the literal "synthetic", meaning the
/// matching split of the seeded generator; an empty path means "none".
struct DataConfig {
  std::string unlabeled = "synthetic";
  std::string nli;
  std::string dev = "synthetic";
  std::vector<std::string> test = {"synthetic"};
  /// Frequency table TSV; empty means counting the test pairs.
  std::string freq_table;
  std::size_t min_count = 1;
};

struct EvalConfig {
  Pooling pooling = Pooling::kLastTwoLayersMean;
  std::string checkpoint;
  std::size_t bins = 10;
  std::size_t histogram_sentences = 400;
  std::vector<std::size_t> k_values = {0, 1, 2, 3, 4, 6, 8, 12, 16, 24, 32};
};

struct AnalyzeConfig {
  std::vector<std::size_t> few_shot_sizes = kFewShotSizes;
  std::vector<float> temperatures = kTemperatureGrid;
  std::vector<std::size_t> batch_sizes = kBatchSizes;
  double epochs = 1.0;
};

/// Everything one command needs. `train.seed` always mirrors `seed`.
struct RunConfig {
  std::uint64_t seed = 42;
  std::string out_dir = "runs/default";
  DataConfig data;
  SyntheticOptions synthetic;
  EncoderConfig encoder;
  TrainConfig train;
  EvalConfig eval;
  AnalyzeConfig analyze;

  /// ConfigError / RegimeError naming the offending key.
  void validate() const;
};

/// INI text with sections run, data, synthetic, encoder, train, eval and
/// analyze. Unknown sections or keys are rejected; values may be quoted.
RunConfig parse_run_config(std::istream& in, const std::string& source = "config");
RunConfig load_run_config(const std::filesystem::path& path);

/// Applies one `section.key=value` assignment.
void apply_override(RunConfig& config, std::string_view assignment);
void set_config_value(RunConfig& config, const std::string& key, const std::string& value);

/// Every key with its resolved value, in a fixed order; parses back to an
/// identical configuration.
void write_run_config(std::ostream& out, const RunConfig& config);
std::vector<std::string> config_keys();

/// Data loaded according to a RunConfig. The vocabulary is built from the
/// training texts (unlabeled plus NLI).
struct RunData {
  std::vector<std::string> unlabeled;
  std::vector<NliExample> nli;
  std::vector<SentencePairExample> dev;
  std::vector<StsDataset> test;
};

RunData load_run_data(const RunConfig& config);
Vocab build_training_vocab(const RunData& data, std::size_t min_count);
Experiment make_experiment(const RunConfig& config, const RunData& data, const Vocab& vocab);

}  // namespace consert
