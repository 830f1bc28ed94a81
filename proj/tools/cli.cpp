#include "cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "consert/checkpoint.hpp"
#include "consert/config.hpp"
#include "consert/errors.hpp"
#include "consert/eval.hpp"
#include "consert/rng.hpp"
#include "consert/train.hpp"

namespace consert::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::vector<std::string> overrides;
  std::string regime;
  std::string checkpoint;
  std::string pooling;
  std::string k_values;
};

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

std::string snapshot_text(const RunConfig& config) {
  std::ostringstream s;
  write_run_config(s, config);
  return s.str();
}

std::string snapshot_hash(const RunConfig& config) {
  const std::uint64_t h = mix64(hash_name(snapshot_text(config)));
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 0; i < 16; ++i) out[15 - i] = kHex[(h >> (4 * i)) & 0xf];
  return out;
}

RunConfig resolve(const Options& o) {
  RunConfig config = o.config_path.empty() ? RunConfig{} : load_run_config(o.config_path);
  for (const std::string& assignment : o.overrides) apply_override(config, assignment);
  if (o.seed) set_config_value(config, "run.seed", std::to_string(*o.seed));
  if (!o.out_dir.empty()) config.out_dir = o.out_dir;
  if (!o.regime.empty()) set_config_value(config, "train.regime", o.regime);
  if (!o.pooling.empty()) set_config_value(config, "eval.pooling", o.pooling);
  if (!o.checkpoint.empty()) config.eval.checkpoint = o.checkpoint;
  if (!o.k_values.empty()) set_config_value(config, "eval.k_values", o.k_values);
  config.validate();
  return config;
}

void snapshot(const RunConfig& config, const std::string& command) {
  write_file(fs::path(config.out_dir) / (command + ".config.ini"), snapshot_text(config));
}

json report_json(const EvalReport& report) {
  json datasets = json::array();
  for (const auto& [name, value] : report.datasets)
    datasets.push_back({{"name", name}, {"spearman_x100", value}});
  return {{"datasets", datasets},
          {"average", report.average},
          {"checkpoint_id", report.checkpoint_id},
          {"pooling", report.pooling},
          {"config_hash", report.config_hash}};
}

json cell_json(const CellResult& cell) {
  return {{"label", cell.label},
          {"config_hash", cell.config_hash},
          {"dev_spearman_x100", cell.dev},
          {"test_average", cell.test.average},
          {"total_steps", cell.total_steps},
          {"runtime_seconds", cell.runtime_seconds}};
}

std::string report_tsv(const EvalReport& report) {
  std::ostringstream s;
  report.write_tsv(s);
  return s.str();
}

std::vector<StsDataset> merged_test(const RunData& data) {
  return data.test;
}

std::vector<SentencePairExample> all_test_pairs(const RunData& data) {
  std::vector<SentencePairExample> pairs;
  for (const StsDataset& ds : data.test) {
    auto merged = ds.merged();
    pairs.insert(pairs.end(), merged.begin(), merged.end());
  }
  return pairs;
}

/// The configured checkpoint, or a freshly initialized encoder over the
/// training vocabulary when none is given.
Checkpoint model_for_analysis(const RunConfig& config, const RunData& data) {
  if (!config.eval.checkpoint.empty()) return load_checkpoint(config.eval.checkpoint);
  Vocab vocab = build_training_vocab(data, config.data.min_count);
  Experiment e = make_experiment(config, data, vocab);
  return {init_params(e.encoder, config.seed), vocab};
}

std::string checkpoint_id(const RunConfig& config) {
  return config.eval.checkpoint.empty() ? "untrained:seed=" + std::to_string(config.seed)
                                        : config.eval.checkpoint;
}

int cmd_train(const RunConfig& config, std::ostream& out) {
  const RunData data = load_run_data(config);
  const Vocab vocab = build_training_vocab(data, config.data.min_count);
  const Experiment e = make_experiment(config, data, vocab);
  const std::size_t max_len = e.encoder.max_len;
  const std::vector<EncodedSentence> texts = regime_needs_unlabeled(config.train.regime)
                                                 ? encode_all(data.unlabeled, vocab, max_len)
                                                 : std::vector<EncodedSentence>{};
  const std::vector<EncodedNli> nli = regime_needs_nli(config.train.regime)
                                          ? encode_all(data.nli, vocab, max_len)
                                          : std::vector<EncodedNli>{};
  const DevScorer dev = make_dev_scorer(vocab, data.dev, config.eval.pooling);
  const TrainResult result =
      train_regime(nli, texts, init_params(e.encoder, config.seed), config.train, dev);

  const fs::path dir = config.out_dir;
  const fs::path checkpoint = dir / "checkpoints" / "best.ckpt";
  fs::create_directories(checkpoint.parent_path());
  save_checkpoint({result.best, vocab}, checkpoint);

  std::ostringstream metrics;
  write_metrics_tsv(metrics, result);
  write_file(dir / "metrics.tsv", metrics.str());

  EvalReport test = evaluate_sts(result.best, vocab, data.test, config.eval.pooling);
  test.checkpoint_id = checkpoint.string();
  test.config_hash = snapshot_hash(config);
  write_file(dir / "test_report.tsv", report_tsv(test));

  json phases = json::array();
  for (const PhaseSummary& p : result.phases)
    phases.push_back({{"phase", p.name}, {"best_dev", p.best_dev}, {"best_step", p.best_step},
                      {"steps", p.steps}});
  json summary = {{"regime", std::string(regime_name(config.train.regime))},
                  {"checkpoint", checkpoint.string()},
                  {"best_dev_spearman_x100", result.best_dev},
                  {"phases", phases},
                  {"test", report_json(test)}};
  write_file(dir / "train_summary.json", summary.dump(2) + "\n");

  out << "regime\t" << regime_name(config.train.regime) << "\n"
      << "best_dev\t" << format_number(result.best_dev) << "\n"
      << "checkpoint\t" << checkpoint.string() << "\n";
  out << report_tsv(test);
  return kExitOk;
}

int cmd_eval(const RunConfig& config, std::ostream& out) {
  if (config.eval.checkpoint.empty()) {
    throw ConfigError("eval needs --checkpoint (or eval.checkpoint in the config)");
  }
  const Checkpoint ck = load_checkpoint(config.eval.checkpoint);
  const RunData data = load_run_data(config);
  EvalReport report = evaluate_sts(ck.params, ck.vocab, merged_test(data), config.eval.pooling);
  report.checkpoint_id = config.eval.checkpoint;
  report.config_hash = snapshot_hash(config);
  const fs::path dir = config.out_dir;
  write_file(dir / "eval_report.tsv", report_tsv(report));
  write_file(dir / "eval_report.json", report_json(report).dump(2) + "\n");
  out << report_tsv(report);
  return kExitOk;
}

int cmd_histogram(const RunConfig& config, std::ostream& out) {
  const RunData data = load_run_data(config);
  const Checkpoint model = model_for_analysis(config, data);
  const std::vector<SentencePairExample> pairs = all_test_pairs(data);
  const SimilarityHistogram h = similarity_histogram(
      encoder_embedder(model.params, model.vocab, config.eval.pooling), pairs, config.eval.bins,
      config.eval.histogram_sentences);

  std::ostringstream grid;
  grid << "gold_lo,gold_hi,cosine_lo,cosine_hi,count\n";
  const double bins = static_cast<double>(h.bins);
  for (std::size_t g = 0; g < h.bins; ++g)
    for (std::size_t c = 0; c < h.bins; ++c) {
      grid << format_number(5.0 * g / bins) << ',' << format_number(5.0 * (g + 1) / bins) << ','
           << format_number(-1.0 + 2.0 * c / bins) << ','
           << format_number(-1.0 + 2.0 * (c + 1) / bins) << ',' << h.count(g, c) << '\n';
    }
  std::ostringstream points;
  points << "gold,cosine\n";
  for (std::size_t i = 0; i < h.gold.size(); ++i)
    points << format_number(h.gold[i]) << ',' << format_number(h.predicted[i]) << '\n';

  const fs::path dir = config.out_dir;
  write_file(dir / "histogram.csv", grid.str());
  write_file(dir / "histogram_points.csv", points.str());
  json summary = {{"checkpoint_id", checkpoint_id(config)},
                  {"bins", h.bins},
                  {"pairs", h.gold.size()},
                  {"mean_pairwise_cosine", h.mean_pairwise_cosine}};
  write_file(dir / "histogram.json", summary.dump(2) + "\n");
  out << "mean_pairwise_cosine\t" << format_number(h.mean_pairwise_cosine) << "\n";
  return kExitOk;
}

int cmd_freq_mask(const RunConfig& config, std::ostream& out) {
  const RunData data = load_run_data(config);
  const Checkpoint model = model_for_analysis(config, data);
  FrequencyTable table;
  if (!config.data.freq_table.empty()) {
    std::ifstream in(config.data.freq_table);
    if (!in) throw IoError("cannot open frequency table " + config.data.freq_table);
    table = FrequencyTable::read_tsv(in);
  } else {
    table = FrequencyTable::from_pairs(all_test_pairs(data), model.vocab,
                                       model.params.config.max_len);
  }
  const auto points = frequency_masked_eval(model.params, model.vocab, data.test, table,
                                            config.eval.k_values, config.eval.pooling);

  std::ostringstream csv;
  csv << 'k';
  for (const StsDataset& ds : data.test) csv << ',' << ds.name;
  csv << ",avg\n";
  json records = json::array();
  for (const FrequencyMaskPoint& p : points) {
    csv << p.k;
    for (const auto& [name, value] : p.report.datasets) csv << ',' << format_number(value);
    csv << ',' << format_number(p.report.average) << '\n';
    EvalReport report = p.report;
    report.checkpoint_id = checkpoint_id(config);
    report.config_hash = snapshot_hash(config);
    records.push_back({{"k", p.k}, {"report", report_json(report)}});
  }
  std::ostringstream table_text;
  table.write_tsv(table_text);

  const fs::path dir = config.out_dir;
  write_file(dir / "freq_mask.csv", csv.str());
  write_file(dir / "freq_mask.json", records.dump(2) + "\n");
  write_file(dir / "frequency_table.tsv", table_text.str());
  out << csv.str();
  return kExitOk;
}

Experiment experiment_for(const RunConfig& config, const RunData& data) {
  return make_experiment(config, data, build_training_vocab(data, config.data.min_count));
}

int cmd_grid(const RunConfig& config, std::ostream& out) {
  const RunData data = load_run_data(config);
  const Experiment e = experiment_for(config, data);
  const CellResult baseline = untrained_baseline(e);
  const std::vector<AugmentationSpec> strategies = grid_strategies();
  const GridResult grid = augmentation_grid(e, strategies);

  auto matrix = [&](bool dev) {
    std::ostringstream s;
    s << "aug1\\aug2";
    for (const auto& st : strategies) s << ',' << aug_kind_name(st.kind);
    s << '\n';
    for (std::size_t i = 0; i < grid.size(); ++i) {
      s << aug_kind_name(strategies[i].kind);
      for (std::size_t j = 0; j < grid.size(); ++j)
        s << ',' << format_number(dev ? grid.at(i, j).dev : grid.at(i, j).test.average);
      s << '\n';
    }
    return s.str();
  };
  json cells = json::array();
  for (std::size_t i = 0; i < grid.size(); ++i)
    for (std::size_t j = 0; j < grid.size(); ++j) {
      json c = cell_json(grid.at(i, j));
      c["aug1"] = strategies[i].to_string();
      c["aug2"] = strategies[j].to_string();
      cells.push_back(c);
    }
  const auto [bi, bj] = grid.argmax();
  json summary = {{"baseline", cell_json(baseline)},
                  {"argmax", {{"aug1", strategies[bi].to_string()}, {"aug2", strategies[bj].to_string()}}},
                  {"cells", cells}};

  const fs::path dir = config.out_dir;
  write_file(dir / "grid.csv", matrix(false));
  write_file(dir / "grid_dev.csv", matrix(true));
  write_file(dir / "grid.json", summary.dump(2) + "\n");
  out << matrix(false) << "argmax\t" << strategies[bi].to_string() << '\t'
      << strategies[bj].to_string() << '\n';
  return kExitOk;
}

int cmd_few_shot(const RunConfig& config, std::ostream& out) {
  const RunData data = load_run_data(config);
  const Experiment e = experiment_for(config, data);
  const auto points = few_shot_sweep(e, config.analyze.few_shot_sizes);
  std::ostringstream csv;
  csv << "requested,used,dev,avg\n";
  json records = json::array();
  for (const FewShotPoint& p : points) {
    csv << p.requested << ',' << p.used << ',' << format_number(p.cell.dev) << ','
        << format_number(p.cell.test.average) << '\n';
    json r = cell_json(p.cell);
    r["requested"] = p.requested;
    r["used"] = p.used;
    records.push_back(r);
  }
  write_file(fs::path(config.out_dir) / "few_shot.csv", csv.str());
  write_file(fs::path(config.out_dir) / "few_shot.json", records.dump(2) + "\n");
  out << csv.str();
  return kExitOk;
}

int cmd_temperature(const RunConfig& config, std::ostream& out) {
  const RunData data = load_run_data(config);
  const Experiment e = experiment_for(config, data);
  const auto points = temperature_sweep(e, config.analyze.temperatures);
  std::ostringstream csv;
  csv << "temperature,dev,avg\n";
  json records = json::array();
  for (const TemperaturePoint& p : points) {
    csv << format_number(p.temperature) << ',' << format_number(p.cell.dev) << ','
        << format_number(p.cell.test.average) << '\n';
    json r = cell_json(p.cell);
    r["temperature"] = p.temperature;
    records.push_back(r);
  }
  const float best = points[best_temperature_index(points)].temperature;
  json summary = {{"best_temperature", best}, {"cells", records}};
  write_file(fs::path(config.out_dir) / "temperature.csv", csv.str());
  write_file(fs::path(config.out_dir) / "temperature.json", summary.dump(2) + "\n");
  out << csv.str() << "best\t" << format_number(best) << '\n';
  return kExitOk;
}

int cmd_batch_size(const RunConfig& config, std::ostream& out) {
  const RunData data = load_run_data(config);
  const Experiment e = experiment_for(config, data);
  const auto points = batch_size_sweep(e, config.analyze.batch_sizes, config.analyze.epochs);
  std::ostringstream csv;
  csv << "batch_size,steps_per_epoch,total_steps,dev,avg\n";
  json records = json::array();
  for (const BatchSizePoint& p : points) {
    csv << p.batch_size << ',' << p.steps_per_epoch << ',' << p.total_steps << ','
        << format_number(p.cell.dev) << ',' << format_number(p.cell.test.average) << '\n';
    json r = cell_json(p.cell);
    r["batch_size"] = p.batch_size;
    r["steps_per_epoch"] = p.steps_per_epoch;
    records.push_back(r);
  }
  write_file(fs::path(config.out_dir) / "batch_size.csv", csv.str());
  write_file(fs::path(config.out_dir) / "batch_size.json", records.dump(2) + "\n");
  out << csv.str();
  return kExitOk;
}

int cmd_gen_data(const RunConfig& config, std::ostream& out) {
  const SyntheticCorpus corpus = make_synthetic_corpus(config.seed, config.synthetic);
  const fs::path dir = config.out_dir;
  std::ostringstream unlabeled, dev, test, nli;
  write_unlabeled(unlabeled, corpus.unlabeled);
  write_sts_tsv(dev, corpus.dev);
  write_sts_tsv(test, corpus.test);
  write_nli_tsv(nli, corpus.nli);
  write_file(dir / "unlabeled.txt", unlabeled.str());
  write_file(dir / "dev.tsv", dev.str());
  write_file(dir / "test.tsv", test.str());
  write_file(dir / "nli.tsv", nli.str());
  out << "unlabeled\t" << corpus.unlabeled.size() << "\n"
      << "dev\t" << corpus.dev.size() << "\n"
      << "test\t" << corpus.test.size() << "\n"
      << "nli\t" << corpus.nli.size() << "\n";
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Options o;
  CLI::App app{"Contrastive sentence-embedding trainer and STS analysis toolkit", "consert"};
  app.require_subcommand(1);
  app.fallthrough();
  app.add_option("--config", o.config_path, "INI config file");
  app.add_option("--seed", o.seed, "Root random seed (run.seed)");
  app.add_option("--out-dir", o.out_dir, "Output directory (run.out_dir)");
  app.add_option("--override", o.overrides, "section.key=value; repeatable")
      ->allow_extra_args(false);

  CLI::App* train = app.add_subcommand("train", "Train an encoder and save the best-dev checkpoint");
  train->add_option("--regime", o.regime, "unsup, joint, sup-unsup or joint-unsup");

  CLI::App* eval = app.add_subcommand("eval", "Score a checkpoint on the test datasets");
  eval->add_option("--checkpoint", o.checkpoint, "Checkpoint file");
  eval->add_option("--pooling", o.pooling, "last_layer_mean or last_two_layers_mean");

  CLI::App* analyze = app.add_subcommand("analyze", "Run one of the analyses");
  analyze->require_subcommand(1);
  CLI::App* histogram = analyze->add_subcommand("histogram", "Gold vs cosine density grid");
  CLI::App* freq = analyze->add_subcommand("freq-mask", "Pooling without the top-k frequent tokens");
  for (CLI::App* sub : {histogram, freq}) {
    sub->add_option("--checkpoint", o.checkpoint, "Checkpoint file (default: untrained encoder)");
    sub->add_option("--pooling", o.pooling, "last_layer_mean or last_two_layers_mean");
  }
  freq->add_option("--k", o.k_values, "Comma-separated k values");
  CLI::App* grid = analyze->add_subcommand("grid", "5x5 augmentation grid");
  CLI::App* few = analyze->add_subcommand("few-shot", "Unlabeled pool size sweep");
  CLI::App* temp = analyze->add_subcommand("temperature", "Temperature sweep");
  CLI::App* batch = analyze->add_subcommand("batch-size", "Equal-epoch batch size sweep");

  CLI::App* gen = app.add_subcommand("gen-data", "Write the seeded synthetic corpus");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    const RunConfig config = resolve(o);
    std::string command;
    int (*handler)(const RunConfig&, std::ostream&) = nullptr;
    if (train->parsed()) command = "train", handler = cmd_train;
    else if (eval->parsed()) command = "eval", handler = cmd_eval;
    else if (histogram->parsed()) command = "analyze-histogram", handler = cmd_histogram;
    else if (freq->parsed()) command = "analyze-freq-mask", handler = cmd_freq_mask;
    else if (grid->parsed()) command = "analyze-grid", handler = cmd_grid;
    else if (few->parsed()) command = "analyze-few-shot", handler = cmd_few_shot;
    else if (temp->parsed()) command = "analyze-temperature", handler = cmd_temperature;
    else if (batch->parsed()) command = "analyze-batch-size", handler = cmd_batch_size;
    else if (gen->parsed()) command = "gen-data", handler = cmd_gen_data;
    snapshot(config, command);
    return handler(config, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const RegimeError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace consert::cli
