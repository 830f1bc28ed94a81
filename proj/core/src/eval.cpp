#include "consert/eval.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <istream>
#include <map>
#include <mutex>
#include <numeric>
#include <ostream>
#include <sstream>
#include <thread>
#include <unordered_map>

#include "consert/errors.hpp"
#include "consert/rng.hpp"

namespace consert {

std::vector<double> fractional_ranks(std::span<const double> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i + 1;
    while (j < n && values[order[j]] == values[order[i]]) ++j;
    // positions i..j-1 hold equal values; 1-based mean rank
    const double rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t t = i; t < j; ++t) ranks[order[t]] = rank;
    i = j;
  }
  return ranks;
}

double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) {
    throw DimensionError("correlation: " + std::to_string(x.size()) + " vs " +
                         std::to_string(y.size()) + " values");
  }
  if (x.size() < 2) throw DimensionError("correlation: need at least 2 values");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) {
    throw DegenerateInputError("correlation undefined: one side is constant");
  }
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

double spearman(std::span<const double> pred, std::span<const double> gold) {
  if (pred.size() != gold.size()) {
    throw DimensionError("spearman: " + std::to_string(pred.size()) + " predictions vs " +
                         std::to_string(gold.size()) + " gold scores");
  }
  const std::vector<double> rp = fractional_ranks(pred);
  const std::vector<double> rg = fractional_ranks(gold);
  return pearson(rp, rg);
}

std::vector<SentencePairExample> StsDataset::merged() const {
  std::vector<SentencePairExample> out;
  for (const auto& split : splits) out.insert(out.end(), split.begin(), split.end());
  return out;
}

std::size_t StsDataset::size() const {
  std::size_t n = 0;
  for (const auto& split : splits) n += split.size();
  return n;
}

double EvalReport::score(const std::string& name) const {
  for (const auto& [dataset, value] : datasets)
    if (dataset == name) return value;
  throw ContractError("report has no dataset '" + name + "'");
}

void EvalReport::write_tsv(std::ostream& out) const {
  out << "dataset\tspearman_x100\n";
  for (const auto& [name, value] : datasets) out << name << '\t' << format_number(value) << '\n';
  out << "avg\t" << format_number(average) << '\n';
}

std::vector<float> frequency_pool_mask(const EncodedSentence& sentence,
                                       const std::unordered_set<std::int32_t>& exclude) {
  std::vector<float> mask = sentence.attention_mask;
  bool any = false;
  for (std::size_t t = 0; t < mask.size(); ++t) {
    if (mask[t] != 0.0f && exclude.count(sentence.token_ids[t])) mask[t] = 0.0f;
    any = any || mask[t] != 0.0f;
  }
  return any ? mask : sentence.attention_mask;
}

SentenceEmbedder encoder_embedder(const EncoderParams& params, const Vocab& vocab,
                                  Pooling pooling, std::unordered_set<std::int32_t> pool_exclude) {
  return [params, vocab, pooling, exclude = std::move(pool_exclude)](
             std::span<const std::string> sentences) {
    std::vector<EncodedSentence> encoded;
    encoded.reserve(sentences.size());
    for (const std::string& s : sentences) encoded.push_back(tokenize(s, vocab, params.config.max_len));
    if (exclude.empty()) return embed_sentences(params, encoded, pooling);
    std::vector<std::vector<float>> masks;
    masks.reserve(encoded.size());
    for (const EncodedSentence& e : encoded) masks.push_back(frequency_pool_mask(e, exclude));
    return embed_sentences(params, encoded, pooling, 64, &masks);
  };
}

double cosine_similarity(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw DimensionError("cosine: vectors differ in length");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

std::vector<double> predict_similarities(const SentenceEmbedder& embedder,
                                         std::span<const SentencePairExample> pairs) {
  std::vector<std::string> first, second;
  first.reserve(pairs.size());
  second.reserve(pairs.size());
  for (const auto& p : pairs) {
    first.push_back(p.sentence_a);
    second.push_back(p.sentence_b);
  }
  const auto ea = embedder(first);
  const auto eb = embedder(second);
  std::vector<double> sims(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) sims[i] = cosine_similarity(ea[i], eb[i]);
  return sims;
}

EvalReport evaluate_sts(const SentenceEmbedder& embedder, std::span<const StsDataset> datasets) {
  if (datasets.empty()) throw DataError("evaluation needs at least one dataset");
  EvalReport report;
  double total = 0.0;
  for (const StsDataset& ds : datasets) {
    const std::vector<SentencePairExample> pairs = ds.merged();
    if (pairs.empty()) throw DataError("dataset '" + ds.name + "' is empty");
    std::vector<double> gold(pairs.size());
    for (std::size_t i = 0; i < pairs.size(); ++i) gold[i] = pairs[i].gold;
    const double rho = 100.0 * spearman(predict_similarities(embedder, pairs), gold);
    report.datasets.emplace_back(ds.name, rho);
    total += rho;
  }
  report.average = total / static_cast<double>(datasets.size());
  return report;
}

EvalReport evaluate_sts(const EncoderParams& params, const Vocab& vocab,
                        std::span<const StsDataset> datasets, Pooling pooling) {
  EvalReport report = evaluate_sts(encoder_embedder(params, vocab, pooling), datasets);
  report.pooling = std::string(pooling_name(pooling));
  return report;
}

DevScorer make_dev_scorer(const Vocab& vocab, std::vector<SentencePairExample> pairs,
                          Pooling pooling) {
  if (pairs.empty()) throw DataError("dev set is empty");
  std::vector<double> gold(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) gold[i] = pairs[i].gold;
  return [vocab, pairs = std::move(pairs), gold = std::move(gold), pooling](
             const EncoderParams& params) {
    return 100.0 * spearman(predict_similarities(encoder_embedder(params, vocab, pooling), pairs),
                            gold);
  };
}

SimilarityHistogram similarity_histogram(const SentenceEmbedder& embedder,
                                         std::span<const SentencePairExample> pairs,
                                         std::size_t bins, std::size_t max_sentences) {
  if (bins < 2) throw ContractError("similarity_histogram: bins must be at least 2");
  SimilarityHistogram h;
  h.bins = bins;
  h.counts.assign(bins * bins, 0);
  h.predicted = predict_similarities(embedder, pairs);
  auto bin_of = [bins](double x, double lo, double hi) {
    const double t = (x - lo) / (hi - lo) * static_cast<double>(bins);
    return static_cast<std::size_t>(std::clamp(std::floor(t), 0.0, static_cast<double>(bins - 1)));
  };
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    h.gold.push_back(pairs[i].gold);
    ++h.counts[bin_of(pairs[i].gold, 0.0, 5.0) * bins + bin_of(h.predicted[i], -1.0, 1.0)];
  }

  std::vector<std::string> distinct;
  std::unordered_set<std::string> seen;
  for (const auto& p : pairs) {
    for (const std::string* s : {&p.sentence_a, &p.sentence_b}) {
      if (distinct.size() < max_sentences && seen.insert(*s).second) distinct.push_back(*s);
    }
  }
  if (distinct.size() >= 2) {
    const auto vectors = embedder(distinct);
    double total = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < vectors.size(); ++i)
      for (std::size_t j = i + 1; j < vectors.size(); ++j, ++n)
        total += cosine_similarity(vectors[i], vectors[j]);
    h.mean_pairwise_cosine = total / static_cast<double>(n);
  }
  return h;
}

namespace {

std::map<std::string, std::size_t> count_tokens(const std::vector<EncodedSentence>& encoded,
                                                const Vocab& vocab) {
  std::map<std::string, std::size_t> counts;
  for (const EncodedSentence& e : encoded)
    for (std::int32_t id : e.token_ids)
      if (id != Vocab::kPad) ++counts[vocab.token(id)];
  return counts;
}

}  // namespace

FrequencyTable FrequencyTable::from_corpus(std::span<const std::string> sentences,
                                           const Vocab& vocab, std::size_t max_len) {
  FrequencyTable table;
  for (const auto& [token, n] : count_tokens(encode_all(sentences, vocab, max_len), vocab))
    table.add(token, n);
  return table;
}

FrequencyTable FrequencyTable::from_pairs(std::span<const SentencePairExample> pairs,
                                          const Vocab& vocab, std::size_t max_len) {
  std::vector<std::string> sentences;
  for (const auto& p : pairs) {
    sentences.push_back(p.sentence_a);
    sentences.push_back(p.sentence_b);
  }
  return from_corpus(sentences, vocab, max_len);
}

void FrequencyTable::add(const std::string& token, std::size_t count) {
  if (count == 0) throw DataError("frequency table: count for '" + token + "' must be positive");
  for (auto& [t, n] : entries_) {
    if (t == token) {
      n += count;
      total_ += count;
      return;
    }
  }
  entries_.emplace_back(token, count);
  total_ += count;
}

std::size_t FrequencyTable::count(const std::string& token) const {
  for (const auto& [t, n] : entries_)
    if (t == token) return n;
  return 0;
}

std::vector<std::pair<std::string, std::size_t>> FrequencyTable::entries() const {
  auto sorted = entries_;
  std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  return sorted;
}

std::vector<std::int32_t> FrequencyTable::top_k_ids(const Vocab& vocab, std::size_t k) const {
  std::vector<std::pair<std::size_t, std::int32_t>> ranked;
  for (const auto& [token, n] : entries_)
    if (vocab.contains(token)) ranked.emplace_back(n, vocab.id(token));
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  std::vector<std::int32_t> ids;
  for (std::size_t i = 0; i < std::min(k, ranked.size()); ++i) ids.push_back(ranked[i].second);
  return ids;
}

void FrequencyTable::write_tsv(std::ostream& out) const {
  for (const auto& [token, n] : entries()) out << token << '\t' << n << '\n';
}

FrequencyTable FrequencyTable::read_tsv(std::istream& in) {
  FrequencyTable table;
  std::vector<LineError> errors;
  std::string line;
  for (std::size_t line_no = 1; std::getline(in, line); ++line_no) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::size_t tab = line.find('\t');
    if (tab == std::string::npos || tab == 0) {
      errors.push_back({line_no, "expected token<TAB>count"});
      continue;
    }
    const std::string count_text = line.substr(tab + 1);
    std::size_t n = 0;
    std::istringstream parse(count_text);
    if (!(parse >> n) || !parse.eof() || n == 0 || count_text.find('-') != std::string::npos) {
      errors.push_back({line_no, "count must be a positive integer, got '" + count_text + "'"});
      continue;
    }
    table.add(line.substr(0, tab), n);
  }
  if (!errors.empty()) throw_data_error(describe_errors(errors, "frequency table"));
  return table;
}

std::vector<FrequencyMaskPoint> frequency_masked_eval(const EncoderParams& params,
                                                      const Vocab& vocab,
                                                      std::span<const StsDataset> datasets,
                                                      const FrequencyTable& table,
                                                      std::span<const std::size_t> k_values,
                                                      Pooling pooling) {
  if (table.empty()) throw DataError("frequency table is empty");
  std::vector<FrequencyMaskPoint> out;
  for (std::size_t k : k_values) {
    const std::vector<std::int32_t> top = table.top_k_ids(vocab, k);
    EvalReport report =
        evaluate_sts(encoder_embedder(params, vocab, pooling, {top.begin(), top.end()}), datasets);
    report.pooling = std::string(pooling_name(pooling));
    out.push_back({k, std::move(report)});
  }
  return out;
}

std::string config_hash(const EncoderConfig& e, const TrainConfig& t) {
  std::ostringstream s;
  s << "encoder:" << e.vocab_size << ',' << e.max_len << ',' << e.d_model << ',' << e.n_layers
    << ',' << e.n_heads << ',' << e.d_ff << ',' << pooling_name(e.pooling) << ";train:"
    << regime_name(t.regime) << ',' << t.batch_size << ',' << format_number(t.temperature) << ','
    << format_number(t.alpha) << ',' << format_number(t.lr) << ','
    << format_number(t.warmup_fraction) << ',' << t.total_steps << ',' << t.eval_every << ','
    << t.seed << ',' << t.aug1.to_string() << ',' << t.aug2.to_string();
  const std::uint64_t h = mix64(hash_name(s.str()));
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 0; i < 16; ++i) out[15 - i] = kHex[(h >> (4 * i)) & 0xf];
  return out;
}

CellResult untrained_baseline(const Experiment& experiment) {
  const auto start = std::chrono::steady_clock::now();
  const EncoderParams params = init_params(experiment.encoder, experiment.train.seed);
  CellResult cell;
  cell.label = "untrained";
  cell.config_hash = config_hash(experiment.encoder, experiment.train);
  cell.dev = make_dev_scorer(experiment.vocab, experiment.dev, experiment.encoder.pooling)(params);
  cell.test = evaluate_sts(params, experiment.vocab, experiment.test, experiment.encoder.pooling);
  cell.test.config_hash = cell.config_hash;
  cell.runtime_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return cell;
}

CellResult run_cell(const Experiment& experiment, const TrainConfig& train,
                    std::span<const std::string> unlabeled, std::string label) {
  const auto start = std::chrono::steady_clock::now();
  if (unlabeled.empty()) unlabeled = experiment.unlabeled;
  const std::size_t max_len = experiment.encoder.max_len;
  const EncoderParams init = init_params(experiment.encoder, train.seed);
  const std::vector<EncodedSentence> texts = encode_all(unlabeled, experiment.vocab, max_len);
  const std::vector<EncodedNli> nli = regime_needs_nli(train.regime)
                                          ? encode_all(experiment.nli, experiment.vocab, max_len)
                                          : std::vector<EncodedNli>{};
  const DevScorer dev = make_dev_scorer(experiment.vocab, experiment.dev, experiment.encoder.pooling);
  const TrainResult result = train_regime(nli, texts, init, train, dev);

  CellResult cell;
  cell.label = std::move(label);
  cell.config_hash = config_hash(experiment.encoder, train);
  cell.dev = result.best_dev;
  cell.test = evaluate_sts(result.best, experiment.vocab, experiment.test, experiment.encoder.pooling);
  cell.test.config_hash = cell.config_hash;
  cell.total_steps = result.steps.size();
  cell.runtime_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return cell;
}

std::size_t sweep_threads(std::size_t cells) {
  std::size_t threads = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("CONSERT_THREADS")) {
    char* end = nullptr;
    const long value = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && value > 0) threads = static_cast<std::size_t>(value);
    else warn(std::string("ignoring CONSERT_THREADS='") + env + "'");
  }
  return std::max<std::size_t>(1, std::min(threads, cells));
}

void run_parallel(std::size_t count, std::size_t threads,
                  const std::function<void(std::size_t)>& fn) {
  if (threads <= 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> workers;
  for (std::size_t w = 0; w < std::min(threads, count); ++w) {
    workers.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(failure_mutex);
          if (!failure) failure = std::current_exception();
          next = count;
        }
      }
    });
  }
  for (auto& w : workers) w.join();
  if (failure) std::rethrow_exception(failure);
}

std::vector<AugmentationSpec> grid_strategies() {
  return {AugmentationSpec::none(), AugmentationSpec::shuffle(), AugmentationSpec::token_cutoff(),
          AugmentationSpec::feature_cutoff(), AugmentationSpec::dropout()};
}

std::pair<std::size_t, std::size_t> GridResult::argmax() const {
  std::size_t best = 0;
  for (std::size_t c = 1; c < cells.size(); ++c)
    if (cells[c].test.average > cells[best].test.average) best = c;
  return {best / size(), best % size()};
}

namespace {

TrainConfig unsup_config(const Experiment& experiment) {
  TrainConfig t = experiment.train;
  t.regime = Regime::kUnsup;
  return t;
}

}  // namespace

GridResult augmentation_grid(const Experiment& experiment,
                             std::span<const AugmentationSpec> strategies) {
  const std::vector<AugmentationSpec> expected = grid_strategies();
  bool ok = strategies.size() == expected.size();
  for (std::size_t i = 0; ok && i < expected.size(); ++i) ok = strategies[i].kind == expected[i].kind;
  if (!ok) {
    throw ContractError(
        "augmentation grid needs exactly none, shuffle, token_cutoff, feature_cutoff, dropout");
  }
  GridResult grid;
  grid.strategies.assign(strategies.begin(), strategies.end());
  const std::size_t n = strategies.size();
  grid.cells.resize(n * n);
  run_parallel(n * n, sweep_threads(n * n), [&](std::size_t c) {
    TrainConfig t = unsup_config(experiment);
    t.aug1 = strategies[c / n];
    t.aug2 = strategies[c % n];
    grid.cells[c] = run_cell(experiment, t, experiment.unlabeled,
                             t.aug1.to_string() + "|" + t.aug2.to_string());
  });
  return grid;
}

std::vector<FewShotPoint> few_shot_sweep(const Experiment& experiment,
                                         std::span<const std::size_t> sizes) {
  std::vector<FewShotPoint> points(sizes.size());
  std::vector<std::vector<std::string>> subsets(sizes.size());
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    if (sizes[i] == 0) throw ConfigError("few-shot sizes must be positive");
    subsets[i] = subsample(experiment.unlabeled, sizes[i],
                           derive_seed(experiment.train.seed, "data.fewshot", sizes[i]));
    points[i].requested = sizes[i];
    points[i].used = subsets[i].size();
  }
  run_parallel(sizes.size(), sweep_threads(sizes.size()), [&](std::size_t i) {
    points[i].cell = run_cell(experiment, unsup_config(experiment), subsets[i],
                              "n=" + std::to_string(points[i].used));
  });
  return points;
}

std::vector<TemperaturePoint> temperature_sweep(const Experiment& experiment,
                                                std::span<const float> temperatures) {
  std::vector<TemperaturePoint> points(temperatures.size());
  run_parallel(temperatures.size(), sweep_threads(temperatures.size()), [&](std::size_t i) {
    TrainConfig t = unsup_config(experiment);
    t.temperature = temperatures[i];
    points[i].temperature = temperatures[i];
    points[i].cell =
        run_cell(experiment, t, experiment.unlabeled, "tau=" + format_number(temperatures[i]));
  });
  return points;
}

std::size_t best_temperature_index(std::span<const TemperaturePoint> points) {
  if (points.empty()) throw ContractError("no temperature points");
  std::size_t best = 0;
  for (std::size_t i = 1; i < points.size(); ++i)
    if (points[i].cell.test.average > points[best].cell.test.average) best = i;
  return best;
}

std::size_t steps_per_epoch(std::size_t pool_size, std::size_t batch_size) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  return (pool_size + batch_size - 1) / batch_size;
}

std::vector<BatchSizePoint> batch_size_sweep(const Experiment& experiment,
                                             std::span<const std::size_t> sizes, double epochs) {
  if (!(epochs > 0.0)) throw ConfigError("batch-size sweep needs a positive number of epochs");
  std::vector<BatchSizePoint> points(sizes.size());
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    points[i].batch_size = sizes[i];
    points[i].steps_per_epoch = steps_per_epoch(experiment.unlabeled.size(), sizes[i]);
    points[i].total_steps = std::max<std::size_t>(
        1, static_cast<std::size_t>(
               std::ceil(epochs * static_cast<double>(points[i].steps_per_epoch) - 1e-9)));
  }
  run_parallel(sizes.size(), sweep_threads(sizes.size()), [&](std::size_t i) {
    TrainConfig t = unsup_config(experiment);
    t.batch_size = points[i].batch_size;
    t.total_steps = points[i].total_steps;
    t.eval_every = std::min(t.eval_every, t.total_steps);
    points[i].cell =
        run_cell(experiment, t, experiment.unlabeled, "N=" + std::to_string(t.batch_size));
  });
  return points;
}

}  // namespace consert
