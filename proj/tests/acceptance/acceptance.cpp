#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <sstream>
#include <unordered_set>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "cli.hpp"
#include "consert/checkpoint.hpp"
#include "consert/config.hpp"
#include "consert/errors.hpp"
#include "desk.hpp"
#include "grad_cases.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace consert;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

void require(Outcome& o, bool ok, const std::string& what) {
  if (!ok) {
    o.pass = false;
    if (!o.detail.empty()) o.detail += "; ";
    o.detail += "failed: " + what;
  }
}

void note(Outcome& o, const std::string& text) {
  if (!o.detail.empty()) o.detail += "; ";
  o.detail += text;
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

Outcome gradient_suite() {
  Outcome o;
  const auto start = std::chrono::steady_clock::now();
  double worst_op = 0.0;
  std::string worst_name;
  std::size_t checks = 0;
  for (const auto& c : testing::op_cases()) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      const auto r = grad_check(c.fn, c.leaves(seed * 101), 1e-3f, 1e-3);
      ++checks;
      if (r.max_relative_error > worst_op) {
        worst_op = r.max_relative_error;
        worst_name = c.name;
      }
      require(o, r.max_relative_error < 1e-3, fmt::format("{} seed {} err {:.3g}", c.name, seed, r.max_relative_error));
    }
  }
  double worst_comp = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto r = testing::encoder_nt_xent_check(seed);
    worst_comp = std::max(worst_comp, r.global_relative_error);
    require(o, r.global_relative_error < 1e-3,
            fmt::format("encoder+nt_xent seed {} err {:.3g}", seed, r.global_relative_error));
  }
  const double elapsed = seconds_since(start);
  require(o, elapsed < 120.0, fmt::format("runtime {:.1f}s", elapsed));
  note(o, fmt::format("{} ops x 5 seeds, worst op {} {:.2e}; encoder+nt_xent worst {:.2e}; {:.1f}s",
                      testing::op_cases().size(), worst_name, worst_op, worst_comp, elapsed));
  return o;
}

double nt_xent_value(const std::vector<std::vector<float>>& rows, float tau) {
  std::vector<float> flat;
  for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
  Tape tape(GradMode::kDisabled);
  return nt_xent(tape, Tensor::from({rows.size(), rows[0].size()}, flat), tau).wide_item();
}

Outcome nt_xent_closed_forms() {
  Outcome o;
  Rng rng(2024);
  double worst_single = 0.0, worst_ln3 = 0.0, worst_scale = 0.0, min_loss = 1e9;
  for (int i = 0; i < 100; ++i) {
    const std::size_t d = 2 + rng.uniform_index(15);
    std::vector<std::vector<float>> rows(2, std::vector<float>(d));
    for (auto& r : rows)
      for (float& v : r) v = rng.normal(0.0f, 1.0f);
    worst_single = std::max(worst_single, std::fabs(nt_xent_value(rows, 0.1f)));
  }
  require(o, worst_single <= 1e-9, fmt::format("N=1 loss {:.3g}", worst_single));
  for (float tau : {0.05f, 0.1f, 1.0f}) {
    for (int i = 0; i < 20; ++i) {
      std::vector<float> r(2 + rng.uniform_index(15));
      for (float& v : r) v = rng.normal(0.0f, 1.0f);
      const double loss = nt_xent_value({r, r, r, r}, tau);
      worst_ln3 = std::max(worst_ln3, std::fabs(loss - std::log(3.0)));
    }
  }
  require(o, worst_ln3 <= 1e-6, fmt::format("ln3 deviation {:.3g}", worst_ln3));
  for (int batch = 0; batch < 1000; ++batch) {
    const std::size_t n = 1 + rng.uniform_index(8), d = 2 + rng.uniform_index(15);
    const float tau = static_cast<float>(0.02 + rng.uniform());
    std::vector<std::vector<float>> rows(2 * n, std::vector<float>(d));
    for (auto& r : rows)
      for (float& v : r) v = rng.normal(0.0f, 1.0f);
    const double loss = nt_xent_value(rows, tau);
    min_loss = std::min(min_loss, loss);
    auto scaled = rows;
    for (auto& r : scaled) {
      const float s = static_cast<float>(std::exp(rng.uniform() * 8.0 - 4.0));
      for (float& v : r) v *= s;
    }
    worst_scale = std::max(worst_scale, std::fabs(nt_xent_value(scaled, tau) - loss) / std::max(1.0, loss));
  }
  require(o, min_loss >= 0.0, fmt::format("negative loss {:.3g}", min_loss));
  require(o, worst_scale <= 1e-5, fmt::format("scale invariance {:.3g}", worst_scale));
  note(o, fmt::format("N=1 max |L| {:.1e}; ln3 max dev {:.1e}; 1000 batches min L {:.3g}, scale dev {:.1e}",
                      worst_single, worst_ln3, min_loss, worst_scale));
  return o;
}

Outcome spearman_oracle() {
  Outcome o;
  Rng rng(77);
  double worst = 0.0;
  std::size_t done = 0, with_ties = 0;
  while (done < 1000) {
    const std::size_t n = 2 + rng.uniform_index(60);
    const std::size_t levels = 2 + rng.uniform_index(8);
    std::vector<double> pred(n), gold(n);
    for (std::size_t i = 0; i < n; ++i) {
      pred[i] = rng.bernoulli(0.5) ? static_cast<double>(rng.uniform_index(levels)) : rng.uniform();
      gold[i] = static_cast<double>(rng.uniform_index(levels)) * 0.5;
    }
    if (std::adjacent_find(pred.begin(), pred.end(), std::not_equal_to<>()) == pred.end()) continue;
    if (std::adjacent_find(gold.begin(), gold.end(), std::not_equal_to<>()) == gold.end()) continue;
    std::vector<double> sorted = gold;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) ++with_ties;
    worst = std::max(worst, std::fabs(spearman(pred, gold) - testing::oracle_spearman(pred, gold)));
    ++done;
  }
  require(o, worst <= 1e-12, fmt::format("max diff {:.3g}", worst));
  note(o, fmt::format("1000 instances ({} with ties), max |diff| {:.1e}", with_ties, worst));
  return o;
}

struct TrainedDesk {
  Experiment experiment;
  EncoderParams untrained;
  EncoderParams trained;
  double dev_untrained = 0.0;
  double dev_trained = 0.0;
};

TrainedDesk train_desk(const AugmentationSpec& aug1, const AugmentationSpec& aug2) {
  RunConfig cfg = testing::desk_config();
  cfg.train.aug1 = aug1;
  cfg.train.aug2 = aug2;
  TrainedDesk d{testing::desk_experiment(cfg), {}, {}, 0.0, 0.0};
  const Experiment& e = d.experiment;
  d.untrained = init_params(e.encoder, e.train.seed);
  const DevScorer dev = make_dev_scorer(e.vocab, e.dev, e.encoder.pooling);
  const auto texts = encode_all(e.unlabeled, e.vocab, e.encoder.max_len);
  TrainResult r = train_unsupervised(texts, d.untrained, e.train, dev);
  d.dev_untrained = dev(d.untrained);
  d.dev_trained = r.best_dev;
  d.trained = r.best;
  return d;
}

Outcome collapse_mitigation() {
  Outcome o;
  const auto start = std::chrono::steady_clock::now();
  TrainedDesk d = train_desk(AugmentationSpec::shuffle(), AugmentationSpec::feature_cutoff());
  const Experiment& e = d.experiment;
  auto cosine_of = [&](const EncoderParams& p) {
    return similarity_histogram(encoder_embedder(p, e.vocab, e.encoder.pooling), e.dev, 10)
        .mean_pairwise_cosine;
  };
  const double before = cosine_of(d.untrained), after = cosine_of(d.trained);
  const double elapsed = seconds_since(start);
  require(o, after < before, "mean pairwise cosine did not decrease");
  require(o, d.dev_trained - d.dev_untrained >= 10.0, "dev gain below 10 points");
  require(o, elapsed < 600.0, fmt::format("runtime {:.0f}s", elapsed));
  note(o, fmt::format("{} steps: mean cosine {:.4f} -> {:.4f}; dev {:.2f} -> {:.2f} (+{:.2f}); {:.1f}s",
                      e.train.total_steps, before, after, d.dev_untrained, d.dev_trained,
                      d.dev_trained - d.dev_untrained, elapsed));
  return o;
}

Outcome none_none_effect() {
  Outcome o;
  TrainedDesk d = train_desk(AugmentationSpec::none(), AugmentationSpec::none());
  const double gain = d.dev_trained - d.dev_untrained;
  require(o, gain >= 3.0, "dev gain below 3 points");
  note(o, fmt::format("(none, none) dev {:.2f} -> {:.2f} (+{:.2f})", d.dev_untrained, d.dev_trained, gain));
  return o;
}

Experiment grid_experiment() {
  RunConfig cfg = testing::desk_config(20);
  cfg.synthetic.n_templates = 10;
  cfg.synthetic.n_per_template = 10;
  cfg.synthetic.n_dev_pairs = 60;
  cfg.synthetic.n_test_pairs = 60;
  cfg.encoder.d_model = 16;
  cfg.encoder.n_heads = 2;
  cfg.encoder.d_ff = 32;
  cfg.train.batch_size = 16;
  cfg.train.eval_every = 10;
  return testing::desk_experiment(cfg);
}

Outcome grid_protocol() {
  Outcome o;
  const Experiment e = grid_experiment();
  const auto strategies = grid_strategies();
  const std::vector<std::string> names{"none", "shuffle", "token_cutoff", "feature_cutoff", "dropout"};
  require(o, strategies.size() == names.size(), "strategy count");
  for (std::size_t i = 0; i < std::min(strategies.size(), names.size()); ++i)
    require(o, aug_kind_name(strategies[i].kind) == names[i], "strategy order at " + std::to_string(i));
  const GridResult a = augmentation_grid(e, strategies);
  const GridResult b = augmentation_grid(e, strategies);
  require(o, a.size() == 5 && a.cells.size() == 25, "matrix is not 5x5");
  bool same = a.cells.size() == b.cells.size();
  for (std::size_t c = 0; same && c < a.cells.size(); ++c)
    same = a.cells[c].dev == b.cells[c].dev && a.cells[c].test == b.cells[c].test;
  require(o, same, "grid not deterministic");
  bool complete = true;
  for (const auto& c : a.cells) complete = complete && std::isfinite(c.test.average) && c.total_steps > 0;
  require(o, complete, "incomplete cell");
  std::vector<AugmentationSpec> reversed(strategies.rbegin(), strategies.rend());
  bool rejected = false;
  try {
    augmentation_grid(e, reversed);
  } catch (const ContractError&) {
    rejected = true;
  }
  require(o, rejected, "wrong strategy order accepted");
  // the CLI writes the same matrix
  const fs::path dir = fs::temp_directory_path() / "consert_acceptance_grid";
  fs::remove_all(dir);
  std::ostringstream out, err;
  const int code = cli::run({"--out-dir", dir.string(), "--override", "train.total_steps=2",
                             "--override", "synthetic.templates=6", "--override", "synthetic.per_template=6",
                             "--override", "encoder.d_model=8", "--override", "encoder.d_ff=16",
                             "--override", "encoder.n_heads=2", "--override", "train.batch_size=8",
                             "analyze", "grid"},
                            out, err);
  std::size_t lines = 0;
  {
    std::istringstream csv(slurp(dir / "grid.csv"));
    for (std::string line; std::getline(csv, line);) ++lines;
  }
  require(o, code == 0 && lines == 6, "analyze grid CSV");
  fs::remove_all(dir);
  auto [bi, bj] = a.argmax();
  note(o, fmt::format("5x5 twice, identical; order {}; best cell {}", fmt::join(names, ","), a.at(bi, bj).label));
  return o;
}

Outcome few_shot() {
  Outcome o;
  const Experiment e = testing::desk_experiment(testing::desk_config());
  const auto points = few_shot_sweep(e, kFewShotSizes);
  require(o, points.size() == 5, "expected 5 sizes");
  if (points.size() != 5) return o;
  const double r1000 = points[3].cell.test.average, full = points[4].cell.test.average;
  require(o, points[3].used == 1000, "1000-sentence subset");
  require(o, points[4].used == e.unlabeled.size(), "full pool");
  require(o, std::fabs(r1000 - full) <= 2.0, "rho(1000) not within 2 points of rho(full)");
  std::vector<std::string> parts;
  for (const auto& p : points) parts.push_back(fmt::format("{}:{:.2f}", p.used, p.cell.test.average));
  note(o, fmt::format("test rho by size {}; |rho(1000) - rho(full)| = {:.2f}", fmt::join(parts, " "),
                      std::fabs(r1000 - full)));
  return o;
}

Outcome frequency_masking() {
  Outcome o;
  const Experiment e = testing::desk_experiment(testing::desk_config());
  const EncoderParams p = init_params(e.encoder, 11);
  const FrequencyTable table = FrequencyTable::from_pairs(e.test[0].merged(), e.vocab, e.encoder.max_len);
  const std::vector<std::size_t> ks{0, 4};
  const auto points = frequency_masked_eval(p, e.vocab, e.test, table, ks, e.encoder.pooling);
  const EvalReport standard = evaluate_sts(p, e.vocab, e.test, e.encoder.pooling);
  require(o, points[0].report == standard, "k=0 differs from standard evaluation");

  // Perturb the pooled-layer output rows of every masked token; the
  // representations must not move at all.
  const auto top = table.top_k_ids(e.vocab, 4);
  const std::unordered_set<std::int32_t> exclude(top.begin(), top.end());
  std::vector<EncodedSentence> sentences;
  for (const auto& pair : e.test[0].merged()) {
    sentences.push_back(tokenize(pair.sentence_a, e.vocab, e.encoder.max_len));
    sentences.push_back(tokenize(pair.sentence_b, e.vocab, e.encoder.max_len));
  }
  std::size_t perturbed_rows = 0, moved = 0, checked = 0;
  Rng rng(5);
  for (std::size_t start = 0; start < sentences.size(); start += 64) {
    const std::span<const EncodedSentence> chunk(sentences.data() + start,
                                                 std::min<std::size_t>(64, sentences.size() - start));
    std::vector<std::vector<float>> masks;
    for (const auto& s : chunk) masks.push_back(frequency_pool_mask(s, exclude));
    const Batch b = collate(chunk);
    std::vector<float> flat(b.size * b.length, 0.0f);
    for (std::size_t i = 0; i < chunk.size(); ++i)
      std::copy(masks[i].begin(), masks[i].end(), flat.begin() + i * b.length);
    const Tensor pool_mask = Tensor::from({b.size, b.length}, flat);
    const auto reference = embed_sentences(p, chunk, e.encoder.pooling, 64, &masks);
    for (Pooling pooling : {Pooling::kLastLayerMean, Pooling::kLastTwoLayersMean}) {
      Tape tape(GradMode::kDisabled);
      auto layers = encode(tape, p, embed(tape, p, b.token_ids, b.position_ids, b.size, b.length), b.mask);
      const Tensor clean = pool(tape, layers, pool_mask, pooling);
      for (Tensor& layer : layers) {
        Tensor noisy = Tensor::from(layer.shape(), {layer.data().begin(), layer.data().end()});
        auto d = noisy.mutable_data();
        for (std::size_t r = 0; r < b.size * b.length; ++r) {
          if (b.mask.data()[r] == 0.0f || flat[r] != 0.0f) continue;
          ++perturbed_rows;
          for (std::size_t j = 0; j < e.encoder.d_model; ++j) d[r * e.encoder.d_model + j] += rng.normal(0.0f, 10.0f);
        }
        layer = noisy;
      }
      const Tensor after = pool(tape, layers, pool_mask, pooling);
      ++checked;
      if (!std::equal(clean.data().begin(), clean.data().end(), after.data().begin())) ++moved;
      if (pooling == e.encoder.pooling) {
        for (std::size_t i = 0; i < chunk.size(); ++i)
          if (!std::equal(reference[i].begin(), reference[i].end(), after.data().begin() + i * e.encoder.d_model))
            ++moved;
      }
    }
  }
  require(o, perturbed_rows > 0, "no masked token found");
  require(o, moved == 0, fmt::format("{} representations moved", moved));
  note(o, fmt::format("k=0 report identical (avg {}); {} masked rows perturbed over {} batches, 0 changes; k=4 avg {:.2f}",
                      format_number(standard.average), perturbed_rows, checked, points[1].report.average));
  return o;
}

Outcome augmentation_contracts() {
  Outcome o;
  Rng rng(9);
  std::size_t shuffle_bad = 0, token_bad = 0, feature_bad = 0, dropout_bad = 0, fgv_bad = 0;
  double worst_dropout = 0.0, worst_fgv = 0.0;
  for (int c = 0; c < 1000; ++c) {
    const std::size_t real = 1 + rng.uniform_index(30), pad = rng.uniform_index(5), len = real + pad;
    const std::size_t width = 1 + rng.uniform_index(40);
    EncodedSentence s;
    for (std::size_t i = 0; i < len; ++i) {
      s.token_ids.push_back(i < real ? static_cast<std::int32_t>(4 + rng.uniform_index(50)) : 0);
      s.position_ids.push_back(static_cast<std::int32_t>(i));
      s.attention_mask.push_back(i < real ? 1.0f : 0.0f);
    }
    const View v = make_view(s, AugmentationSpec::shuffle(), width, rng);
    auto a = s.position_ids, b = v.position_ids;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    bool pads_fixed = true;
    for (std::size_t i = real; i < len; ++i) pads_fixed = pads_fixed && v.position_ids[i] == s.position_ids[i];
    if (a != b || v.token_ids != s.token_ids || !pads_fixed) ++shuffle_bad;

    std::vector<float> e(len * width);
    for (float& x : e) x = 1.0f + std::fabs(rng.normal(0.0f, 1.0f));
    const float ratio = static_cast<float>(rng.uniform());
    const auto tc = token_cutoff(e, width, s.attention_mask, ratio, rng);
    std::size_t zero_rows = 0;
    bool rest_same = true;
    for (std::size_t r = 0; r < len; ++r) {
      const bool zero = std::all_of(tc.begin() + r * width, tc.begin() + (r + 1) * width, [](float x) { return x == 0.0f; });
      const bool same = std::equal(tc.begin() + r * width, tc.begin() + (r + 1) * width, e.begin() + r * width);
      if (zero && s.attention_mask[r] == 1.0f) ++zero_rows;
      else rest_same = rest_same && same;
    }
    if (zero_rows != static_cast<std::size_t>(std::floor(static_cast<double>(ratio) * real)) || !rest_same) ++token_bad;

    const auto fc = feature_cutoff(e, width, ratio, rng);
    std::size_t zero_cols = 0;
    bool cols_ok = true;
    for (std::size_t j = 0; j < width; ++j) {
      bool zero = true, same = true;
      for (std::size_t r = 0; r < len; ++r) {
        zero = zero && fc[r * width + j] == 0.0f;
        same = same && fc[r * width + j] == e[r * width + j];
      }
      if (zero) ++zero_cols;
      else cols_ok = cols_ok && same;
    }
    if (zero_cols != static_cast<std::size_t>(std::floor(static_cast<double>(ratio) * width)) || !cols_ok) ++feature_bad;

    const float p = static_cast<float>(0.05 + 0.9 * rng.uniform());
    const auto keep = dropout_keep(1000000, p, rng);
    const double frac = static_cast<double>(std::count(keep.begin(), keep.end(), 0.0f)) / 1e6;
    worst_dropout = std::max(worst_dropout, std::fabs(frac - p));
    if (std::fabs(frac - p) > 0.002) ++dropout_bad;

    std::vector<float> grad(len * width);
    for (float& g : grad) g = rng.normal(0.0f, static_cast<float>(std::exp(rng.uniform() * 6.0 - 3.0)));
    const float eps = static_cast<float>(0.01 + 2.0 * rng.uniform());
    const auto moved = fgv_perturbation(e, grad, eps, AugmentRegime::kJoint);
    long double norm = 0.0L;
    for (std::size_t i = 0; i < e.size(); ++i) {
      const long double d = static_cast<long double>(moved[i]) - e[i];
      norm += d * d;
    }
    const double rel = std::fabs(static_cast<double>(std::sqrt(norm)) - eps) / eps;
    worst_fgv = std::max(worst_fgv, rel);
    if (rel > 1e-4) ++fgv_bad;
  }
  require(o, shuffle_bad == 0, fmt::format("shuffle {} cases", shuffle_bad));
  require(o, token_bad == 0, fmt::format("token cutoff {} cases", token_bad));
  require(o, feature_bad == 0, fmt::format("feature cutoff {} cases", feature_bad));
  require(o, dropout_bad == 0, fmt::format("dropout {} cases", dropout_bad));
  require(o, fgv_bad == 0, fmt::format("fgv {} cases", fgv_bad));
  note(o, fmt::format("1000 cases each; dropout max |frac - p| {:.1e}; fgv max rel norm err {:.1e}",
                      worst_dropout, worst_fgv));
  return o;
}

Outcome determinism_and_persistence() {
  Outcome o;
  const fs::path root = fs::temp_directory_path() / "consert_acceptance_det";
  fs::remove_all(root);
  fs::create_directories(root);
  {
    std::ofstream cfg(root / "run.ini");
    cfg << "[synthetic]\ntemplates = 10\nper_template = 12\ndev_pairs = 60\ntest_pairs = 60\n"
           "[encoder]\nmax_len = 24\nd_model = 16\nn_layers = 2\nn_heads = 2\nd_ff = 32\n"
           "[train]\nbatch_size = 16\ntotal_steps = 40\neval_every = 10\n";
  }
  auto run = [&](const std::string& out, const std::vector<std::string>& extra) {
    std::vector<std::string> args{"--config", (root / "run.ini").string(), "--out-dir", (root / out).string()};
    args.insert(args.end(), extra.begin(), extra.end());
    std::ostringstream so, se;
    return cli::run(args, so, se);
  };
  for (const std::string dir : {"a", "b"}) {
    require(o, run(dir, {"train"}) == 0, "train " + dir);
    require(o, run(dir, {"eval", "--checkpoint", (root / dir / "checkpoints" / "best.ckpt").string()}) == 0, "eval " + dir);
  }
  for (const char* f : {"metrics.tsv", "test_report.tsv", "eval_report.tsv"})
    require(o, slurp(root / "a" / f) == slurp(root / "b" / f) && !slurp(root / "a" / f).empty(),
            std::string(f) + " differs");
  require(o, slurp(root / "a" / "checkpoints" / "best.ckpt") == slurp(root / "b" / "checkpoints" / "best.ckpt"),
          "checkpoint bytes differ");

  // in-memory best vs the reloaded file
  RunConfig cfg = load_run_config(root / "a" / "train.config.ini");
  const RunData data = load_run_data(cfg);
  const Vocab vocab = build_training_vocab(data, cfg.data.min_count);
  const Experiment e = make_experiment(cfg, data, vocab);
  const auto texts = encode_all(e.unlabeled, e.vocab, e.encoder.max_len);
  const TrainResult trained = train_unsupervised(texts, init_params(e.encoder, e.train.seed), e.train,
                                                 make_dev_scorer(e.vocab, e.dev, e.encoder.pooling));
  const fs::path ck = root / "roundtrip.ckpt";
  save_checkpoint({trained.best, e.vocab}, ck);
  const Checkpoint back = load_checkpoint(ck);
  require(o, back.params.identical_to(trained.best), "reloaded parameters differ");
  require(o, back.vocab == e.vocab, "reloaded vocabulary differs");
  require(o, evaluate_sts(back.params, back.vocab, e.test, e.encoder.pooling) ==
                 evaluate_sts(trained.best, e.vocab, e.test, e.encoder.pooling),
          "evaluation after reload differs");
  std::vector<EncodedSentence> sentences;
  for (const auto& pr : e.dev) sentences.push_back(tokenize(pr.sentence_a, e.vocab, e.encoder.max_len));
  const auto before = embed_sentences(trained.best, sentences, e.encoder.pooling);
  const auto after = embed_sentences(back.params, sentences, e.encoder.pooling);
  require(o, before == after, "embeddings after reload differ");
  require(o, slurp(ck) == slurp(root / "a" / "checkpoints" / "best.ckpt"), "library and CLI checkpoints differ");
  note(o, "two CLI train+eval runs byte-identical (metrics, reports, checkpoint); reload gives identical params, "
          "embeddings and report");
  fs::remove_all(root);
  return o;
}

Outcome batch_size_bookkeeping() {
  Outcome o;
  RunConfig cfg = testing::desk_config();
  cfg.encoder.d_model = 8;
  cfg.encoder.n_heads = 2;
  cfg.encoder.d_ff = 16;
  cfg.train.eval_every = 1000;
  const Experiment e = testing::desk_experiment(cfg);
  const std::size_t pool = e.unlabeled.size();
  const auto points = batch_size_sweep(e, kBatchSizes, 0.25);
  require(o, points.size() == kBatchSizes.size(), "point count");
  std::vector<std::string> parts;
  for (const auto& p : points) {
    const double ideal = static_cast<double>(pool) / static_cast<double>(p.batch_size);
    require(o, std::fabs(static_cast<double>(p.steps_per_epoch) - ideal) <= 1.0,
            fmt::format("N={} steps/epoch {}", p.batch_size, p.steps_per_epoch));
    require(o, p.cell.total_steps == p.total_steps, fmt::format("N={} trained {} steps", p.batch_size, p.cell.total_steps));
    parts.push_back(fmt::format("{}:{}", p.batch_size, p.steps_per_epoch));
  }
  for (std::size_t i = 1; i < points.size(); ++i) {
    const double product_ratio = static_cast<double>(points[i].steps_per_epoch * points[i].batch_size) /
                                 static_cast<double>(points[0].steps_per_epoch * points[0].batch_size);
    require(o, std::fabs(product_ratio - 1.0) < 0.2, "steps x batch not constant");
  }
  note(o, fmt::format("pool {}; N:steps/epoch {}", pool, fmt::join(parts, " ")));
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  set_warning_sink([](std::string_view) {});
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient suite", gradient_suite},
      {"nt-xent closed forms", nt_xent_closed_forms},
      {"spearman oracle", spearman_oracle},
      {"collapse mitigation", collapse_mitigation},
      {"none-none effect", none_none_effect},
      {"grid protocol", grid_protocol},
      {"few-shot", few_shot},
      {"frequency-mask identity", frequency_masking},
      {"augmentation contracts", augmentation_contracts},
      {"determinism and persistence", determinism_and_persistence},
      {"batch-size bookkeeping", batch_size_bookkeeping},
  };
  std::unordered_set<std::size_t> only;
  for (int i = 1; i < argc; ++i) only.insert(static_cast<std::size_t>(std::stoul(argv[i])));
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!only.empty() && !only.contains(i + 1)) continue;
    Outcome outcome;
    const auto start = std::chrono::steady_clock::now();
    try {
      outcome = criteria[i].second();
    } catch (const std::exception& e) {
      outcome = {false, std::string("exception: ") + e.what()};
    }
    if (!outcome.pass) ++failures;
    std::cout << fmt::format("criterion {:>2} {:<28} {} ({:.1f}s) {}", i + 1, criteria[i].first,
                             outcome.pass ? "PASS" : "FAIL", seconds_since(start), outcome.detail)
              << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
