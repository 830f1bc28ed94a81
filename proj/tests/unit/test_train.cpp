#include <algorithm>
#include <cmath>
#include <sstream>

#include <gtest/gtest.h>

#include "consert/errors.hpp"
#include "consert/eval.hpp"
#include "consert/train.hpp"

namespace consert {
namespace {

TrainConfig base_config(std::size_t steps) {
  TrainConfig c;
  c.total_steps = steps;
  c.batch_size = 16;
  c.eval_every = std::max<std::size_t>(1, steps / 5);
  c.seed = 5;
  return c;
}

TEST(LrScheduleTest, Examples) {
  TrainConfig c = base_config(1000);
  c.lr = 2e-3;
  EXPECT_EQ(lr_at(0, c), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(50, c), 1e-3);
  EXPECT_EQ(lr_at(100, c), 2e-3);
  EXPECT_EQ(lr_at(1000, c), 2e-3);
  EXPECT_THROW(lr_at(1001, c), ContractError);
}

TEST(LrScheduleTest, WarmupRoundsUp) {
  TrainConfig c = base_config(15);
  c.lr = 1.0;
  EXPECT_DOUBLE_EQ(lr_at(1, c), 0.5);  // ceil(1.5) = 2 warmup steps
  EXPECT_EQ(lr_at(2, c), 1.0);
  c.warmup_fraction = 0.0;
  EXPECT_EQ(lr_at(0, c), 1.0);
}

TEST(AdamTest, ZeroGradientLeavesParams) {
  Tensor w = Tensor::from({3}, {1, -2, 3}, true);
  NamedParams p{{"w", w}};
  AdamState s;
  for (int i = 0; i < 5; ++i) adam_step(p, s, 0.1);
  EXPECT_EQ(std::vector<float>(w.data().begin(), w.data().end()), (std::vector<float>{1, -2, 3}));
}

TEST(AdamTest, ClosedFormSteps) {
  // constant g: m_hat = v_hat^(1/2) = g, so each step moves lr * g / (|g| + eps)
  Tensor w = Tensor::scalar(0.5f, true);
  NamedParams p{{"w", w}};
  AdamState s;
  const double lr = 1e-2;
  double expected = 0.5;
  for (int t = 1; t <= 3; ++t) {
    w.grad()[0] = 1.0f;
    adam_step(p, s, lr);
    expected -= lr * 1.0 / (1.0 + 1e-8);
    EXPECT_NEAR(w.item(), expected, 1e-6);
  }
}

TEST(AdamTest, NonFiniteGradientNamesParameter) {
  Tensor a = Tensor::scalar(1.0f, true), b = Tensor::scalar(1.0f, true);
  a.grad()[0] = 1.0f;
  b.grad()[0] = std::nanf("");
  NamedParams p{{"alpha", a}, {"beta", b}};
  AdamState s;
  try {
    adam_step(p, s, 0.1);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("beta"), std::string::npos);
  }
  EXPECT_EQ(a.item(), 1.0f);
}

TEST(TrainConfigTest, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  for (auto bad : std::vector<std::function<void(TrainConfig&)>>{
           [](TrainConfig& t) { t.batch_size = 1; }, [](TrainConfig& t) { t.temperature = 0; },
           [](TrainConfig& t) { t.alpha = -1; }, [](TrainConfig& t) { t.lr = 0; },
           [](TrainConfig& t) { t.warmup_fraction = 1.0; }, [](TrainConfig& t) { t.total_steps = 0; },
           [](TrainConfig& t) { t.eval_every = 0; }}) {
    TrainConfig t;
    bad(t);
    EXPECT_THROW(t.validate(), ConfigError);
  }
  c.aug1 = AugmentationSpec::adversarial();
  EXPECT_THROW(c.validate(), RegimeError);
  c.regime = Regime::kJointUnsup;
  EXPECT_THROW(c.validate(), RegimeError);
  c.regime = Regime::kJoint;
  EXPECT_NO_THROW(c.validate());
}

TEST(RegimeTest, Names) {
  for (Regime r : {Regime::kUnsup, Regime::kJoint, Regime::kSupUnsup, Regime::kJointUnsup})
    EXPECT_EQ(parse_regime(regime_name(r)), r);
  EXPECT_THROW(parse_regime("supervised"), ConfigError);
}

TEST(SamplerTest, EpochCoversEveryIndexOnce) {
  EpochSampler s(10, 3, "t");
  std::vector<std::size_t> seen;
  for (int i = 0; i < 3; ++i) {
    auto b = s.next(4);
    seen.insert(seen.end(), b.begin(), b.end());
  }
  // 4 + 4 + partial 2
  ASSERT_EQ(seen.size(), 10u);
  std::sort(seen.begin(), seen.end());
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(seen[i], i);
  s.next(4);
  EXPECT_EQ(s.epoch(), 1u);
}

std::vector<std::string> captured;
void capture(std::string_view m) { captured.emplace_back(m); }

TEST(SamplerTest, OversizedBatchWarnsAndDedupes) {
  captured.clear();
  auto old = set_warning_sink(capture);
  EpochSampler s(3, 1, "t");
  auto b = s.next(8);
  s.next(8);
  set_warning_sink(old);
  EXPECT_EQ(captured.size(), 1u);
  std::vector<std::size_t> sorted = b;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(std::adjacent_find(sorted.begin(), sorted.end()), sorted.end());
  EXPECT_LE(b.size(), 3u);
}

struct Fixture {
  SyntheticCorpus corpus;
  Vocab vocab;
  EncoderParams init;
  std::vector<EncodedSentence> texts;
  std::vector<EncodedNli> nli;
  DevScorer dev;

  Fixture() {
    SyntheticOptions o;
    o.n_templates = 12;
    o.n_per_template = 20;
    o.n_dev_pairs = 120;
    o.n_test_pairs = 60;
    o.n_nli = 200;
    corpus = make_synthetic_corpus(3, o);
    std::vector<std::string> all = corpus.unlabeled;
    for (const auto& ex : corpus.nli) {
      all.push_back(ex.premise);
      all.push_back(ex.hypothesis);
    }
    vocab = build_vocab(all);
    EncoderConfig e;
    e.vocab_size = vocab.size();
    e.max_len = 24;
    e.d_model = 16;
    e.n_layers = 1;
    e.n_heads = 2;
    e.d_ff = 32;
    e.pooling = Pooling::kLastLayerMean;
    init = init_params(e, 11);
    texts = encode_all(corpus.unlabeled, vocab, e.max_len);
    nli = encode_all(corpus.nli, vocab, e.max_len);
    dev = make_dev_scorer(vocab, corpus.dev, Pooling::kLastLayerMean);
  }
};

const Fixture& fixture() {
  static Fixture f;
  return f;
}

double median(std::vector<float> v) {
  std::sort(v.begin(), v.end());
  return v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
}

void expect_loss_decreases(const TrainResult& r, const std::string& phase) {
  std::vector<float> losses;
  for (const auto& s : r.steps)
    if (s.phase == phase) losses.push_back(s.loss);
  ASSERT_GE(losses.size(), 10u);
  const std::size_t tenth = losses.size() / 10;
  std::vector<float> head(losses.begin(), losses.begin() + tenth), tail(losses.end() - tenth, losses.end());
  EXPECT_LT(median(tail), median(head)) << phase;
}

TEST(TrainTest, HistoryLengthAndBestContract) {
  const Fixture& f = fixture();
  TrainConfig c = base_config(30);
  c.eval_every = 7;
  TrainResult r = train_unsupervised(f.texts, f.init, c, f.dev);
  EXPECT_EQ(r.history.size(), 30u / 7u + 1u);
  EXPECT_EQ(r.steps.size(), 30u);
  double best = -1e9;
  for (const auto& e : r.history) best = std::max(best, e.dev);
  EXPECT_EQ(r.best_dev, best);
  EXPECT_EQ(f.dev(r.best), best);
  EXPECT_EQ(r.history.front().step, 0u);
}

TEST(TrainTest, Deterministic) {
  const Fixture& f = fixture();
  TrainConfig c = base_config(12);
  TrainResult a = train_unsupervised(f.texts, f.init, c, f.dev);
  TrainResult b = train_unsupervised(f.texts, f.init, c, f.dev);
  std::ostringstream ma, mb;
  write_metrics_tsv(ma, a);
  write_metrics_tsv(mb, b);
  EXPECT_EQ(ma.str(), mb.str());
  auto pa = a.best.named(), pb = b.best.named();
  for (std::size_t i = 0; i < pa.size(); ++i)
    EXPECT_TRUE(std::equal(pa[i].second.data().begin(), pa[i].second.data().end(),
                           pb[i].second.data().begin()));
}

TEST(TrainTest, SingleSentenceHasZeroLoss) {
  const Fixture& f = fixture();
  captured.clear();
  auto old = set_warning_sink(capture);
  TrainConfig c = base_config(4);
  std::vector<EncodedSentence> one{f.texts[0]};
  TrainResult r = train_unsupervised(one, f.init, c, f.dev);
  set_warning_sink(old);
  EXPECT_FALSE(captured.empty());
  for (const auto& s : r.steps) EXPECT_EQ(s.loss, 0.0f);
}

TEST(TrainTest, UnsupImprovesDev) {
  const Fixture& f = fixture();
  TrainConfig c = base_config(500);
  c.eval_every = 100;
  c.aug1 = AugmentationSpec::shuffle();
  c.aug2 = AugmentationSpec::feature_cutoff();
  TrainResult r = train_unsupervised(f.texts, f.init, c, f.dev);
  std::cout << "dev step0 " << r.history.front().dev << " best " << r.best_dev << "\n";
  EXPECT_GT(r.best_dev, r.history.front().dev);
  expect_loss_decreases(r, "unsup");
}

TEST(TrainTest, JointWithZeroAlphaMatchesSupervised) {
  const Fixture& f = fixture();
  TrainConfig c = base_config(10);
  c.regime = Regime::kJoint;
  c.alpha = 0.0f;
  TrainResult joint = train_regime(f.nli, {}, f.init, c, f.dev);
  c.regime = Regime::kSupUnsup;
  TrainResult sup = train_regime(f.nli, f.texts, f.init, c, f.dev);
  for (std::size_t i = 0; i < 10; ++i) {
    EXPECT_EQ(joint.steps[i].loss, sup.steps[i].loss);
    EXPECT_EQ(sup.steps[i].phase, "sup");
  }
}

TEST(TrainTest, SupUnsupHandsOverBestCheckpoint) {
  const Fixture& f = fixture();
  std::vector<EncoderParams> seen;
  DevScorer recording = [&](const EncoderParams& p) {
    seen.push_back(p.clone());
    return f.dev(p);
  };
  TrainConfig c = base_config(10);
  c.eval_every = 2;
  c.regime = Regime::kSupUnsup;
  TrainResult r = train_regime(f.nli, f.texts, f.init, c, recording);
  ASSERT_EQ(r.phases.size(), 2u);
  const std::size_t phase1_evals = 10 / 2 + 1;
  const std::size_t best = r.phases[0].best_step / 2;
  auto a = seen[best].named(), b = seen[phase1_evals].named();
  for (std::size_t i = 0; i < a.size(); ++i)
    EXPECT_TRUE(std::equal(a[i].second.data().begin(), a[i].second.data().end(),
                           b[i].second.data().begin()))
        << a[i].first;
  EXPECT_EQ(r.history[phase1_evals].dev, r.phases[0].best_dev);
}

TEST(TrainTest, RegimesNeedTheirData) {
  const Fixture& f = fixture();
  TrainConfig c = base_config(2);
  c.regime = Regime::kJoint;
  EXPECT_THROW(train_regime({}, f.texts, f.init, c, f.dev), DataError);
  c.regime = Regime::kSupUnsup;
  EXPECT_THROW(train_regime(f.nli, {}, f.init, c, f.dev), DataError);
  c.regime = Regime::kUnsup;
  EXPECT_THROW(train_regime(f.nli, {}, f.init, c, f.dev), DataError);
}

TEST(TrainTest, AdversarialJointRuns) {
  const Fixture& f = fixture();
  TrainConfig c = base_config(6);
  c.regime = Regime::kJoint;
  c.aug1 = AugmentationSpec::adversarial(0.5f);
  TrainResult r = train_regime(f.nli, {}, f.init, c, f.dev);
  for (const auto& s : r.steps) EXPECT_TRUE(std::isfinite(s.loss));
}

class RegimeLossTest : public ::testing::TestWithParam<Regime> {};

TEST_P(RegimeLossTest, LossDecreases) {
  const Fixture& f = fixture();
  TrainConfig c = base_config(200);
  c.regime = GetParam();
  TrainResult r = train_regime(f.nli, f.texts, f.init, c, f.dev);
  for (const auto& p : r.phases) expect_loss_decreases(r, p.name);
}

INSTANTIATE_TEST_SUITE_P(AllRegimes, RegimeLossTest,
                         ::testing::Values(Regime::kUnsup, Regime::kJoint, Regime::kSupUnsup, Regime::kJointUnsup),
                         [](const auto& info) {
                           std::string n(regime_name(info.param));
                           std::replace(n.begin(), n.end(), '-', '_');
                           return n;
                         });

TEST(TrainTest, JointUnsupKeepsJointGains) {
  const Fixture& f = fixture();
  TrainConfig c = base_config(200);
  c.regime = Regime::kJointUnsup;
  TrainResult r = train_regime(f.nli, f.texts, f.init, c, f.dev);
  ASSERT_EQ(r.phases.size(), 2u);
  EXPECT_GE(r.best_dev, r.phases[0].best_dev - 0.5);
}

TEST(MetricsTest, TsvLayout) {
  TrainResult r;
  r.steps = {{"unsup", 1, 0.5f, 0.0f, 0.5f, 1e-3}, {"unsup", 2, 0.25f, 0.0f, 0.25f, 1e-3}};
  r.history = {{"unsup", 0, 10.0}, {"unsup", 2, 12.5}};
  std::ostringstream out;
  write_metrics_tsv(out, r);
  EXPECT_EQ(out.str(),
            "phase\tstep\tloss\tloss_ce\tloss_con\tlr\tdev_spearman\n"
            "unsup\t0\t\t\t\t\t10\n"
            "unsup\t1\t0.5\t0\t0.5\t0.001\t\n"
            "unsup\t2\t0.25\t0\t0.25\t0.001\t12.5\n");
}

}  // namespace
}  // namespace consert
