#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "consert/config.hpp"
#include "consert/errors.hpp"

namespace consert {
namespace {

RunConfig parse(const std::string& text) {
  std::istringstream in(text);
  return parse_run_config(in, "test.ini");
}

TEST(ConfigTest, DefaultsValidate) {
  RunConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.train.batch_size, 96u);
  EXPECT_EQ(c.train.temperature, 0.1f);
  EXPECT_EQ(c.train.alpha, 0.15f);
  EXPECT_EQ(c.train.eval_every, 200u);
  EXPECT_EQ(c.train.warmup_fraction, 0.10);
  EXPECT_EQ(c.train.lr, 1e-3);
  EXPECT_EQ(c.eval.pooling, Pooling::kLastTwoLayersMean);
  EXPECT_EQ(c.train.aug1, AugmentationSpec::shuffle());
  EXPECT_EQ(c.train.aug2, AugmentationSpec::feature_cutoff(0.2f));
}

TEST(ConfigTest, ParsesSectionsAndQuotes) {
  RunConfig c = parse(
      "# comment\n"
      "[run]\nseed = 7\n"
      "[train]\naug1 = \"token_cutoff:0.1\"\naug2 = 'dropout'\ntemperature = 0.05\nregime = joint\n"
      "[data]\nnli = synthetic\ntest = a.tsv, b.tsv\n"
      "[eval]\nk_values = 0,3,5\n");
  EXPECT_EQ(c.seed, 7u);
  EXPECT_EQ(c.train.seed, 7u);
  EXPECT_EQ(c.train.aug1, AugmentationSpec::token_cutoff(0.1f));
  EXPECT_EQ(c.train.aug2, AugmentationSpec::dropout(0.2f));
  EXPECT_EQ(c.train.temperature, 0.05f);
  EXPECT_EQ(c.train.regime, Regime::kJoint);
  EXPECT_EQ(c.data.test, (std::vector<std::string>{"a.tsv", "b.tsv"}));
  EXPECT_EQ(c.eval.k_values, (std::vector<std::size_t>{0, 3, 5}));
  EXPECT_NO_THROW(c.validate());
}

TEST(ConfigTest, RejectsUnknownKeysAndSections) {
  try {
    parse("[train]\nbatchsize = 3\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("train.batchsize"), std::string::npos);
  }
  try {
    parse("[optimizer]\nlr = 3\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("[optimizer]"), std::string::npos);
  }
  EXPECT_THROW(parse("seed = 3\n"), ConfigError);
}

TEST(ConfigTest, RejectsBadValues) {
  EXPECT_THROW(parse("[train]\nbatch_size = many\n"), ConfigError);
  EXPECT_THROW(parse("[train]\nbatch_size = -3\n"), ConfigError);
  EXPECT_THROW(parse("[train]\nregime = semi\n"), ConfigError);
  EXPECT_THROW(parse("[eval]\npooling = cls\n"), ConfigError);
  EXPECT_THROW(parse("[train]\naug1 = mixup\n"), ConfigError);
}

TEST(ConfigTest, ValidationNamesTheField) {
  auto message = [](RunConfig c) {
    try {
      c.validate();
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  RunConfig c;
  c.train.regime = Regime::kJoint;
  EXPECT_NE(message(c).find("data.nli"), std::string::npos);
  c = RunConfig{};
  c.train.warmup_fraction = 1.5;
  EXPECT_NE(message(c).find("warmup_fraction"), std::string::npos);
  c = RunConfig{};
  c.encoder.n_heads = 3;
  EXPECT_FALSE(message(c).empty());
  c = RunConfig{};
  c.train.aug1 = AugmentationSpec::adversarial();
  EXPECT_THROW(c.validate(), RegimeError);
}

TEST(ConfigTest, OverridesApplyInOrder) {
  RunConfig c;
  apply_override(c, "train.lr=0.01");
  apply_override(c, "train.lr = 0.02");
  apply_override(c, "data.test=x.tsv,y.tsv");
  EXPECT_EQ(c.train.lr, 0.02);
  EXPECT_EQ(c.data.test.size(), 2u);
  EXPECT_THROW(apply_override(c, "train.lr"), ConfigError);
  EXPECT_THROW(apply_override(c, "train.nope=1"), ConfigError);
}

TEST(ConfigTest, SnapshotRoundTrips) {
  RunConfig c;
  apply_override(c, "run.seed=9");
  apply_override(c, "train.aug2=dropout:0.3");
  apply_override(c, "analyze.temperatures=0.1,1");
  apply_override(c, "data.test=a.tsv,b.tsv");
  std::ostringstream first;
  write_run_config(first, c);
  RunConfig back = parse(first.str());
  std::ostringstream second;
  write_run_config(second, back);
  EXPECT_EQ(first.str(), second.str());
  EXPECT_EQ(back.train.aug2, AugmentationSpec::dropout(0.3f));
  for (const std::string& key : config_keys())
    EXPECT_NE(first.str().find(key.substr(key.find('.') + 1) + " = "), std::string::npos) << key;
}

TEST(ConfigTest, LoadFromFile) {
  const auto path = std::filesystem::temp_directory_path() / "consert_config_test.ini";
  {
    std::ofstream out(path);
    out << "[encoder]\nd_model = 48\n";
  }
  EXPECT_EQ(load_run_config(path).encoder.d_model, 48u);
  std::filesystem::remove(path);
  EXPECT_THROW(load_run_config(path), ConfigError);
}

TEST(ConfigTest, ShippedConfigsValidate) {
  for (const char* name : {"default.ini", "joint.ini"}) {
    RunConfig c = load_run_config(std::filesystem::path(CONSERT_CONFIG_DIR) / name);
    EXPECT_NO_THROW(c.validate()) << name;
    EXPECT_EQ(c.encoder.d_model, 32u) << name;
  }
}

TEST(RunDataTest, SyntheticPathsAndVocab) {
  RunConfig c;
  c.synthetic.n_templates = 6;
  c.synthetic.n_per_template = 5;
  c.synthetic.n_dev_pairs = 20;
  c.synthetic.n_test_pairs = 30;
  c.data.nli = "synthetic";
  RunData d = load_run_data(c);
  EXPECT_EQ(d.unlabeled.size(), 30u);
  EXPECT_EQ(d.dev.size(), 20u);
  ASSERT_EQ(d.test.size(), 1u);
  EXPECT_EQ(d.test[0].name, "synthetic");
  EXPECT_FALSE(d.nli.empty());
  Vocab v = build_training_vocab(d, 1);
  for (const auto& ex : d.nli) EXPECT_NE(tokenize(ex.premise, v, 64).token_ids[1], Vocab::kUnk);
  Experiment e = make_experiment(c, d, v);
  EXPECT_EQ(e.encoder.vocab_size, v.size());
  EXPECT_EQ(e.encoder.pooling, c.eval.pooling);
}

TEST(RunDataTest, FilePathsUseStemAsName) {
  RunConfig c;
  c.data.unlabeled = CONSERT_FIXTURE_DIR "/unlabeled_small.txt";
  c.data.dev = CONSERT_FIXTURE_DIR "/sts_small.tsv";
  c.data.test = {CONSERT_FIXTURE_DIR "/sts_small.tsv"};
  RunData d = load_run_data(c);
  EXPECT_EQ(d.unlabeled.size(), 3u);
  EXPECT_EQ(d.test[0].name, "sts_small");
  c.data.dev = CONSERT_FIXTURE_DIR "/sts_bad.tsv";
  EXPECT_THROW(load_run_data(c), DataError);
}

}  // namespace
}  // namespace consert
