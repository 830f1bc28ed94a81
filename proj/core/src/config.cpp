#include "consert/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "consert/errors.hpp"

namespace consert {
namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(first, last - first + 1));
}

std::string unquote(std::string s) {
  s = trim(s);
  if (s.size() >= 2 && (s.front() == '"' || s.front() == '\'') && s.back() == s.front())
    return s.substr(1, s.size() - 2);
  return s;
}

template <typename T>
T parse_number(const std::string& key, const std::string& text, const char* expected) {
  T value{};
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (text.empty() || ec != std::errc() || ptr != end) {
    throw ConfigError(key + ": expected " + expected + ", got '" + text + "'");
  }
  return value;
}

std::size_t parse_size(const std::string& key, const std::string& text) {
  return parse_number<std::size_t>(key, text, "a non-negative integer");
}

double parse_real(const std::string& key, const std::string& text) {
  return parse_number<double>(key, text, "a number");
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(text);
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <typename T, typename F>
std::string join(const std::vector<T>& values, F&& format) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ',';
    out += format(values[i]);
  }
  return out;
}

struct Field {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename Getter>
Field size_member(const std::string& key, Getter member) {
  return {key,
          [key, member](RunConfig& c, const std::string& v) { member(c) = parse_size(key, v); },
          [member](const RunConfig& c) {
            return std::to_string(member(const_cast<RunConfig&>(c)));
          }};
}

template <typename Getter>
Field string_member(const std::string& key, Getter member) {
  return {key, [member](RunConfig& c, const std::string& v) { member(c) = v; },
          [member](const RunConfig& c) { return member(const_cast<RunConfig&>(c)); }};
}

template <typename Getter>
Field size_list_member(const std::string& key, Getter member) {
  return {key,
          [key, member](RunConfig& c, const std::string& v) {
            std::vector<std::size_t> values;
            for (const std::string& item : split_list(v)) values.push_back(parse_size(key, item));
            member(c) = std::move(values);
          },
          [member](const RunConfig& c) {
            return join(member(const_cast<RunConfig&>(c)),
                        [](std::size_t x) { return std::to_string(x); });
          }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back({"run.seed",
                 [](RunConfig& c, const std::string& v) {
                   c.seed = parse_number<std::uint64_t>("run.seed", v, "a non-negative integer");
                   c.train.seed = c.seed;
                 },
                 [](const RunConfig& c) { return std::to_string(c.seed); }});
    f.push_back(string_member("run.out_dir", [](RunConfig& c) -> std::string& { return c.out_dir; }));

    f.push_back(string_member("data.unlabeled",
                              [](RunConfig& c) -> std::string& { return c.data.unlabeled; }));
    f.push_back(string_member("data.nli", [](RunConfig& c) -> std::string& { return c.data.nli; }));
    f.push_back(string_member("data.dev", [](RunConfig& c) -> std::string& { return c.data.dev; }));
    f.push_back({"data.test",
                 [](RunConfig& c, const std::string& v) { c.data.test = split_list(v); },
                 [](const RunConfig& c) {
                   return join(c.data.test, [](const std::string& s) { return s; });
                 }});
    f.push_back(string_member("data.freq_table",
                              [](RunConfig& c) -> std::string& { return c.data.freq_table; }));
    f.push_back(size_member("data.min_count",
                            [](RunConfig& c) -> std::size_t& { return c.data.min_count; }));

    f.push_back(size_member("synthetic.templates",
                            [](RunConfig& c) -> std::size_t& { return c.synthetic.n_templates; }));
    f.push_back(size_member("synthetic.per_template", [](RunConfig& c) -> std::size_t& {
      return c.synthetic.n_per_template;
    }));
    f.push_back(size_member("synthetic.dev_pairs",
                            [](RunConfig& c) -> std::size_t& { return c.synthetic.n_dev_pairs; }));
    f.push_back(size_member("synthetic.test_pairs",
                            [](RunConfig& c) -> std::size_t& { return c.synthetic.n_test_pairs; }));
    f.push_back(size_member("synthetic.nli_examples",
                            [](RunConfig& c) -> std::size_t& { return c.synthetic.n_nli; }));

    f.push_back(size_member("encoder.max_len",
                            [](RunConfig& c) -> std::size_t& { return c.encoder.max_len; }));
    f.push_back(size_member("encoder.d_model",
                            [](RunConfig& c) -> std::size_t& { return c.encoder.d_model; }));
    f.push_back(size_member("encoder.n_layers",
                            [](RunConfig& c) -> std::size_t& { return c.encoder.n_layers; }));
    f.push_back(size_member("encoder.n_heads",
                            [](RunConfig& c) -> std::size_t& { return c.encoder.n_heads; }));
    f.push_back(size_member("encoder.d_ff",
                            [](RunConfig& c) -> std::size_t& { return c.encoder.d_ff; }));

    f.push_back({"train.regime",
                 [](RunConfig& c, const std::string& v) { c.train.regime = parse_regime(v); },
                 [](const RunConfig& c) { return std::string(regime_name(c.train.regime)); }});
    f.push_back(size_member("train.batch_size",
                            [](RunConfig& c) -> std::size_t& { return c.train.batch_size; }));
    f.push_back({"train.temperature",
                 [](RunConfig& c, const std::string& v) {
                   c.train.temperature = static_cast<float>(parse_real("train.temperature", v));
                 },
                 [](const RunConfig& c) { return format_number(c.train.temperature); }});
    f.push_back({"train.alpha",
                 [](RunConfig& c, const std::string& v) {
                   c.train.alpha = static_cast<float>(parse_real("train.alpha", v));
                 },
                 [](const RunConfig& c) { return format_number(c.train.alpha); }});
    f.push_back({"train.lr",
                 [](RunConfig& c, const std::string& v) { c.train.lr = parse_real("train.lr", v); },
                 [](const RunConfig& c) { return format_number(c.train.lr); }});
    f.push_back({"train.warmup_fraction",
                 [](RunConfig& c, const std::string& v) {
                   c.train.warmup_fraction = parse_real("train.warmup_fraction", v);
                 },
                 [](const RunConfig& c) { return format_number(c.train.warmup_fraction); }});
    f.push_back(size_member("train.total_steps",
                            [](RunConfig& c) -> std::size_t& { return c.train.total_steps; }));
    f.push_back(size_member("train.eval_every",
                            [](RunConfig& c) -> std::size_t& { return c.train.eval_every; }));
    f.push_back({"train.aug1",
                 [](RunConfig& c, const std::string& v) { c.train.aug1 = AugmentationSpec::parse(v); },
                 [](const RunConfig& c) { return c.train.aug1.to_string(); }});
    f.push_back({"train.aug2",
                 [](RunConfig& c, const std::string& v) { c.train.aug2 = AugmentationSpec::parse(v); },
                 [](const RunConfig& c) { return c.train.aug2.to_string(); }});

    f.push_back({"eval.pooling",
                 [](RunConfig& c, const std::string& v) { c.eval.pooling = parse_pooling(v); },
                 [](const RunConfig& c) { return std::string(pooling_name(c.eval.pooling)); }});
    f.push_back(string_member("eval.checkpoint",
                              [](RunConfig& c) -> std::string& { return c.eval.checkpoint; }));
    f.push_back(size_member("eval.bins", [](RunConfig& c) -> std::size_t& { return c.eval.bins; }));
    f.push_back(size_member("eval.histogram_sentences", [](RunConfig& c) -> std::size_t& {
      return c.eval.histogram_sentences;
    }));
    f.push_back(size_list_member(
        "eval.k_values", [](RunConfig& c) -> std::vector<std::size_t>& { return c.eval.k_values; }));

    f.push_back(size_list_member("analyze.few_shot_sizes",
                                 [](RunConfig& c) -> std::vector<std::size_t>& {
                                   return c.analyze.few_shot_sizes;
                                 }));
    f.push_back({"analyze.temperatures",
                 [](RunConfig& c, const std::string& v) {
                   std::vector<float> taus;
                   for (const std::string& item : split_list(v))
                     taus.push_back(static_cast<float>(parse_real("analyze.temperatures", item)));
                   c.analyze.temperatures = std::move(taus);
                 },
                 [](const RunConfig& c) {
                   return join(c.analyze.temperatures, [](float x) { return format_number(x); });
                 }});
    f.push_back(size_list_member(
        "analyze.batch_sizes",
        [](RunConfig& c) -> std::vector<std::size_t>& { return c.analyze.batch_sizes; }));
    f.push_back({"analyze.epochs",
                 [](RunConfig& c, const std::string& v) {
                   c.analyze.epochs = parse_real("analyze.epochs", v);
                 },
                 [](const RunConfig& c) { return format_number(c.analyze.epochs); }});
    return f;
  }();
  return table;
}

const Field* find_field(const std::string& key) {
  for (const Field& f : fields())
    if (f.key == key) return &f;
  return nullptr;
}

std::vector<std::string> sections() {
  std::vector<std::string> out;
  for (const Field& f : fields()) {
    std::string s = f.key.substr(0, f.key.find('.'));
    if (std::find(out.begin(), out.end(), s) == out.end()) out.push_back(s);
  }
  return out;
}

}  // namespace

void set_config_value(RunConfig& config, const std::string& key, const std::string& value) {
  const Field* field = find_field(key);
  if (!field) throw ConfigError("unknown config key '" + key + "'");
  field->set(config, unquote(value));
}

void apply_override(RunConfig& config, std::string_view assignment) {
  const std::size_t eq = assignment.find('=');
  if (eq == std::string_view::npos) {
    throw ConfigError("override '" + std::string(assignment) + "' is not of the form section.key=value");
  }
  set_config_value(config, trim(assignment.substr(0, eq)), std::string(assignment.substr(eq + 1)));
}

RunConfig parse_run_config(std::istream& in, const std::string& source) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(source + ":" + std::to_string(e.line()) + ": " + e.message());
  }
  RunConfig config;
  for (const auto& [section, body] : tree) {
    if (body.empty()) {
      throw ConfigError(source + ": key '" + section + "' must be inside a [section]");
    }
    for (const auto& [key, value] : body) {
      const std::string full = section + "." + key;
      if (!find_field(full)) {
        const auto known = sections();
        const bool section_known = std::find(known.begin(), known.end(), section) != known.end();
        throw ConfigError(source + ": unknown " +
                          (section_known ? "key '" + full + "'" : "section [" + section + "]"));
      }
      set_config_value(config, full, value.data());
    }
  }
  return config;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  return parse_run_config(in, path.string());
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const Field& f : fields()) keys.push_back(f.key);
  return keys;
}

void write_run_config(std::ostream& out, const RunConfig& config) {
  std::string current;
  for (const Field& f : fields()) {
    const std::string section = f.key.substr(0, f.key.find('.'));
    if (section != current) {
      if (!current.empty()) out << '\n';
      out << '[' << section << "]\n";
      current = section;
    }
    out << f.key.substr(section.size() + 1) << " = " << f.get(config) << '\n';
  }
}

void RunConfig::validate() const {
  if (train.seed != seed) throw ConfigError("train seed must mirror run.seed");
  EncoderConfig enc = encoder;
  enc.vocab_size = std::max<std::size_t>(enc.vocab_size, 1);
  enc.pooling = eval.pooling;
  enc.validate();
  if (encoder.max_len < 3) throw ConfigError("encoder.max_len must be at least 3");
  train.validate();
  if (data.min_count == 0) throw ConfigError("data.min_count must be at least 1");
  if (regime_needs_nli(train.regime) && data.nli.empty()) {
    throw ConfigError("train.regime " + std::string(regime_name(train.regime)) +
                      " needs data.nli (a path or 'synthetic')");
  }
  if (regime_needs_unlabeled(train.regime) && data.unlabeled.empty()) {
    throw ConfigError("train.regime " + std::string(regime_name(train.regime)) +
                      " needs data.unlabeled");
  }
  if (data.dev.empty()) throw ConfigError("data.dev is required for checkpoint selection");
  if (data.test.empty()) throw ConfigError("data.test needs at least one dataset");
  if (synthetic.n_templates < 2) throw ConfigError("synthetic.templates must be at least 2");
  if (eval.bins < 2) throw ConfigError("eval.bins must be at least 2");
  if (analyze.few_shot_sizes.empty() ||
      std::find(analyze.few_shot_sizes.begin(), analyze.few_shot_sizes.end(), 0u) !=
          analyze.few_shot_sizes.end()) {
    throw ConfigError("analyze.few_shot_sizes must be a nonempty list of positive sizes");
  }
  if (analyze.temperatures.empty()) throw ConfigError("analyze.temperatures must be nonempty");
  for (float t : analyze.temperatures)
    if (!(t > 0.0f)) throw ConfigError("analyze.temperatures must all be positive");
  if (analyze.batch_sizes.empty()) throw ConfigError("analyze.batch_sizes must be nonempty");
  for (std::size_t n : analyze.batch_sizes)
    if (n < 2) throw ConfigError("analyze.batch_sizes must all be at least 2");
  if (!(analyze.epochs > 0.0)) throw ConfigError("analyze.epochs must be positive");
}

namespace {

constexpr std::string_view kSynthetic = "synthetic";

std::string dataset_name(const std::string& path) {
  return path == kSynthetic ? std::string(kSynthetic) : std::filesystem::path(path).stem().string();
}

}  // namespace

RunData load_run_data(const RunConfig& config) {
  const bool any_synthetic =
      config.data.unlabeled == kSynthetic || config.data.nli == kSynthetic ||
      config.data.dev == kSynthetic ||
      std::find(config.data.test.begin(), config.data.test.end(), kSynthetic) != config.data.test.end();
  SyntheticCorpus corpus;
  if (any_synthetic) corpus = make_synthetic_corpus(config.seed, config.synthetic);

  RunData data;
  if (config.data.unlabeled == kSynthetic) data.unlabeled = corpus.unlabeled;
  else if (!config.data.unlabeled.empty()) data.unlabeled = load_unlabeled(config.data.unlabeled);

  if (config.data.nli == kSynthetic) data.nli = corpus.nli;
  else if (!config.data.nli.empty())
    data.nli = require_clean(load_nli_tsv(config.data.nli), config.data.nli);

  if (config.data.dev == kSynthetic) data.dev = corpus.dev;
  else data.dev = require_clean(load_sts_tsv(config.data.dev), config.data.dev);

  for (const std::string& path : config.data.test) {
    StsDataset ds;
    ds.name = dataset_name(path);
    if (path == kSynthetic) ds.splits.push_back(corpus.test);
    else ds.splits.push_back(require_clean(load_sts_tsv(path), path));
    data.test.push_back(std::move(ds));
  }
  return data;
}

Vocab build_training_vocab(const RunData& data, std::size_t min_count) {
  std::vector<std::string> texts = data.unlabeled;
  for (const NliExample& ex : data.nli) {
    texts.push_back(ex.premise);
    texts.push_back(ex.hypothesis);
  }
  if (texts.empty()) throw DataError("no training texts to build a vocabulary from");
  return build_vocab(texts, min_count);
}

Experiment make_experiment(const RunConfig& config, const RunData& data, const Vocab& vocab) {
  Experiment e;
  e.encoder = config.encoder;
  e.encoder.vocab_size = vocab.size();
  e.encoder.pooling = config.eval.pooling;
  e.train = config.train;
  e.vocab = vocab;
  e.unlabeled = data.unlabeled;
  e.nli = data.nli;
  e.dev = data.dev;
  e.test = data.test;
  return e;
}

}  // namespace consert
