#include "consert/train.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <numeric>
#include <ostream>

#include "consert/errors.hpp"
#include "consert/rng.hpp"

namespace consert {

std::string_view regime_name(Regime regime) {
  switch (regime) {
    case Regime::kUnsup: return "unsup";
    case Regime::kJoint: return "joint";
    case Regime::kSupUnsup: return "sup-unsup";
    case Regime::kJointUnsup: return "joint-unsup";
  }
  return "unknown";
}

Regime parse_regime(std::string_view name) {
  if (name == "unsup") return Regime::kUnsup;
  if (name == "joint") return Regime::kJoint;
  if (name == "sup-unsup") return Regime::kSupUnsup;
  if (name == "joint-unsup") return Regime::kJointUnsup;
  throw ConfigError("unknown regime '" + std::string(name) +
                    "' (expected unsup, joint, sup-unsup or joint-unsup)");
}

bool regime_needs_nli(Regime regime) { return regime != Regime::kUnsup; }
bool regime_needs_unlabeled(Regime regime) { return regime != Regime::kJoint; }

void TrainConfig::validate() const {
  if (batch_size < 2) throw ConfigError("train.batch_size must be at least 2");
  if (!(temperature > 0.0f) || !std::isfinite(temperature))
    throw ConfigError("train.temperature must be positive");
  if (!(alpha >= 0.0f) || !std::isfinite(alpha)) throw ConfigError("train.alpha must be >= 0");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("train.lr must be positive");
  if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0))
    throw ConfigError("train.warmup_fraction must be in [0, 1)");
  if (total_steps == 0) throw ConfigError("train.total_steps must be positive");
  if (eval_every == 0) throw ConfigError("train.eval_every must be positive");
  // A purely contrastive phase has no supervised gradient to build FGV from.
  const bool contrastive_only_phase = regime != Regime::kJoint;
  const AugmentRegime aug_regime =
      contrastive_only_phase ? AugmentRegime::kUnsupervised : AugmentRegime::kJoint;
  aug1.validate(aug_regime);
  aug2.validate(aug_regime);
}

double lr_at(std::size_t step, const TrainConfig& config) {
  if (step > config.total_steps) {
    throw ContractError("lr_at: step " + std::to_string(step) + " beyond total_steps " +
                        std::to_string(config.total_steps));
  }
  const double warm =
      std::ceil(config.warmup_fraction * static_cast<double>(config.total_steps) - 1e-9);
  if (warm <= 0.0 || static_cast<double>(step) >= warm) return config.lr;
  return config.lr * static_cast<double>(step) / warm;
}

void adam_step(const NamedParams& params, AdamState& state, double lr, const AdamHyper& hyper) {
  if (state.m.empty()) {
    for (const auto& [name, p] : params) {
      state.m.emplace_back(p.numel(), 0.0f);
      state.v.emplace_back(p.numel(), 0.0f);
    }
  }
  if (state.m.size() != params.size()) {
    throw DimensionError("adam_step: state tracks " + std::to_string(state.m.size()) +
                         " parameters, got " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, p] = params[i];
    if (state.m[i].size() != p.numel()) {
      throw DimensionError("adam_step: moment buffers do not match parameter '" + name + "'");
    }
    if (!p.has_grad()) continue;
    for (float g : p.grad()) {
      if (!std::isfinite(g)) throw NumericError("adam_step: non-finite gradient in parameter '" + name + "'");
    }
  }

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(hyper.beta1, t);
  const double c2 = 1.0 - std::pow(hyper.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i].second;
    if (!p.has_grad()) continue;
    auto g = p.grad();
    auto w = p.mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j];
      m[j] = static_cast<float>(hyper.beta1 * m[j] + (1.0 - hyper.beta1) * gj);
      v[j] = static_cast<float>(hyper.beta2 * v[j] + (1.0 - hyper.beta2) * gj * gj);
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      w[j] = static_cast<float>(w[j] - lr * mhat / (std::sqrt(vhat) + hyper.eps));
    }
  }
}

std::vector<EncodedSentence> encode_all(std::span<const std::string> texts, const Vocab& vocab,
                                        std::size_t max_len) {
  std::vector<EncodedSentence> out;
  out.reserve(texts.size());
  for (const std::string& t : texts) out.push_back(tokenize(t, vocab, max_len));
  return out;
}

std::vector<EncodedNli> encode_all(std::span<const NliExample> examples, const Vocab& vocab,
                                   std::size_t max_len) {
  std::vector<EncodedNli> out;
  out.reserve(examples.size());
  for (const NliExample& ex : examples) {
    out.push_back({tokenize(ex.premise, vocab, max_len), tokenize(ex.hypothesis, vocab, max_len),
                   static_cast<std::int32_t>(ex.label)});
  }
  return out;
}

EpochSampler::EpochSampler(std::size_t dataset_size, std::uint64_t seed, std::string stream)
    : size_(dataset_size), seed_(seed), stream_(std::move(stream)) {
  if (size_ == 0) throw DataError("sampler: empty dataset");
  reshuffle();
}

void EpochSampler::reshuffle() {
  order_.resize(size_);
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  Rng rng = substream(seed_, stream_, epoch_);
  std::shuffle(order_.begin(), order_.end(), rng.engine());
  cursor_ = 0;
}

std::vector<std::size_t> EpochSampler::next(std::size_t batch_size) {
  if (batch_size > size_) {
    if (!warned_) {
      warn("batch of " + std::to_string(batch_size) + " exceeds the " + std::to_string(size_) +
           " available texts; sampling with replacement and dropping duplicates");
      warned_ = true;
    }
    Rng rng = substream(seed_, stream_ + ".replacement", draws_++);
    std::vector<std::size_t> picked;
    std::vector<bool> seen(size_, false);
    for (std::size_t i = 0; i < batch_size; ++i) {
      const std::size_t j = rng.uniform_index(size_);
      if (!seen[j]) {
        seen[j] = true;
        picked.push_back(j);
      }
    }
    return picked;
  }
  if (cursor_ == size_) {
    ++epoch_;
    reshuffle();
  }
  const std::size_t n = std::min(batch_size, size_ - cursor_);
  std::vector<std::size_t> picked(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                                  order_.begin() + static_cast<std::ptrdiff_t>(cursor_ + n));
  cursor_ += n;
  return picked;
}

namespace {

/// Pooled last-layer representations of a list of views. `deltas[i]`, when
/// non-null, is added to view i's embeddings (length_i x d values).
Tensor encode_views(Tape& tape, const EncoderParams& params, const std::vector<View>& views,
                    const std::vector<const float*>& deltas) {
  const std::size_t d = params.config.d_model;
  std::vector<EncodedSentence> plain;
  plain.reserve(views.size());
  bool any_keep = false, any_delta = false;
  for (std::size_t i = 0; i < views.size(); ++i) {
    plain.push_back({views[i].token_ids, views[i].position_ids, views[i].attention_mask});
    any_keep = any_keep || !views[i].keep.empty();
    any_delta = any_delta || (i < deltas.size() && deltas[i] != nullptr);
  }
  Batch batch = collate(plain);
  const std::size_t len = batch.length, rows = batch.size;
  Tensor e = embed(tape, params, batch.token_ids, batch.position_ids, rows, len);
  if (any_keep) {
    std::vector<float> keep(rows * len * d, 1.0f);
    for (std::size_t i = 0; i < rows; ++i)
      std::copy(views[i].keep.begin(), views[i].keep.end(),
                keep.begin() + static_cast<std::ptrdiff_t>(i * len * d));
    e = tape.mul(e, Tensor::from({rows, len, d}, std::move(keep)));
  }
  if (any_delta) {
    std::vector<float> delta(rows * len * d, 0.0f);
    for (std::size_t i = 0; i < rows; ++i) {
      if (i >= deltas.size() || deltas[i] == nullptr) continue;
      std::copy_n(deltas[i], views[i].length() * d,
                  delta.begin() + static_cast<std::ptrdiff_t>(i * len * d));
    }
    e = tape.add(e, Tensor::from({rows, len, d}, std::move(delta)));
  }
  return pool(tape, encode(tape, params, e, batch.mask), batch.mask, Pooling::kLastLayerMean);
}

NamedParams supervised_params(const EncoderParams& params, const PairClassifierParams& head) {
  NamedParams named = params.named();
  named.emplace_back("classifier.weight", head.weight);
  named.emplace_back("classifier.bias", head.bias);
  return named;
}

struct StepLoss {
  Tensor total;
  float ce = 0.0f;
  float con = 0.0f;
};

class PhaseRunner {
 public:
  PhaseRunner(const TrainConfig& config, const DevScorer& dev, TrainResult& result)
      : config_(config), dev_(dev), result_(result) {}

  /// Runs total_steps optimizer steps on `params`, leaving the phase-best
  /// parameters in result.best.
  template <typename StepFn>
  void run(const std::string& phase, EncoderParams& params, const NamedParams& optimized,
           StepFn&& step_fn) {
    PhaseSummary summary{phase, 0.0, 0, config_.total_steps};
    bool have_best = false;
    auto evaluate = [&](std::size_t step) {
      const double score = dev_(params);
      result_.history.push_back({phase, step, score});
      if (!have_best || score > summary.best_dev) {
        have_best = true;
        summary.best_dev = score;
        summary.best_step = step;
        result_.best = params.clone();
      }
    };

    AdamState state;
    evaluate(0);
    for (std::size_t step = 1; step <= config_.total_steps; ++step) {
      Tape tape;
      StepLoss loss = step_fn(tape, step - 1);
      tape.backward(loss.total);
      const double lr = lr_at(step, config_);
      adam_step(optimized, state, lr);
      result_.steps.push_back({phase, step, loss.total.item(), loss.ce, loss.con, lr});
      if (step % config_.eval_every == 0) evaluate(step);
    }
    result_.best_dev = summary.best_dev;
    result_.phases.push_back(summary);
  }

 private:
  const TrainConfig& config_;
  const DevScorer& dev_;
  TrainResult& result_;
};

std::vector<View> build_views(std::span<const EncodedSentence* const> sentences,
                              const TrainConfig& config, std::size_t width, std::size_t phase,
                              std::size_t step, AugmentRegime regime) {
  std::vector<View> views;
  views.reserve(2 * sentences.size());
  for (std::size_t k = 0; k < sentences.size(); ++k) {
    ViewPair pair = make_view_pair(*sentences[k], config.aug1, config.aug2, width,
                                   derive_seed(config.seed, "augment", phase, step, k), regime);
    views.push_back(std::move(pair.first));
    views.push_back(std::move(pair.second));
  }
  return views;
}

void run_contrastive_phase(std::span<const EncodedSentence> texts, EncoderParams& params,
                           const TrainConfig& config, const DevScorer& dev, TrainResult& result,
                           std::size_t phase_index) {
  if (texts.empty()) throw DataError("training needs a nonempty unlabeled dataset");
  EpochSampler sampler(texts.size(), config.seed, "order.unlabeled");
  const std::size_t width = params.config.d_model;
  PhaseRunner runner(config, dev, result);
  runner.run("unsup", params, params.named(), [&](Tape& tape, std::size_t step) {
    std::vector<const EncodedSentence*> picked;
    for (std::size_t i : sampler.next(config.batch_size)) picked.push_back(&texts[i]);
    std::vector<View> views =
        build_views(picked, config, width, phase_index, step, AugmentRegime::kUnsupervised);
    Tensor reps = encode_views(tape, params, views, {});
    Tensor loss = nt_xent(tape, reps, config.temperature);
    return StepLoss{loss, 0.0f, loss.item()};
  });
}

/// Supervised phase; with `contrastive` set, adds alpha * NT-Xent over
/// per-sentence view pairs of every premise and hypothesis.
void run_supervised_phase(std::span<const EncodedNli> nli, EncoderParams& params,
                          const TrainConfig& config, const DevScorer& dev, TrainResult& result,
                          std::size_t phase_index, bool contrastive) {
  if (nli.empty()) throw DataError("this regime needs a nonempty NLI dataset");
  EpochSampler sampler(nli.size(), config.seed, "order.nli");
  const std::size_t width = params.config.d_model;
  PairClassifierParams head = PairClassifierParams::init(width, kNliClasses, config.seed);
  const bool adversarial = contrastive && (config.aug1.kind == AugKind::kAdversarial ||
                                           config.aug2.kind == AugKind::kAdversarial);

  PhaseRunner runner(config, dev, result);
  runner.run(contrastive ? "joint" : "sup", params, supervised_params(params, head),
             [&](Tape& tape, std::size_t step) {
    std::vector<std::size_t> idx = sampler.next(config.batch_size);
    std::vector<EncodedSentence> premises, hypotheses;
    std::vector<std::int32_t> labels;
    for (std::size_t i : idx) {
      premises.push_back(nli[i].premise);
      hypotheses.push_back(nli[i].hypothesis);
      labels.push_back(nli[i].label);
    }
    Batch pb = collate(premises);
    Batch hb = collate(hypotheses);

    // FGV direction: gradient of the supervised loss w.r.t. detached clean
    // embeddings, normalized over the whole premise + hypothesis tensor.
    std::vector<float> unit_p, unit_h;
    if (adversarial) {
      Tape probe;
      Tape values(GradMode::kDisabled);
      Tensor ep = embed(values, params, pb.token_ids, pb.position_ids, pb.size, pb.length)
                      .clone_with(true);
      Tensor eh = embed(values, params, hb.token_ids, hb.position_ids, hb.size, hb.length)
                      .clone_with(true);
      Tensor rp = pool(probe, encode(probe, params, ep, pb.mask), pb.mask, Pooling::kLastLayerMean);
      Tensor rh = pool(probe, encode(probe, params, eh, hb.mask), hb.mask, Pooling::kLastLayerMean);
      probe.backward(classification_loss(probe, pair_features(probe, rp, rh), head, labels));
      std::vector<float> g(ep.grad().begin(), ep.grad().end());
      g.insert(g.end(), eh.grad().begin(), eh.grad().end());
      std::vector<float> unit =
          fgv_perturbation(std::vector<float>(g.size(), 0.0f), g, 1.0f, AugmentRegime::kJoint);
      unit_p.assign(unit.begin(), unit.begin() + static_cast<std::ptrdiff_t>(ep.numel()));
      unit_h.assign(unit.begin() + static_cast<std::ptrdiff_t>(ep.numel()), unit.end());
    }

    Tensor rp = encode_batch(tape, params, pb, Pooling::kLastLayerMean);
    Tensor rh = encode_batch(tape, params, hb, Pooling::kLastLayerMean);
    Tensor ce = classification_loss(tape, pair_features(tape, rp, rh), head, labels);
    if (!contrastive) return StepLoss{ce, ce.item(), 0.0f};

    std::vector<const EncodedSentence*> sentences;
    for (std::size_t k = 0; k < idx.size(); ++k) {
      sentences.push_back(&premises[k]);
      sentences.push_back(&hypotheses[k]);
    }
    std::vector<View> views =
        build_views(sentences, config, width, phase_index, step, AugmentRegime::kJoint);

    // Scaled per-view copies of the sentence's rows of the unit direction.
    std::vector<std::vector<float>> delta_store(views.size());
    std::vector<const float*> deltas(views.size(), nullptr);
    if (adversarial) {
      for (std::size_t v = 0; v < views.size(); ++v) {
        if (!views[v].adversarial) continue;
        const std::size_t sentence = v / 2, k = sentence / 2;
        const bool is_premise = sentence % 2 == 0;
        const std::vector<float>& unit = is_premise ? unit_p : unit_h;
        const std::size_t padded = is_premise ? pb.length : hb.length;
        const float* rows = unit.data() + k * padded * width;
        delta_store[v].assign(rows, rows + views[v].length() * width);
        for (float& x : delta_store[v]) x *= views[v].epsilon;
        deltas[v] = delta_store[v].data();
      }
    }
    Tensor con = nt_xent(tape, encode_views(tape, params, views, deltas), config.temperature);
    return StepLoss{joint_loss(tape, ce, con, config.alpha), ce.item(), con.item()};
  });
}

}  // namespace

TrainResult train_unsupervised(std::span<const EncodedSentence> texts, const EncoderParams& init,
                               const TrainConfig& config, const DevScorer& dev) {
  TrainConfig unsup = config;
  unsup.regime = Regime::kUnsup;
  return train_regime({}, texts, init, unsup, dev);
}

TrainResult train_regime(std::span<const EncodedNli> nli, std::span<const EncodedSentence> texts,
                         const EncoderParams& init, const TrainConfig& config,
                         const DevScorer& dev) {
  config.validate();
  if (!dev) throw ContractError("training needs a dev scorer");
  TrainResult result;
  EncoderParams params = init.clone();
  switch (config.regime) {
    case Regime::kUnsup:
      run_contrastive_phase(texts, params, config, dev, result, 0);
      break;
    case Regime::kJoint:
      run_supervised_phase(nli, params, config, dev, result, 0, true);
      break;
    case Regime::kSupUnsup:
    case Regime::kJointUnsup: {
      if (texts.empty()) throw DataError("this regime needs a nonempty unlabeled dataset");
      run_supervised_phase(nli, params, config, dev, result, 0,
                           config.regime == Regime::kJointUnsup);
      params = result.best.clone();
      run_contrastive_phase(texts, params, config, dev, result, 1);
      break;
    }
  }
  return result;
}

std::string format_number(double value) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, res.ptr);
}

std::string format_number(float value) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, res.ptr);
}

void write_metrics_tsv(std::ostream& out, const TrainResult& result) {
  std::map<std::pair<std::string, std::size_t>, double> dev;
  for (const EvalRecord& e : result.history) dev[{e.phase, e.step}] = e.dev;
  auto dev_text = [&](const std::string& phase, std::size_t step) {
    auto it = dev.find({phase, step});
    return it == dev.end() ? std::string() : format_number(it->second);
  };

  out << "phase\tstep\tloss\tloss_ce\tloss_con\tlr\tdev_spearman\n";
  std::string current;
  for (const StepRecord& s : result.steps) {
    if (s.phase != current) {
      current = s.phase;
      out << current << "\t0\t\t\t\t\t" << dev_text(current, 0) << "\n";
    }
    out << s.phase << '\t' << s.step << '\t' << format_number(s.loss) << '\t'
        << format_number(s.loss_ce) << '\t' << format_number(s.loss_con) << '\t'
        << format_number(s.lr) << '\t' << dev_text(s.phase, s.step) << '\n';
  }
}

}  // namespace consert
