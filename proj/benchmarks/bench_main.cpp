#include <benchmark/benchmark.h>

#include "consert/augment.hpp"
#include "consert/encoder.hpp"
#include "consert/eval.hpp"
#include "consert/objectives.hpp"
#include "consert/rng.hpp"
#include "consert/train.hpp"

namespace {

using namespace consert;

Tensor random(const Shape& shape, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<float> v(shape_numel(shape));
  for (float& x : v) x = rng.normal(0.0f, 1.0f);
  return Tensor::from(shape, std::move(v));
}

EncoderConfig bench_encoder(std::size_t vocab) {
  EncoderConfig c;
  c.vocab_size = vocab;
  c.max_len = 32;
  c.d_model = 32;
  c.n_layers = 2;
  c.n_heads = 4;
  c.d_ff = 64;
  return c;
}

std::vector<EncodedSentence> bench_sentences(std::size_t n, std::size_t vocab, std::size_t len) {
  Rng rng(3);
  std::vector<EncodedSentence> out(n);
  for (auto& s : out) {
    for (std::size_t i = 0; i < len; ++i) {
      s.token_ids.push_back(static_cast<std::int32_t>(4 + rng.uniform_index(vocab - 4)));
      s.position_ids.push_back(static_cast<std::int32_t>(i));
      s.attention_mask.push_back(1.0f);
    }
  }
  return out;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Tensor a = random({n, n}, 1), b = random({n, n}, 2);
  for (auto _ : state) {
    Tape tape(GradMode::kDisabled);
    benchmark::DoNotOptimize(tape.matmul(a, b).data().data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(64)->Arg(128);

void BM_SelfAttention(benchmark::State& state) {
  const auto len = static_cast<std::size_t>(state.range(0));
  Tensor q = random({16, len, 32}, 1), k = random({16, len, 32}, 2), v = random({16, len, 32}, 3);
  Tensor mask = Tensor::full({16, len}, 1.0f);
  for (auto _ : state) {
    Tape tape(GradMode::kDisabled);
    benchmark::DoNotOptimize(tape.self_attention(q, k, v, mask, 4).data().data());
  }
}
BENCHMARK(BM_SelfAttention)->Arg(16)->Arg(32);

void BM_NtXentForwardBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Tensor reps = random({2 * n, 32}, 4);
  reps.set_requires_grad(true);
  for (auto _ : state) {
    Tape tape;
    tape.backward(nt_xent(tape, reps, 0.1f));
    reps.zero_grad();
  }
}
BENCHMARK(BM_NtXentForwardBackward)->Arg(32)->Arg(96);

void BM_EncoderForward(benchmark::State& state) {
  const EncoderParams p = init_params(bench_encoder(200), 1);
  const auto sentences = bench_sentences(static_cast<std::size_t>(state.range(0)), 200, 16);
  for (auto _ : state)
    benchmark::DoNotOptimize(embed_sentences(p, sentences, Pooling::kLastTwoLayersMean));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_EncoderForward)->Arg(64)->Arg(256);

void BM_TrainStep(benchmark::State& state) {
  const auto sentences = bench_sentences(512, 200, 16);
  const EncoderParams init = init_params(bench_encoder(200), 1);
  TrainConfig cfg;
  cfg.batch_size = static_cast<std::size_t>(state.range(0));
  cfg.total_steps = 5;
  cfg.eval_every = 1000;
  const DevScorer dev = [](const EncoderParams&) { return 0.0; };
  for (auto _ : state) benchmark::DoNotOptimize(train_unsupervised(sentences, init, cfg, dev).best_dev);
  state.SetItemsProcessed(state.iterations() * 5);
}
BENCHMARK(BM_TrainStep)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_MakeViewPair(benchmark::State& state) {
  const auto sentences = bench_sentences(1, 200, 32);
  std::uint64_t seed = 0;
  for (auto _ : state)
    benchmark::DoNotOptimize(make_view_pair(sentences[0], AugmentationSpec::shuffle(),
                                            AugmentationSpec::feature_cutoff(), 32, ++seed,
                                            AugmentRegime::kUnsupervised));
}
BENCHMARK(BM_MakeViewPair);

void BM_Spearman(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(5);
  std::vector<double> a(n), b(n);
  for (std::size_t i = 0; i < n; ++i) {
    a[i] = rng.uniform();
    b[i] = static_cast<double>(rng.uniform_index(6));
  }
  for (auto _ : state) benchmark::DoNotOptimize(spearman(a, b));
}
BENCHMARK(BM_Spearman)->Arg(1000)->Arg(10000);

}  // namespace

BENCHMARK_MAIN();
