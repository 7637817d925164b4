#include <benchmark/benchmark.h>

#include "matekd/evalsuite.hpp"
#include "matekd/losses.hpp"
#include "matekd/perturb.hpp"
#include "matekd/trainer.hpp"

using namespace matekd;
using ag::Matrix;

namespace {

EncoderConfig bench_config(int layers, int dim) { return {layers, dim, 4, 2 * dim, 128, 12, 2, 0.1}; }

Batch bench_batch(int size) {
  Rng rng(3);
  Batch b;
  b.size = size;
  b.seq_len = 12;
  for (int s = 0; s < size; ++s)
    for (int t = 0; t < 12; ++t) {
      const int id = t == 0 ? Vocabulary::kCls
                     : t == 11 ? Vocabulary::kSep
                               : Vocabulary::kNumSpecials + static_cast<int>(uniform_index(rng, 123));
      b.ids.push_back(id);
      b.key_valid.push_back(1);
      b.maskable.push_back(t > 0 && t < 11);
    }
  b.labels.assign(static_cast<std::size_t>(size), 0);
  return b;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = state.range(0);
  Matrix a = Matrix::Random(n, n), b = Matrix::Random(n, n);
  for (auto _ : state) {
    Matrix c = a * b;
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

void BM_EncoderForward(benchmark::State& state) {
  Classifier model(bench_config(2, static_cast<int>(state.range(0))), 1);
  Batch batch = bench_batch(16);
  for (auto _ : state) {
    ag::NoGradGuard guard;
    Matrix z = model.logits(batch).value();
    benchmark::DoNotOptimize(z.data());
  }
  state.SetItemsProcessed(state.iterations() * batch.size);
}
BENCHMARK(BM_EncoderForward)->Arg(32)->Arg(64)->Arg(128);

void BM_EncoderForwardBackward(benchmark::State& state) {
  Classifier model(bench_config(2, static_cast<int>(state.range(0))), 1);
  Batch batch = bench_batch(16);
  Rng rng(2);
  for (auto _ : state) {
    model.zero_grad();
    ag::backward(ce_loss(model.logits(batch, {true, &rng}), batch.labels));
  }
  state.SetItemsProcessed(state.iterations() * batch.size);
}
BENCHMARK(BM_EncoderForwardBackward)->Arg(32)->Arg(64)->Arg(128);

void BM_SampleGumbel(benchmark::State& state) {
  Rng rng(1);
  for (auto _ : state) {
    Matrix g = sample_gumbel(state.range(0), 128, rng);
    benchmark::DoNotOptimize(g.data());
  }
  state.SetItemsProcessed(state.iterations() * state.range(0) * 128);
}
BENCHMARK(BM_SampleGumbel)->Arg(16)->Arg(256);

void BM_GumbelSoftmax(benchmark::State& state) {
  Rng rng(1);
  Matrix logits = Matrix::Random(state.range(0), 128);
  Matrix g = sample_gumbel(state.range(0), 128, rng);
  for (auto _ : state) {
    ag::Var y = straight_through(gumbel_softmax(ag::Var(logits, true), g, 1.0));
    benchmark::DoNotOptimize(y.value().data());
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_GumbelSoftmax)->Arg(16)->Arg(256);

void BM_PseudoBatch(benchmark::State& state) {
  MaskedLM generator(bench_config(2, 64), 1);
  Batch batch = bench_batch(16);
  PseudoSampleOptions opts;
  std::uint64_t seed = 0;
  for (auto _ : state) {
    ag::NoGradGuard guard;
    PseudoBatch p = generate_pseudo_batch(generator, batch, opts, seed++);
    benchmark::DoNotOptimize(p.hard_ids.data());
  }
  state.SetItemsProcessed(state.iterations() * batch.size);
}
BENCHMARK(BM_PseudoBatch);

// One maximization step: generator forward, relaxed student forward, backward
// into the generator.
void BM_MaximizationStep(benchmark::State& state) {
  EncoderConfig cfg = bench_config(2, 64);
  Teacher teacher(Classifier(bench_config(4, 128), 1));
  Classifier student(cfg, 2);
  MaskedLM generator(cfg, 3);
  student.set_requires_grad(false);
  Batch batch = bench_batch(16);
  PseudoSampleOptions opts;
  std::uint64_t seed = 0;
  for (auto _ : state) {
    generator.zero_grad();
    PseudoBatch p = generate_pseudo_batch(generator, batch, opts, seed++);
    Matrix t = teacher.logits(p.hard_batch());
    ag::Var s = student.logits_relaxed(p.rows, p.size, p.seq_len, p.key_valid);
    ag::backward(ag::scale(generator_objective(t, s), -1.0));
  }
  state.SetItemsProcessed(state.iterations() * batch.size);
}
BENCHMARK(BM_MaximizationStep)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
