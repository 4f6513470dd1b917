#include <benchmark/benchmark.h>

#include <vector>

#include "cilmp/concepts.hpp"
#include "cilmp/encoders.hpp"
#include "cilmp/metrics.hpp"
#include "cilmp/ops.hpp"
#include "cilmp/prompts.hpp"
#include "cilmp/rng.hpp"

using namespace cilmp;
namespace op = cilmp::ops;

namespace {

Tensor random_tensor(Rng& rng, const Shape& shape) { return Tensor::from(shape, rng.normal_vector(shape_numel(shape))); }

Tensor random_parameter(Rng& rng, const Shape& shape) {
  return Tensor::parameter(shape, rng.normal_vector(shape_numel(shape)));
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const Tensor a = random_tensor(rng, {n, n}), b = random_tensor(rng, {n, n});
  for (auto _ : state) benchmark::DoNotOptimize(op::matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(16)->Arg(64)->Arg(256);

void BM_MatmulBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(2);
  const Tensor a = random_parameter(rng, {n, n}), b = random_parameter(rng, {n, n});
  for (auto _ : state) {
    backward(op::sum(op::matmul(a, b)));
    benchmark::DoNotOptimize(a.grad().data());
  }
}
BENCHMARK(BM_MatmulBackward)->Arg(64)->Arg(256);

// [segments x len] tokens of width 64, causal text-style attention
void BM_SegmentAttention(benchmark::State& state) {
  const auto segments = static_cast<std::size_t>(state.range(0));
  const std::size_t len = 24, d = 64;
  Rng rng(3);
  const Tensor q = random_parameter(rng, {segments * len, d});
  const Tensor k = random_parameter(rng, {segments * len, d});
  const Tensor v = random_parameter(rng, {segments * len, d});
  for (auto _ : state) {
    backward(op::sum(op::segment_attention(q, k, v, len, true)));
    benchmark::DoNotOptimize(q.grad().data());
  }
}
BENCHMARK(BM_SegmentAttention)->Arg(4)->Arg(64);

// One prompt-tuning step (forward and backward) at the default widths.
void BM_PromptLossStep(benchmark::State& state) {
  const auto mode = static_cast<PromptMode>(state.range(0));
  const std::size_t c = 4, batch = 16;
  EncoderConfig enc;
  ClipModel clip(enc, 4);
  clip.freeze();
  BankSpec spec;
  spec.num_classes = c;
  Rng rng(5);
  const ConceptBank bank = generate_bank(spec, op::normalize_rows(random_tensor(rng, {c, spec.width})));
  PromptConfig cfg;
  cfg.mode = mode;
  PromptLearner pl(clip, bank, TokenLayout::for_classes(c, enc.vocab_size), cfg, 6);
  const Tensor x = random_tensor(rng, {batch * enc.image_tokens, enc.embed_dim});
  std::vector<int> labels(batch);
  for (std::size_t i = 0; i < batch; ++i) labels[i] = static_cast<int>(i % c);
  for (auto _ : state) {
    const Tensor loss = pl.loss(x, labels);
    backward(loss);
    benchmark::DoNotOptimize(loss.item());
  }
  state.SetLabel(to_string(mode));
}
BENCHMARK(BM_PromptLossStep)
    ->Arg(static_cast<int>(PromptMode::cilmp))
    ->Arg(static_cast<int>(PromptMode::no_conditional))
    ->Arg(static_cast<int>(PromptMode::no_intervention))
    ->Unit(benchmark::kMillisecond);

void BM_MacroAuc(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const std::size_t c = 8;
  Rng rng(7);
  std::vector<int> y(n);
  std::vector<std::vector<double>> s(n, std::vector<double>(c));
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = static_cast<int>(i % c);
    double total = 0.0;
    for (auto& v : s[i]) total += v = rng.uniform();
    for (auto& v : s[i]) v /= total;
  }
  const EvalBatch b = EvalBatch::from_scores(y, s);
  for (auto _ : state) benchmark::DoNotOptimize(macro_ovr_auc(b));
}
BENCHMARK(BM_MacroAuc)->Arg(1000)->Arg(100000);

}  // namespace
BENCHMARK_MAIN();
