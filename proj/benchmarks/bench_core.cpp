// Micro-benchmarks for the hot paths: tensor algebra with gradients,
// posterior sampling, process predictions and task generation.

#include <benchmark/benchmark.h>

#include <cstdint>
#include <vector>

#include "abnn/data.hpp"
#include "abnn/networks.hpp"
#include "abnn/posteriors.hpp"
#include "abnn/rng.hpp"
#include "abnn/tensor.hpp"
#include "abnn/training.hpp"

namespace {

using namespace abnn;

Tensor random_matrix(std::size_t r, std::size_t c, Rng& rng, bool grad) {
  Tensor t = Tensor::from({r, c}, rng.normals(r * c));
  if (grad) t.set_requires_grad(true);
  return t;
}

void bench_matmul_forward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const Tensor a = random_matrix(n, n, rng, false);
  const Tensor b = random_matrix(n, n, rng, false);
  for (auto _ : state) {
    Tensor c = matmul(a, b);
    benchmark::DoNotOptimize(c.value().data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) *
                          static_cast<std::int64_t>(n * n * n));
}
BENCHMARK(bench_matmul_forward)->Arg(16)->Arg(64)->Arg(128);

void bench_matmul_backward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(2);
  for (auto _ : state) {
    Tape tape;
    Tensor a = random_matrix(n, n, rng, true);
    Tensor b = random_matrix(n, n, rng, true);
    Tensor loss = sum(matmul(a, b));
    backward(loss);
    benchmark::DoNotOptimize(a.grad().data());
  }
}
BENCHMARK(bench_matmul_backward)->Arg(16)->Arg(64);

void bench_mlp_gradient(benchmark::State& state) {
  Rng rng(3);
  MLPParams net = MLPParams::init({1, 32, 32, 1}, Act::tanh, rng);
  const Tensor x = random_matrix(64, 1, rng, false);
  const Tensor y = random_matrix(64, 1, rng, false);
  for (auto _ : state) {
    Tape tape;
    for (Tensor& p : net.weights) p.set_requires_grad(true);
    Tensor diff = sub(mlp_forward(net, x), y);
    Tensor loss = sum(mul(diff, diff));
    backward(loss);
    benchmark::DoNotOptimize(net.weights.front().grad().data());
    for (Tensor& p : net.weights) p.zero_grad();
  }
}
BENCHMARK(bench_mlp_gradient);

void bench_gp_task(benchmark::State& state) {
  const KernelSpec spec{KernelKind::se, 1.0, 1.0, 1.0};
  std::uint64_t seed = 0;
  for (auto _ : state) {
    Rng rng(++seed);
    Task t = gp_sample_task(spec, 50, 50, -2.0, 2.0, 0.05, rng);
    benchmark::DoNotOptimize(t.y.value().data());
  }
}
BENCHMARK(bench_gp_task);

void bench_apovi_sample(benchmark::State& state) {
  Rng rng(5);
  BNNConfig cfg;
  cfg.widths = {1, 16, 16, 1};
  cfg.act = Act::tanh;
  cfg.likelihood = Likelihood::gaussian(0.05);
  APOVIModel model = APOVIModel::init(cfg, {32}, Act::tanh, rng);
  Rng task_rng(6);
  const Task task = gp_sample_task({KernelKind::se, 1.0, 1.0, 1.0}, 30, 30, -2.0, 2.0, 0.05,
                                   task_rng);
  std::uint64_t seed = 0;
  for (auto _ : state) {
    GaussianNoise noise(++seed);
    SampleDetail s = apovi_sample(model, task, cfg, noise);
    benchmark::DoNotOptimize(s.sample.weights.front().value().data());
  }
}
BENCHMARK(bench_apovi_sample);

void bench_elbo_gradient(benchmark::State& state) {
  Rng rng(7);
  BNNConfig cfg;
  cfg.widths = {1, 16, 1};
  cfg.act = Act::tanh;
  cfg.likelihood = Likelihood::gaussian(0.05);
  MetaModel model;
  model.kind = ModelKind::apovi;
  model.bnn = cfg;
  model.apovi = APOVIModel::init(cfg, {16}, Act::tanh, rng);
  Rng task_rng(8);
  const Task task = gp_sample_task({KernelKind::se, 1.0, 1.0, 1.0}, 20, 20, -2.0, 2.0, 0.05,
                                   task_rng);
  std::uint64_t seed = 0;
  for (auto _ : state) {
    Tape tape;
    std::vector<Tensor> params = model.parameters();
    for (Tensor& p : params) p.set_requires_grad(true);
    Tensor obj = elbo_objective(model, task, 2, ++seed);
    Tensor loss = neg(obj);
    backward(loss);
    benchmark::DoNotOptimize(params.front().grad().data());
    for (Tensor& p : params) p.zero_grad();
  }
}
BENCHMARK(bench_elbo_gradient);

void bench_convcnp_predict_1d(benchmark::State& state) {
  Rng rng(9);
  ConvCNPModel model =
      ConvCNPModel::init_off_grid_1d(1, 16.0, 0.125, {8, 8}, {5, 5}, {16}, Act::relu, rng);
  Rng task_rng(10);
  const Task task = gp_sample_task({KernelKind::se, 1.0, 1.0, 1.0}, 30, 30, -2.0, 2.0, 0.05,
                                   task_rng);
  for (auto _ : state) {
    NPPrediction p = convcnp_predict(model, task, task.x);
    benchmark::DoNotOptimize(p.mean.value().data());
  }
}
BENCHMARK(bench_convcnp_predict_1d);

void bench_digit_render(benchmark::State& state) {
  std::uint64_t seed = 0;
  for (auto _ : state) {
    Rng rng(++seed);
    Image img = render_digit(static_cast<int>(seed % 10), rng);
    benchmark::DoNotOptimize(img.pixels.data());
  }
}
BENCHMARK(bench_digit_render);

}  // namespace

BENCHMARK_MAIN();
