#include <benchmark/benchmark.h>

#include <numeric>

#include "speedvae/evaluation.hpp"
#include "speedvae/training.hpp"

using namespace speedvae;

namespace {

struct Linear {
  LinearHVAE truth;
  Matrix data;
};

Linear linear(std::size_t n1, std::size_t n2, std::size_t dx, std::size_t rows) {
  RngStream g(1, 1);
  LinearHVAE truth = LinearHVAE::random(n1, n2, dx, 0.5, g);
  Matrix data(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(dx));
  for (Eigen::Index i = 0; i < data.rows(); ++i) data.row(i) = truth.sample_observation(g).transpose();
  return {std::move(truth), std::move(data)};
}

}  // namespace

static void BM_MarginalLoglik(benchmark::State& state) {
  const auto n1 = static_cast<std::size_t>(state.range(0));
  const Linear l = linear(n1, 2 * n1, 10 * n1, 100);
  for (auto _ : state) benchmark::DoNotOptimize(l.truth.mean_marginal_loglik(l.data));
  state.SetItemsProcessed(state.iterations() * 100);
}
BENCHMARK(BM_MarginalLoglik)->Arg(10)->Arg(50);

static void BM_ImportanceSampling(benchmark::State& state) {
  const Linear l = linear(10, 20, 100, 1);
  const Vector x = l.data.row(0).transpose();
  GaussianMoments q = l.truth.posterior_moments(x);
  q.cov *= 1.5;
  RngStream rng(2, 0);
  const auto S = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(importance_sampling_loglik(l.truth, x, q, S, rng));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ImportanceSampling)->Arg(1000)->Arg(10000);

static void BM_Algorithm1Step(benchmark::State& state) {
  const Linear l = linear(10, 20, 100, 20);
  RngStream init(3, 2);
  LinearVAE model(LinearHVAE::random(10, 20, 100, 0.5, init), LinearEncoder::random(10, 20, 100, init));
  TrainConfig cfg;
  cfg.kernel = state.range(0) ? KernelKind::Hmc : KernelKind::Mala;
  cfg.preconditioner = TrainPreconditioner::LowerTriangular;
  cfg.K = 2;
  Trainer trainer(model, cfg);
  std::vector<std::size_t> rows(20);
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  std::uint64_t b = 0;
  for (auto _ : state) {
    auto recs = trainer.algorithm1_step(l.data, rows, RngStream(4, b++));
    benchmark::DoNotOptimize(recs.data());
  }
}
BENCHMARK(BM_Algorithm1Step)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

static void BM_ElboStep(benchmark::State& state) {
  const Linear l = linear(10, 20, 100, 20);
  RngStream init(3, 2);
  LinearVAE model(LinearHVAE::random(10, 20, 100, 0.5, init), LinearEncoder::random(10, 20, 100, init));
  TrainConfig cfg;
  Trainer trainer(model, cfg);
  std::vector<std::size_t> rows(20);
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  std::uint64_t b = 0;
  for (auto _ : state) benchmark::DoNotOptimize(trainer.elbo_step(l.data, rows, RngStream(5, b++)));
}
BENCHMARK(BM_ElboStep)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
