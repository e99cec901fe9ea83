#include <benchmark/benchmark.h>

#include "speedvae/kernels.hpp"
#include "test_support.hpp"

using namespace speedvae;
using namespace speedvae::testing;

namespace {

GaussianPotential target(int n) {
  RngStream g(1, 0);
  return GaussianPotential(Vector::Zero(n), spd_with_condition(n, 100.0, g));
}

KernelParams kernel(bool hmc, int n) {
  return hmc ? KernelParams::hmc(n, PreconditionerKind::LowerTriangular, 5, -2.0)
             : KernelParams::mala(n, PreconditionerKind::LowerTriangular, -1.0);
}

}  // namespace

static void BM_MhStep(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const GaussianPotential p = target(n);
  const KernelParams k = kernel(state.range(1) != 0, n);
  RngStream rng(2, 0);
  Vector z = Vector::Zero(n);
  for (auto _ : state) {
    z = mh_step(z, p, k, rng).next_state;
    benchmark::DoNotOptimize(z.data());
  }
}
BENCHMARK(BM_MhStep)->ArgsProduct({{10, 30, 150}, {0, 1}});

static void BM_SpeedMeasureGradient(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const GaussianPotential p = target(n);
  const KernelParams k = kernel(state.range(1) != 0, n);
  RngStream rng(3, 0);
  const Vector z = sample_standard_normal(n, rng);
  const KernelOutput out = mh_step(z, p, k, rng);
  for (auto _ : state) {
    SpeedMeasureTerm t = speed_measure_grad_contrib(out, z, p, k);
    benchmark::DoNotOptimize(t.grad.data());
  }
}
BENCHMARK(BM_SpeedMeasureGradient)->ArgsProduct({{10, 30, 150}, {0, 1}});

static void BM_HmcEntropy(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const GaussianPotential p = target(n);
  KernelParams k = kernel(true, n);
  k.entropy = state.range(1) ? EntropyApprox::FirstOrder : EntropyApprox::LocalGaussian;
  const Vector q = Vector::Zero(n);
  for (auto _ : state) benchmark::DoNotOptimize(hmc_entropy_approx(k, q, p));
}
BENCHMARK(BM_HmcEntropy)->ArgsProduct({{10, 30, 150}, {0, 1}});
