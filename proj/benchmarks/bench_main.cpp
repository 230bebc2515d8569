#include <benchmark/benchmark.h>

#include <random>

#include "tilefuse/fusion.hpp"
#include "tilefuse/harmonize.hpp"
#include "tilefuse/metrics.hpp"
#include "tilefuse/phantom.hpp"
#include "tilefuse/resample.hpp"
#include "tilefuse/tiling.hpp"

using namespace tilefuse;

namespace {

std::vector<TileSegmentation> slant27_tiles(const LabelVolume& truth, const TileLattice& lat) {
  std::vector<TileSegmentation> segs;
  for (const auto& t : lat.tiles) segs.push_back({t, extract_tile(truth, t)});
  return segs;
}

}  // namespace

static void BM_Fuse(benchmark::State& state) {
  PhantomSpec spec;
  const auto n = state.range(0);
  spec.dims = {n, n, n};
  const auto truth = make_phantom(spec).labels;
  const auto lat = preset_lattice("slant27", truth.dims());
  const auto segs = slant27_tiles(truth, lat);
  const Grid g = truth.grid();
  for (auto _ : state) benchmark::DoNotOptimize(fuse(segs, lat, spec.label_count, g, 1));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(truth.size()));
}
BENCHMARK(BM_Fuse)->Arg(64)->Arg(96)->Unit(benchmark::kMillisecond);

static void BM_ResampleTrilinear(benchmark::State& state) {
  PhantomSpec spec;
  spec.dims = {96, 96, 96};
  spec.noise_std = 0.02;
  const auto v = make_phantom(spec).intensity;
  const auto t = affine_from_params({{2, -1, 3}, {0.05, 0.02, -0.03}, {1.02, 0.98, 1.0}, {}}, v.grid().center_world());
  for (auto _ : state) benchmark::DoNotOptimize(resample(v, t, v.grid(), Interp::trilinear, 1));
}
BENCHMARK(BM_ResampleTrilinear)->Unit(benchmark::kMillisecond);

static void BM_SurfaceDistance(benchmark::State& state) {
  PhantomSpec a_spec;
  a_spec.dims = {96, 96, 96};
  PhantomSpec b_spec = a_spec;
  b_spec.misalignment.translation = {2, 1, 0};
  const auto a = label_mask(make_phantom(a_spec).labels, 2);
  const auto b = label_mask(make_phantom(b_spec).labels, 2);
  for (auto _ : state) benchmark::DoNotOptimize(surface_distance(a, b, {1, 1, 1}));
}
BENCHMARK(BM_SurfaceDistance)->Unit(benchmark::kMillisecond);

static void BM_HuberFit(benchmark::State& state) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g(0, 1);
  std::vector<double> y(static_cast<std::size_t>(state.range(0)));
  for (auto& v : y) v = g(rng);
  std::sort(y.rbegin(), y.rend());
  std::vector<double> x(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) x[i] = 0.7 * y[i] + 0.2 + 0.01 * g(rng);
  for (auto _ : state) benchmark::DoNotOptimize(huber_line_fit(x, y));
}
BENCHMARK(BM_HuberFit)->Arg(100000)->Arg(1000000)->Unit(benchmark::kMillisecond);
BENCHMARK_MAIN();
