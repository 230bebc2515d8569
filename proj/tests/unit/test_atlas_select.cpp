#include <doctest.h>

#include <cmath>
#include <random>

#include "fixtures.hpp"
#include "tilefuse/atlas_select.hpp"

using namespace tilefuse;
using fixture::code_of;

namespace {

struct Setup {
  std::vector<NamedVolume> atlases;
  BrainMask mask;
};

Setup make_setup(std::size_t n, std::mt19937_64& rng) {
  Setup s;
  const Dims d{10, 9, 8};
  std::vector<std::uint8_t> bits(d.count(), 0);
  for (auto& b : bits) b = (rng() % 4) ? 1 : 0;
  for (std::size_t i = 0; i < n; ++i) {
    Volume v = fixture::random_volume(d, rng, 0, 50);
    for (std::size_t k = 0; k < v.size(); ++k) v[k] += static_cast<float>(k % 17);  // shared structure
    s.atlases.push_back({"atlas" + std::to_string(100 + i), v});
  }
  s.mask = BrainMask(s.atlases[0].volume.grid(), bits);
  return s;
}

double euclid(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

}  // namespace

TEST_CASE("masked_vector follows mask order on the z-normalized volume") {
  const Grid g = Grid::make({4, 1, 1}, {1, 1, 1});
  const BrainMask m(g, {0, 1, 0, 1});
  const auto v = masked_vector(Volume(g, {1, 2, 3, 4}), m);
  REQUIRE(v.size() == 2);
  const double sd = std::sqrt(1.25);
  CHECK(v[0] == doctest::Approx((2 - 2.5) / sd));
  CHECK(v[1] == doctest::Approx((4 - 2.5) / sd));
}

TEST_CASE("full-rank PCA preserves pairwise distances") {
  std::mt19937_64 rng(31);
  const auto s = make_setup(10, rng);
  const auto mf = build_manifold(s.atlases, s.mask);
  CHECK(mf.component_count() == 9);
  CHECK_FALSE(mf.degenerate);
  std::vector<std::vector<double>> raw;
  for (const auto& a : s.atlases) raw.push_back(masked_vector(a.volume, s.mask));
  double worst = 0;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    for (std::size_t j = i + 1; j < raw.size(); ++j) {
      const double full = euclid(raw[i], raw[j]);
      const double pca = euclid(mf.atlas_projections[i], mf.atlas_projections[j]);
      worst = std::max(worst, std::abs(full - pca) / full);
    }
  }
  CHECK(worst < 1e-6);
  for (std::size_t k = 0; k < mf.component_count(); ++k) {
    for (std::size_t l = 0; l <= k; ++l) {
      double d = 0;
      for (std::size_t i = 0; i < mf.components[k].size(); ++i) d += mf.components[k][i] * mf.components[l][i];
      CHECK(d == doctest::Approx(k == l ? 1.0 : 0.0).epsilon(1e-9).scale(1.0));
    }
  }
}

TEST_CASE("each atlas selects itself first") {
  std::mt19937_64 rng(32);
  const auto s = make_setup(8, rng);
  const auto mf = build_manifold(s.atlases, s.mask);
  for (std::size_t i = 0; i < s.atlases.size(); ++i) {
    const auto proj = project(mf, s.atlases[i].volume);
    CHECK(euclid(proj, mf.atlas_projections[i]) < 1e-6);
    const auto sel = select_atlases(mf, s.atlases[i].volume, 3);
    REQUIRE(sel.size() == 3);
    CHECK(sel[0] == s.atlases[i].id);
  }
  // An affine intensity change vanishes under z-normalization.
  Volume scaled = s.atlases[2].volume;
  for (std::size_t k = 0; k < scaled.size(); ++k) scaled[k] = 3.0f * scaled[k] + 11.0f;
  CHECK(select_atlases(mf, scaled, 1)[0] == s.atlases[2].id);
}

TEST_CASE("selection ranks by distance with id tie-break") {
  std::mt19937_64 rng(33);
  auto s = make_setup(4, rng);
  s.atlases[3].volume = s.atlases[1].volume;
  s.atlases[1].id = "zeta";
  s.atlases[3].id = "alpha";
  const auto mf = build_manifold(s.atlases, s.mask);
  const auto sel = select_atlases(mf, s.atlases[1].volume, 4);
  CHECK(sel[0] == "alpha");
  CHECK(sel[1] == "zeta");

  const auto all = select_atlases(mf, s.atlases[0].volume, 4);
  const auto proj = project(mf, s.atlases[0].volume);
  for (std::size_t i = 1; i < all.size(); ++i) {
    auto dist = [&](const std::string& id) {
      for (std::size_t a = 0; a < mf.atlas_count(); ++a) {
        if (mf.atlas_ids[a] == id) return euclid(proj, mf.atlas_projections[a]);
      }
      return -1.0;
    };
    CHECK(dist(all[i - 1]) <= dist(all[i]));
  }
}

TEST_CASE("manifold error cases") {
  std::mt19937_64 rng(34);
  auto s = make_setup(3, rng);
  const std::vector<NamedVolume> one{s.atlases[0]};
  CHECK(code_of([&] { build_manifold(one, s.mask); }) == ErrorCode::insufficient_data);
  const auto mf = build_manifold(s.atlases, s.mask);
  CHECK(code_of([&] { select_atlases(mf, s.atlases[0].volume, 4); }) == ErrorCode::invalid_argument);
  const Volume other = fixture::random_volume({3, 3, 3}, rng);
  CHECK(code_of([&] { project(mf, other); }) == ErrorCode::geometry_mismatch);
  auto bad = s.atlases;
  bad.push_back({"odd", other});
  CHECK(code_of([&] { build_manifold(bad, s.mask); }) == ErrorCode::geometry_mismatch);
}

TEST_CASE("identical atlases give a degenerate manifold") {
  std::mt19937_64 rng(35);
  auto s = make_setup(3, rng);
  s.atlases[1].volume = s.atlases[0].volume;
  s.atlases[2].volume = s.atlases[0].volume;
  const auto mf = build_manifold(s.atlases, s.mask);
  CHECK(mf.degenerate);
  CHECK(mf.component_count() == 0);

  const auto dg = degenerate_manifold({"c", "a", "b"}, s.mask);
  CHECK(dg.degenerate);
  CHECK(select_atlases(dg, s.atlases[0].volume, 2) == std::vector<std::string>{"a", "b"});
}

TEST_CASE("manifold sidecar round trips") {
  fixture::TempDir dir("manifold");
  std::mt19937_64 rng(36);
  const auto s = make_setup(5, rng);
  const auto mf = build_manifold(s.atlases, s.mask);
  save_manifold(mf, dir / "m.bin");
  const auto back = load_manifold(dir / "m.bin", s.mask);
  CHECK(back.atlas_ids == mf.atlas_ids);
  CHECK(back.mean == mf.mean);
  CHECK(back.components == mf.components);
  CHECK(back.atlas_projections == mf.atlas_projections);
  CHECK(back.degenerate == mf.degenerate);
  for (const auto& a : s.atlases) CHECK(select_atlases(back, a.volume, 5) == select_atlases(mf, a.volume, 5));

  std::vector<std::uint8_t> fewer(s.mask.bits().begin(), s.mask.bits().end());
  std::size_t first = 0;
  while (!fewer[first]) ++first;
  fewer[first] = 0;
  CHECK(code_of([&] { load_manifold(dir / "m.bin", BrainMask(s.mask.grid(), fewer)); }) == ErrorCode::corrupt_file);
  CHECK(code_of([&] { load_manifold(dir / "missing.bin", s.mask); }) == ErrorCode::format);
}
