#include <doctest.h>

#include <random>

#include "fixtures.hpp"
#include "tilefuse/error.hpp"
#include "tilefuse/phantom.hpp"
#include "tilefuse/registration.hpp"

using namespace tilefuse;

namespace {

PhantomSpec small_spec() {
  PhantomSpec s;
  s.dims = {48, 48, 48};
  s.spacing = {2, 2, 2};
  s.label_count = 4;
  s.noise_std = 0.01;
  return s;
}

}  // namespace

TEST_CASE("NCC of a volume with itself is one and is thread-count independent") {
  const Phantom p = make_phantom(small_spec());
  CHECK(normalized_cross_correlation(p.intensity, p.intensity, AffineTransform::identity()) ==
        doctest::Approx(1.0).epsilon(1e-12));
  const auto shift = AffineTransform::translation({1.3, -0.4, 2.2});
  const double one = normalized_cross_correlation(p.intensity, p.intensity, shift, 1, 1);
  const double four = normalized_cross_correlation(p.intensity, p.intensity, shift, 1, 4);
  CHECK(one == four);
  CHECK(one < 1.0);
}

TEST_CASE("NCC reports lost overlap") {
  const Phantom p = make_phantom(small_spec());
  CHECK(normalized_cross_correlation(p.intensity, p.intensity, AffineTransform::translation({500, 0, 0})) == -1.0);
}

TEST_CASE("registration recovers a known misalignment") {
  PhantomSpec fixed_spec = small_spec();
  PhantomSpec moving_spec = fixed_spec;
  moving_spec.seed = 9;
  moving_spec.misalignment.translation = {4, -3, 2};
  moving_spec.misalignment.rotation = {0.06, -0.04, 0.08};
  moving_spec.misalignment.scale = {1.04, 0.97, 1.0};
  const Phantom fixed = make_phantom(fixed_spec);
  const Phantom moving = make_phantom(moving_spec);

  const RegistrationResult r = estimate_affine(moving.intensity, fixed.intensity);
  const AffineTransform truth = invert(phantom_misalignment(moving_spec));
  const double err = mean_corner_displacement(r.transform, truth, fixed.intensity.grid());
  MESSAGE("corner error " << err << " mm, ncc " << r.similarity);
  CHECK(err < 2.0);
  CHECK(r.similarity > r.identity_similarity);
}

TEST_CASE("identical inputs register to identity") {
  const Phantom p = make_phantom(small_spec());
  const RegistrationResult r = estimate_affine(p.intensity, p.intensity);
  CHECK(mean_corner_displacement(r.transform, AffineTransform::identity(), p.intensity.grid()) < 0.1);
}

TEST_CASE("registration is deterministic across job counts") {
  PhantomSpec s = small_spec();
  s.misalignment.translation = {2, 1, -1};
  const Phantom fixed = make_phantom(small_spec());
  const Phantom moving = make_phantom(s);
  RegistrationConfig one;
  one.jobs = 1;
  RegistrationConfig many = one;
  many.jobs = 4;
  const auto a = estimate_affine(moving.intensity, fixed.intensity, one);
  const auto b = estimate_affine(moving.intensity, fixed.intensity, many);
  CHECK(a.transform.matrix() == b.transform.matrix());
}

TEST_CASE("degenerate inputs and bad configs") {
  const Phantom p = make_phantom(small_spec());
  const Volume flat(p.intensity.grid(), 3.0f);
  try {
    estimate_affine(flat, p.intensity);
    FAIL("constant moving volume accepted");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::degenerate_input);
  }
  RegistrationConfig bad;
  bad.dof = 7;
  CHECK_THROWS_AS(estimate_affine(p.intensity, p.intensity, bad), Error);
}

TEST_CASE("nine-dof registration has no shear") {
  PhantomSpec s = small_spec();
  s.misalignment.translation = {3, 0, 0};
  const Phantom fixed = make_phantom(small_spec());
  const Phantom moving = make_phantom(s);
  RegistrationConfig c;
  c.dof = 9;
  const auto r = estimate_affine(moving.intensity, fixed.intensity, c);
  CHECK(mean_corner_displacement(r.transform, invert(phantom_misalignment(s)), fixed.intensity.grid()) < 2.0);
}
