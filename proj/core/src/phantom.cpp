#include "tilefuse/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <vector>

namespace tilefuse {
namespace {

double bulge(Vec3 u) {
  return 0.07 * u.x - 0.05 * u.y + 0.04 * u.z + 0.06 * u.x * u.y - 0.05 * u.y * u.z + 0.15 * u.x * u.y * u.z;
}

// One shell boundary: a rotated ellipsoid, scaled by a lopsided bulge along
// each ray from the centre. Shells differ in elongation and orientation, so
// no affine map other than the identity carries the set onto itself.
struct Boundary {
  Vec3 radii;
  double yaw = 0.0, pitch = 0.0;

  // Distance from the centre to the boundary along unit direction u.
  double reach(Vec3 u) const {
    const double cz = std::cos(yaw), sz = std::sin(yaw), cx = std::cos(pitch), sx = std::sin(pitch);
    const double x1 = cz * u.x + sz * u.y, y1 = -sz * u.x + cz * u.y;
    const double y2 = cx * y1 + sx * u.z, z2 = -sx * y1 + cx * u.z;
    const double q = x1 * x1 / (radii.x * radii.x) + y2 * y2 / (radii.y * radii.y) + z2 * z2 / (radii.z * radii.z);
    return (1.0 + bulge(u)) / std::sqrt(q);
  }
};

std::vector<Boundary> boundaries(Vec3 extent, int regions) {
  std::vector<Boundary> out;
  for (int l = 0; l < regions; ++l) {
    const double t = static_cast<double>(l) / regions;
    const double shrink = 1.0 - 0.85 * t;
    const Vec3 shape{0.36 - 0.10 * t, 0.30 + 0.04 * t, 0.26 + 0.02 * t};
    out.push_back({{shrink * shape.x * extent.x, shrink * shape.y * extent.y, shrink * shape.z * extent.z},
                   0.45 * t, 0.25 * t});
  }
  return out;
}

// Thinnest shell, in voxels along the ray, over a dense set of directions.
double thinnest_shell(const std::vector<Boundary>& shells, Vec3 spacing) {
  const int n = 4000;
  double thinnest = std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i) {
    const double z = 1.0 - (2.0 * i + 1.0) / n;
    const double r = std::sqrt(1.0 - z * z);
    const double phi = i * std::numbers::pi * (3.0 - std::sqrt(5.0));
    const Vec3 u{r * std::cos(phi), r * std::sin(phi), z};
    // Length in voxel units per millimetre along u.
    const double density = norm(Vec3{u.x / spacing.x, u.y / spacing.y, u.z / spacing.z});
    for (std::size_t l = 0; l < shells.size(); ++l) {
      const double inner = l + 1 < shells.size() ? shells[l + 1].reach(u) : 0.0;
      thinnest = std::min(thinnest, (shells[l].reach(u) - inner) * density);
    }
  }
  return thinnest;
}

}  // namespace

float phantom_label_intensity(int label, int label_count) {
  if (label == 0) return 10.0f;
  // Golden-ratio stepping keeps neighbouring shells visibly different.
  const double frac = std::fmod(0.31 + 0.618033988749895 * label, 1.0);
  (void)label_count;
  return static_cast<float>(150.0 + 650.0 * frac);
}

AffineTransform phantom_misalignment(const PhantomSpec& spec) {
  const Grid grid = Grid::centered(spec.dims, spec.spacing);
  return affine_from_params(spec.misalignment, grid.center_world());
}

Phantom make_phantom(const PhantomSpec& spec) {
  if (spec.label_count < 2) throw Error(ErrorCode::spec, "phantom needs label_count >= 2");
  const Grid grid = Grid::centered(spec.dims, spec.spacing);
  const Vec3 extent{spec.dims.x * spec.spacing.x, spec.dims.y * spec.spacing.y, spec.dims.z * spec.spacing.z};
  const int regions = spec.label_count - 1;
  const std::vector<Boundary> shells = boundaries(extent, regions);
  if (thinnest_shell(shells, spec.spacing) < 2.0) {
    throw Error(ErrorCode::spec, "label_count " + std::to_string(spec.label_count) +
                                     " is too large for a phantom of dims " + to_string(spec.dims));
  }

  const AffineTransform content_to_scan = phantom_misalignment(spec);
  const AffineTransform scan_to_content = invert(content_to_scan);

  Volume intensity(grid, 0.0f);
  LabelVolume labels(grid, spec.label_count);
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  const double range = 800.0;
  const Dims d = spec.dims;
  for (std::int64_t z = 0; z < d.z; ++z) {
    for (std::int64_t y = 0; y < d.y; ++y) {
      for (std::int64_t x = 0; x < d.x; ++x) {
        const Vec3 world = grid.world({double(x), double(y), double(z)});
        const Vec3 p = scan_to_content.apply(world);
        const double r = norm(p);
        const Vec3 u = r > 0.0 ? (1.0 / r) * p : Vec3{1.0, 0.0, 0.0};
        int label = 0;
        while (label < regions && r <= shells[static_cast<std::size_t>(label)].reach(u)) ++label;
        double value = phantom_label_intensity(label, spec.label_count);
        if (spec.bias_amplitude != 0.0) {
          const double u = p.x / extent.x, v = p.y / extent.y, w = p.z / extent.z;
          value *= 1.0 + spec.bias_amplitude * std::cos(std::numbers::pi * (u + 0.5 * v)) * std::cos(std::numbers::pi * w);
        }
        if (spec.noise_std > 0.0) value += spec.noise_std * range * noise(rng);
        labels(x, y, z) = static_cast<Label>(label);
        intensity(x, y, z) = static_cast<float>(value);
      }
    }
  }
  return {std::move(intensity), std::move(labels)};
}

}  // namespace tilefuse
