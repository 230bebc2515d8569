#include "tilefuse/resample.hpp"

#include <cmath>

#include "tilefuse/parallel.hpp"

namespace tilefuse {
namespace {

// Coordinates within this distance of an integer are snapped so that
// identity-like maps reproduce source voxels exactly.
constexpr double kSnap = 1e-6;

double snap(double c) {
  const double r = std::nearbyint(c);
  return std::abs(c - r) < kSnap ? r : c;
}

AffineTransform target_voxel_to_source_voxel(const Grid& src, const AffineTransform& transform,
                                             const Grid& target) {
  return compose(invert(src.voxel_to_world), compose(invert(transform), target.voxel_to_world));
}

float sample_trilinear(const Volume& src, Vec3 c) {
  const Dims& d = src.dims();
  c = {snap(c.x), snap(c.y), snap(c.z)};
  if (c.x < 0.0 || c.y < 0.0 || c.z < 0.0 || c.x > static_cast<double>(d.x - 1) ||
      c.y > static_cast<double>(d.y - 1) || c.z > static_cast<double>(d.z - 1)) {
    return 0.0f;
  }
  const auto x0 = static_cast<std::int64_t>(std::floor(c.x));
  const auto y0 = static_cast<std::int64_t>(std::floor(c.y));
  const auto z0 = static_cast<std::int64_t>(std::floor(c.z));
  const double fx = c.x - static_cast<double>(x0);
  const double fy = c.y - static_cast<double>(y0);
  const double fz = c.z - static_cast<double>(z0);
  if (fx == 0.0 && fy == 0.0 && fz == 0.0) return src(x0, y0, z0);
  const std::int64_t x1 = std::min(x0 + 1, d.x - 1);
  const std::int64_t y1 = std::min(y0 + 1, d.y - 1);
  const std::int64_t z1 = std::min(z0 + 1, d.z - 1);
  const double c00 = src(x0, y0, z0) * (1 - fx) + src(x1, y0, z0) * fx;
  const double c10 = src(x0, y1, z0) * (1 - fx) + src(x1, y1, z0) * fx;
  const double c01 = src(x0, y0, z1) * (1 - fx) + src(x1, y0, z1) * fx;
  const double c11 = src(x0, y1, z1) * (1 - fx) + src(x1, y1, z1) * fx;
  const double c0 = c00 * (1 - fy) + c10 * fy;
  const double c1 = c01 * (1 - fy) + c11 * fy;
  return static_cast<float>(c0 * (1 - fz) + c1 * fz);
}

template <typename T>
bool nearest_index(const Image<T>& src, Vec3 c, std::size_t& index) {
  const auto x = static_cast<std::int64_t>(std::floor(snap(c.x) + 0.5));
  const auto y = static_cast<std::int64_t>(std::floor(snap(c.y) + 0.5));
  const auto z = static_cast<std::int64_t>(std::floor(snap(c.z) + 0.5));
  if (!src.grid().contains(x, y, z)) return false;
  index = src.grid().index(x, y, z);
  return true;
}

template <typename T, typename Sampler>
void fill(Image<T>& out, const AffineTransform& map, int jobs, Sampler&& sampler) {
  const Dims d = out.dims();
  parallel_for(static_cast<std::size_t>(d.z), jobs, [&](std::size_t z_begin, std::size_t z_end) {
    for (auto z = static_cast<std::int64_t>(z_begin); z < static_cast<std::int64_t>(z_end); ++z) {
      for (std::int64_t y = 0; y < d.y; ++y) {
        for (std::int64_t x = 0; x < d.x; ++x) {
          const Vec3 c = map.apply({static_cast<double>(x), static_cast<double>(y), static_cast<double>(z)});
          out(x, y, z) = sampler(c);
        }
      }
    }
  });
}

}  // namespace

Volume resample(const Volume& src, const AffineTransform& transform, const Grid& target, Interp interp, int jobs) {
  const AffineTransform map = target_voxel_to_source_voxel(src.grid(), transform, target);
  Volume out(target, 0.0f);
  if (interp == Interp::trilinear) {
    fill(out, map, jobs, [&](Vec3 c) { return sample_trilinear(src, c); });
  } else {
    fill(out, map, jobs, [&](Vec3 c) {
      std::size_t i = 0;
      return nearest_index(src, c, i) ? src[i] : 0.0f;
    });
  }
  return out;
}

LabelVolume resample(const LabelVolume& src, const AffineTransform& transform, const Grid& target, Interp interp,
                     int jobs) {
  if (interp != Interp::nearest) {
    throw Error(ErrorCode::invalid_interp, "label volumes can only be resampled with nearest-neighbour");
  }
  const AffineTransform map = target_voxel_to_source_voxel(src.grid(), transform, target);
  LabelVolume out(target, src.label_count());
  fill(out, map, jobs, [&](Vec3 c) {
    std::size_t i = 0;
    return nearest_index(src, c, i) ? src[i] : Label{0};
  });
  return out;
}

Volume downsample(const Volume& src, int factor) {
  if (factor < 1) throw Error(ErrorCode::invalid_argument, "downsample factor must be >= 1");
  if (factor == 1) return src;
  const Dims in = src.dims();
  const auto f = static_cast<std::int64_t>(factor);
  const Dims out_dims{(in.x + f - 1) / f, (in.y + f - 1) / f, (in.z + f - 1) / f};
  const double shift = 0.5 * static_cast<double>(factor - 1);
  const AffineTransform v2w = compose(src.grid().voxel_to_world,
                                      compose(AffineTransform::translation({shift, shift, shift}),
                                              AffineTransform::scaling({double(factor), double(factor), double(factor)})));
  const Grid grid{out_dims,
                  {src.grid().spacing.x * factor, src.grid().spacing.y * factor, src.grid().spacing.z * factor},
                  v2w};
  Volume out(grid, 0.0f);
  for (std::int64_t z = 0; z < out_dims.z; ++z) {
    for (std::int64_t y = 0; y < out_dims.y; ++y) {
      for (std::int64_t x = 0; x < out_dims.x; ++x) {
        double sum = 0.0;
        int count = 0;
        for (std::int64_t k = z * f; k < std::min(in.z, (z + 1) * f); ++k) {
          for (std::int64_t j = y * f; j < std::min(in.y, (y + 1) * f); ++j) {
            for (std::int64_t i = x * f; i < std::min(in.x, (x + 1) * f); ++i) {
              sum += src(i, j, k);
              ++count;
            }
          }
        }
        out(x, y, z) = static_cast<float>(sum / count);
      }
    }
  }
  return out;
}

}  // namespace tilefuse
