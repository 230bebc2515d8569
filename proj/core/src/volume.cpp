#include "tilefuse/volume.hpp"

#include <cmath>
#include <sstream>

namespace tilefuse {

std::string to_string(const Dims& d) {
  std::ostringstream ss;
  ss << d.x << "x" << d.y << "x" << d.z;
  return ss.str();
}

Grid Grid::make(Dims dims, Vec3 spacing, Vec3 origin) {
  AffineTransform::Matrix m{};
  m[0] = spacing.x;
  m[5] = spacing.y;
  m[10] = spacing.z;
  m[3] = origin.x;
  m[7] = origin.y;
  m[11] = origin.z;
  m[15] = 1.0;
  Grid g{dims, spacing, AffineTransform(m)};
  g.validate();
  return g;
}

Grid Grid::centered(Dims dims, Vec3 spacing) {
  const Vec3 origin{-0.5 * static_cast<double>(dims.x - 1) * spacing.x,
                    -0.5 * static_cast<double>(dims.y - 1) * spacing.y,
                    -0.5 * static_cast<double>(dims.z - 1) * spacing.z};
  return make(dims, spacing, origin);
}

Vec3 Grid::center_world() const {
  return world({0.5 * static_cast<double>(dims.x - 1), 0.5 * static_cast<double>(dims.y - 1),
                0.5 * static_cast<double>(dims.z - 1)});
}

void Grid::validate() const {
  if (dims.x <= 0 || dims.y <= 0 || dims.z <= 0) {
    throw Error(ErrorCode::invalid_argument, "dims must be positive, got " + to_string(dims));
  }
  for (int a = 0; a < 3; ++a) {
    if (!std::isfinite(spacing[a]) || spacing[a] <= 0.0) {
      throw Error(ErrorCode::invalid_argument, "spacing must be positive and finite");
    }
  }
}

bool Grid::same_as(const Grid& other) const {
  if (dims != other.dims) return false;
  for (int a = 0; a < 3; ++a) {
    if (std::abs(spacing[a] - other.spacing[a]) > 1e-6) return false;
  }
  return voxel_to_world.approx_equal(other.voxel_to_world, 1e-6);
}

void require_same_grid(const Grid& a, const Grid& b, const std::string& what) {
  if (!a.same_as(b)) {
    throw Error(ErrorCode::geometry_mismatch,
                what + ": grids differ (" + to_string(a.dims) + " vs " + to_string(b.dims) + ")");
  }
}

LabelVolume::LabelVolume(Grid grid, int label_count)
    : Image<Label>(std::move(grid), Label{0}), label_count_(label_count) {
  if (label_count < 1 || label_count > 65536) {
    throw Error(ErrorCode::invalid_argument, "label_count must be in [1, 65536]");
  }
}

LabelVolume::LabelVolume(Grid grid, std::vector<Label> data, int label_count)
    : Image<Label>(std::move(grid), std::move(data)), label_count_(label_count) {
  if (label_count < 1 || label_count > 65536) {
    throw Error(ErrorCode::invalid_argument, "label_count must be in [1, 65536]");
  }
  check_labels();
}

void LabelVolume::check_labels() const {
  for (std::size_t i = 0; i < size(); ++i) {
    if (static_cast<int>((*this)[i]) >= label_count_) {
      throw Error(ErrorCode::label_range, "label " + std::to_string((*this)[i]) + " at voxel " +
                                              std::to_string(i) + " exceeds label_count " +
                                              std::to_string(label_count_));
    }
  }
}

std::pair<double, double> mean_and_std(std::span<const float> values) {
  if (values.empty()) return {0.0, 0.0};
  double sum = 0.0;
  for (float v : values) sum += v;
  const double mean = sum / static_cast<double>(values.size());
  double ss = 0.0;
  for (float v : values) {
    const double d = v - mean;
    ss += d * d;
  }
  return {mean, std::sqrt(ss / static_cast<double>(values.size()))};
}

}  // namespace tilefuse
