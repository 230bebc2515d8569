#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tilefuse/affine.hpp"
#include "tilefuse/error.hpp"

namespace tilefuse {

struct Dims {
  std::int64_t x = 0;
  std::int64_t y = 0;
  std::int64_t z = 0;

  std::int64_t operator[](int axis) const { return axis == 0 ? x : (axis == 1 ? y : z); }
  std::int64_t& operator[](int axis) { return axis == 0 ? x : (axis == 1 ? y : z); }
  std::size_t count() const {
    return static_cast<std::size_t>(x) * static_cast<std::size_t>(y) * static_cast<std::size_t>(z);
  }
  friend bool operator==(const Dims&, const Dims&) = default;
};

std::string to_string(const Dims& d);

/// Voxel lattice geometry shared by intensity and label volumes.
struct Grid {
  Dims dims;
  Vec3 spacing{1.0, 1.0, 1.0};
  AffineTransform voxel_to_world;

  /// Diagonal voxel_to_world built from spacing, voxel (0,0,0) at `origin`.
  static Grid make(Dims dims, Vec3 spacing, Vec3 origin = {});
  /// Same as make() but with the volume centre at world (0,0,0).
  static Grid centered(Dims dims, Vec3 spacing);

  std::size_t voxel_count() const { return dims.count(); }
  std::size_t index(std::int64_t x, std::int64_t y, std::int64_t z) const {
    return static_cast<std::size_t>((z * dims.y + y) * dims.x + x);
  }
  bool contains(std::int64_t x, std::int64_t y, std::int64_t z) const {
    return x >= 0 && y >= 0 && z >= 0 && x < dims.x && y < dims.y && z < dims.z;
  }
  Vec3 world(Vec3 voxel) const { return voxel_to_world.apply(voxel); }
  Vec3 center_world() const;

  /// Throws ErrorCode::invalid_argument on non-positive dims or spacing.
  void validate() const;
  /// Equal dims; spacing and affine within 1e-6.
  bool same_as(const Grid& other) const;
};

void require_same_grid(const Grid& a, const Grid& b, const std::string& what);

/// Dense 3D scalar grid, x fastest (NIfTI on-disk order).
template <typename T>
class Image {
 public:
  using value_type = T;

  Image() = default;
  explicit Image(Grid grid, T fill = T{}) : grid_(std::move(grid)) {
    grid_.validate();
    data_.assign(grid_.voxel_count(), fill);
  }
  Image(Grid grid, std::vector<T> data) : grid_(std::move(grid)), data_(std::move(data)) {
    grid_.validate();
    if (data_.size() != grid_.voxel_count()) {
      throw Error(ErrorCode::invalid_argument, "voxel data length does not match dims " + to_string(grid_.dims));
    }
  }

  const Grid& grid() const { return grid_; }
  const Dims& dims() const { return grid_.dims; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(std::int64_t x, std::int64_t y, std::int64_t z) { return data_[grid_.index(x, y, z)]; }
  const T& operator()(std::int64_t x, std::int64_t y, std::int64_t z) const { return data_[grid_.index(x, y, z)]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::span<const T> data() const { return data_; }
  std::span<T> data() { return data_; }

  friend bool operator==(const Image& a, const Image& b) {
    return a.grid_.dims == b.grid_.dims && a.data_ == b.data_;
  }

 private:
  Grid grid_;
  std::vector<T> data_;
};

using Volume = Image<float>;
using CountVolume = Image<std::int32_t>;

using Label = std::uint16_t;

/// Integer label grid; every voxel holds a value in [0, label_count).
class LabelVolume : public Image<Label> {
 public:
  LabelVolume() = default;
  LabelVolume(Grid grid, int label_count);
  /// Throws ErrorCode::label_range if any value is >= label_count.
  LabelVolume(Grid grid, std::vector<Label> data, int label_count);

  int label_count() const { return label_count_; }
  /// Throws ErrorCode::label_range on the first out-of-range voxel.
  void check_labels() const;

  friend bool operator==(const LabelVolume& a, const LabelVolume& b) {
    return a.label_count_ == b.label_count_ &&
           static_cast<const Image<Label>&>(a) == static_cast<const Image<Label>&>(b);
  }

 private:
  int label_count_ = 0;
};

/// Mean and population standard deviation over all voxels (double accumulation).
std::pair<double, double> mean_and_std(std::span<const float> values);

}  // namespace tilefuse
