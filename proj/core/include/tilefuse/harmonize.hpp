#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "tilefuse/volume.hpp"

namespace tilefuse {

/// Binary brain mask on the canonical grid.
class BrainMask {
 public:
  BrainMask() = default;
  /// Throws ErrorCode::empty_mask when no voxel is set.
  BrainMask(Grid grid, std::vector<std::uint8_t> bits);

  const Grid& grid() const { return grid_; }
  std::span<const std::uint8_t> bits() const { return bits_; }
  bool contains(std::size_t index) const { return bits_[index] != 0; }
  std::size_t voxel_count() const { return count_; }

 private:
  Grid grid_;
  std::vector<std::uint8_t> bits_;
  std::size_t count_ = 0;
};

/// Sorted-intensity reference: the mean of every atlas' sorted vector.
struct HarmonizationModel {
  BrainMask mask;
  std::vector<double> mean_sorted;  // non-increasing, length mask.voxel_count()
};

struct HarmonizationFit {
  double beta0 = 0.0;
  double beta1 = 1.0;
  int iterations = 0;
  bool converged = false;
};

/// Subtract the mean, divide by the population standard deviation.
Volume znormalize(const Volume& v);

/// Voxel set where the mean of the binary (label > 0) maps is >= 0.5.
BrainMask build_mask(std::span<const LabelVolume> prob_maps);

/// Masked intensities, largest first.
std::vector<double> sorted_vector(const Volume& v, const BrainMask& mask);

/// Elementwise mean of the sorted vectors of the z-normalized atlases.
HarmonizationModel build_model(std::span<const Volume> atlas_volumes, const BrainMask& mask);

/// Huber IRLS regression of mean_sorted (response) on test_sorted
/// (predictor): mean_sorted ~ beta1 * test_sorted + beta0.
HarmonizationFit fit(const HarmonizationModel& model, std::span<const double> test_sorted);

/// Lower-level entry point: robust line fit of y on x.
HarmonizationFit huber_line_fit(std::span<const double> x, std::span<const double> y);

/// out = beta1 * in + beta0 for every voxel.
Volume apply(const HarmonizationFit& fit, const Volume& v);

/// Binary sidecar: magic "TFHMODL1", int32 dims[3], uint64 voxel count,
/// bit-packed mask (x fastest, LSB first), float64 mean_sorted; little endian.
void save_model(const HarmonizationModel& model, const std::filesystem::path& path);
/// The sidecar does not carry spacing or orientation; `grid` supplies them
/// and must match the stored dims.
HarmonizationModel load_model(const std::filesystem::path& path, const Grid& grid);

}  // namespace tilefuse
