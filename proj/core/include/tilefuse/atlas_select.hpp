#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "tilefuse/harmonize.hpp"
#include "tilefuse/volume.hpp"

namespace tilefuse {

struct NamedVolume {
  std::string id;
  Volume volume;
};

/// Full-rank PCA of z-normalized masked atlas intensities.
struct PcaManifold {
  BrainMask mask;
  std::vector<double> mean;  // length mask.voxel_count()
  std::vector<std::vector<double>> components;  // orthonormal, each length mask.voxel_count()
  std::vector<std::vector<double>> atlas_projections;  // n_atlases x n_components
  std::vector<std::string> atlas_ids;
  bool degenerate = false;  // no non-trivial component

  std::size_t atlas_count() const { return atlas_ids.size(); }
  std::size_t component_count() const { return components.size(); }
};

/// Masked intensity vector of the z-normalized volume (mask order).
std::vector<double> masked_vector(const Volume& v, const BrainMask& mask);

/// Needs >= 2 atlases; retains every component with non-negligible
/// variance (at most n - 1).
PcaManifold build_manifold(std::span<const NamedVolume> atlases, const BrainMask& mask);

/// Manifold with no components over the given atlases. Selection then
/// falls back to atlas id order.
PcaManifold degenerate_manifold(std::vector<std::string> atlas_ids, const BrainMask& mask);

std::vector<double> project(const PcaManifold& manifold, const Volume& test);

/// The n atlases nearest to `test` in projection space, ascending by
/// distance; ties (and degenerate manifolds) fall back to id order.
std::vector<std::string> select_atlases(const PcaManifold& manifold, const Volume& test, std::size_t n = 15);

/// Binary sidecar "TFPCAMF1"; the mask is not stored (it lives in the
/// harmonization sidecar) and must be passed back on load.
void save_manifold(const PcaManifold& manifold, const std::filesystem::path& path);
PcaManifold load_manifold(const std::filesystem::path& path, const BrainMask& mask);

}  // namespace tilefuse
