#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "tilefuse/tiling.hpp"
#include "tilefuse/volume.hpp"

namespace tilefuse {

enum class SegmenterKind { prior, knn, external };

SegmenterKind parse_segmenter_kind(const std::string& name);
std::string to_string(SegmenterKind kind);

struct KnnParams {
  int patch_edge = 3;  // voxels, odd
  int search_edge = 5;  // voxels, odd, >= patch_edge

  /// Edges from millimetre sizes: round(mm / spacing), bumped to odd.
  static KnnParams from_mm(double patch_mm, double search_mm, double spacing);
  void validate() const;
};

struct ExternalParams {
  std::string command;  // shell command; the manifest path is appended
  double timeout_seconds = 0.0;  // 0 disables the timeout
  std::filesystem::path work_root;  // per-tile directories are created here
};

struct SegmenterSpec {
  SegmenterKind kind = SegmenterKind::prior;
  KnnParams knn;
  ExternalParams external;
};

/// One tile's worth of work: the harmonized canonical-space crop.
struct TileTask {
  SubSpace tile;
  Volume intensity;  // dims == tile.size
  int label_count = 0;
  Dims canonical_dims;
};

/// Canonical-space atlas. Intensities should be in the same space as the
/// tile intensities (z-normalized) for the knn backend.
struct Atlas {
  std::string id;
  Volume intensity;
  LabelVolume labels;
};

/// Most frequent atlas label per voxel, smaller label on ties.
LabelVolume segment_prior(const TileTask& task, std::span<const Atlas> atlases);

/// Patch nearest-neighbour label transfer. For every tile voxel, each atlas
/// and each centre within the search cube that lies inside the canonical
/// grid is scored by the squared intensity distance between patches (patch
/// offsets restricted to the tile, atlas samples clamped to the atlas
/// volume). The label at the best centre wins; ties go to the lower atlas
/// index, then the centre closest to the voxel, then the smallest
/// (dz, dy, dx).
LabelVolume segment_knn(const TileTask& task, std::span<const Atlas> atlases, const KnnParams& params);

/// Runs an external plugin over the file protocol:
///   <work_root>/tile_<index>_XXXXXX/{manifest.json,input.nii,output.nii,stderr.log}
/// The command is run through /bin/sh with the manifest path as its final
/// argument and the work directory as cwd.
LabelVolume segment_external(const TileTask& task, const SegmenterSpec& spec);

/// Builds the protocol manifest for a task (keys are fixed).
std::string make_manifest(const TileTask& task);

/// Dispatches on spec.kind.
LabelVolume segment_tile(const TileTask& task, const SegmenterSpec& spec, std::span<const Atlas> atlases);

/// Reference in-process rules mirrored by test and example plugins.
/// label = rank-based bin: floor(L * #{v' < v} / N), clamped to L-1.
LabelVolume quantile_bin_labels(const Volume& intensity, int label_count);
/// label = intensity > threshold ? 1 : 0.
LabelVolume threshold_labels(const Volume& intensity, double threshold, int label_count);

}  // namespace tilefuse
