#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "tilefuse/tiling.hpp"
#include "tilefuse/volume.hpp"

namespace tilefuse {

struct TileSegmentation {
  SubSpace tile;
  LabelVolume labels;  // dims == tile.size
};

struct FusionResult {
  LabelVolume labels;  // canonical grid
  std::size_t uncovered_voxels = 0;
};

/// Majority vote over the tiles covering each voxel; ties go to the smaller
/// label and voxels outside every tile are 0. `canonical` supplies the
/// output geometry and must have lattice.canonical_dims.
FusionResult fuse(std::span<const TileSegmentation> tile_segs, const TileLattice& lattice, int label_count,
                  const Grid& canonical, int jobs = 1);
/// Same, on a unit-spacing grid.
FusionResult fuse(std::span<const TileSegmentation> tile_segs, const TileLattice& lattice, int label_count);

/// Per-voxel sparse vote histogram (CSR layout). Voxels with no covering
/// tile have no entries.
struct VoteTally {
  struct Entry {
    Label label;
    std::uint16_t votes;
  };
  Dims dims;
  int label_count = 0;
  std::vector<std::uint64_t> offsets;  // size voxel_count + 1
  std::vector<Entry> entries;  // ascending label within a voxel

  std::span<const Entry> at(std::size_t voxel) const {
    return {entries.data() + offsets[voxel], entries.data() + offsets[voxel + 1]};
  }
  int coverage(std::size_t voxel) const;
};

VoteTally vote_counts(std::span<const TileSegmentation> tile_segs, const TileLattice& lattice, int label_count);

/// Winning votes / coverage per voxel; 0 where uncovered.
Volume confidence_map(const VoteTally& tally, const LabelVolume& fused);

}  // namespace tilefuse
