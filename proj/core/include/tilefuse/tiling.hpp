#pragma once

#include <string>
#include <vector>

#include "tilefuse/volume.hpp"

namespace tilefuse {

/// Axis-aligned crop of the canonical grid, in voxels. index is 1-based.
struct SubSpace {
  Dims corner;
  Dims size;
  int index = 1;

  bool contains(std::int64_t x, std::int64_t y, std::int64_t z) const {
    return x >= corner.x && y >= corner.y && z >= corner.z && x < corner.x + size.x && y < corner.y + size.y &&
           z < corner.z + size.z;
  }
  friend bool operator==(const SubSpace&, const SubSpace&) = default;
};

/// Tiles are ordered z-major: z outermost, then y, then x.
struct TileLattice {
  Dims canonical_dims;
  Dims counts;
  Dims tile_size;
  std::vector<SubSpace> tiles;

  std::size_t size() const { return tiles.size(); }
};

/// Corner i on an axis is round(i * (dim - d) / (count - 1)), or
/// floor((dim - d) / 2) for a single tile. Rejects tiles larger than the
/// volume (invalid_lattice) and count * d < dim on any axis (coverage_gap).
TileLattice make_lattice(Dims canonical_dims, Dims counts, Dims tile_size);

/// "slant8": 2x2x2 tiles of ceil(dim / 2).
/// "slant27": 3x3x3 tiles sized in proportion 96/172, 128/220, 88/156 of
/// the canonical dims; on the 172x220x156 MNI grid that is 96x128x88.
TileLattice preset_lattice(const std::string& name, Dims canonical_dims);

/// Crop of `s`, with voxel_to_world shifted by the corner so world
/// positions are preserved. Throws ErrorCode::out_of_bounds.
template <typename T>
Image<T> extract_tile(const Image<T>& v, const SubSpace& s);
LabelVolume extract_tile(const LabelVolume& v, const SubSpace& s);

/// Grid of a tile inside `canonical`.
Grid tile_grid(const Grid& canonical, const SubSpace& s);

/// Number of tiles covering each canonical voxel.
CountVolume coverage_map(const TileLattice& lattice);

/// {"canonical_dims":[..],"counts":[..],"tile_size":[..],"tiles":[{"index":j,"corner":[..],"size":[..]}...]}
std::string lattice_to_json(const TileLattice& lattice);
TileLattice lattice_from_json(const std::string& text);

}  // namespace tilefuse
