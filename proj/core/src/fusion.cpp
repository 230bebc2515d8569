#include "tilefuse/fusion.hpp"

#include <algorithm>
#include <string>

#include "tilefuse/log.hpp"
#include "tilefuse/parallel.hpp"

namespace tilefuse {
namespace {

void validate(std::span<const TileSegmentation> tile_segs, const TileLattice& lattice, int label_count) {
  if (label_count < 1) throw Error(ErrorCode::invalid_argument, "label_count must be >= 1");
  for (const auto& seg : tile_segs) {
    const auto& t = seg.tile;
    for (int a = 0; a < 3; ++a) {
      if (t.corner[a] < 0 || t.corner[a] + t.size[a] > lattice.canonical_dims[a]) {
        throw Error(ErrorCode::out_of_bounds, "tile " + std::to_string(t.index) + " lies outside the canonical grid");
      }
    }
    if (seg.labels.dims() != t.size) {
      throw Error(ErrorCode::geometry_mismatch, "segmentation of tile " + std::to_string(t.index) + " has dims " +
                                                    to_string(seg.labels.dims()) + ", expected " +
                                                    to_string(t.size));
    }
    for (std::size_t i = 0; i < seg.labels.size(); ++i) {
      if (static_cast<int>(seg.labels[i]) >= label_count) {
        throw Error(ErrorCode::label_range, "tile " + std::to_string(t.index) + " holds label " +
                                                std::to_string(seg.labels[i]) + " >= " + std::to_string(label_count));
      }
    }
  }
}

// Walks the canonical grid in z-slabs, handing each voxel the labels of its
// covering tiles in tile_segs order.
template <typename Visit>
void for_each_voxel_votes(std::span<const TileSegmentation> tile_segs, const Dims& dims, std::size_t z_begin,
                          std::size_t z_end, Visit&& visit) {
  std::vector<const TileSegmentation*> in_z, in_zy;
  std::vector<Label> votes;
  votes.reserve(tile_segs.size());
  for (auto z = static_cast<std::int64_t>(z_begin); z < static_cast<std::int64_t>(z_end); ++z) {
    in_z.clear();
    for (const auto& s : tile_segs) {
      if (z >= s.tile.corner.z && z < s.tile.corner.z + s.tile.size.z) in_z.push_back(&s);
    }
    for (std::int64_t y = 0; y < dims.y; ++y) {
      in_zy.clear();
      for (const auto* s : in_z) {
        if (y >= s->tile.corner.y && y < s->tile.corner.y + s->tile.size.y) in_zy.push_back(s);
      }
      for (std::int64_t x = 0; x < dims.x; ++x) {
        votes.clear();
        for (const auto* s : in_zy) {
          const auto lx = x - s->tile.corner.x;
          if (lx < 0 || lx >= s->tile.size.x) continue;
          votes.push_back(s->labels(lx, y - s->tile.corner.y, z - s->tile.corner.z));
        }
        visit(x, y, z, votes);
      }
    }
  }
}

}  // namespace

FusionResult fuse(std::span<const TileSegmentation> tile_segs, const TileLattice& lattice, int label_count,
                  const Grid& canonical, int jobs) {
  if (canonical.dims != lattice.canonical_dims) {
    throw Error(ErrorCode::geometry_mismatch, "fusion grid does not match lattice dims");
  }
  validate(tile_segs, lattice, label_count);
  const Dims dims = lattice.canonical_dims;
  LabelVolume out(canonical, label_count);
  std::vector<std::size_t> uncovered_per_plane(static_cast<std::size_t>(dims.z), 0);

  parallel_for(static_cast<std::size_t>(dims.z), jobs, [&](std::size_t z_begin, std::size_t z_end) {
    std::vector<std::uint32_t> counts(static_cast<std::size_t>(label_count), 0);
    for_each_voxel_votes(tile_segs, dims, z_begin, z_end,
                         [&](std::int64_t x, std::int64_t y, std::int64_t z, std::vector<Label>& votes) {
                           if (votes.empty()) {
                             ++uncovered_per_plane[static_cast<std::size_t>(z)];
                             out(x, y, z) = 0;
                             return;
                           }
                           Label best = votes.front();
                           std::uint32_t best_count = 0;
                           for (Label l : votes) {
                             const std::uint32_t c = ++counts[l];
                             if (c > best_count || (c == best_count && l < best)) {
                               best = l;
                               best_count = c;
                             }
                           }
                           for (Label l : votes) counts[l] = 0;
                           out(x, y, z) = best;
                         });
  });

  FusionResult result{std::move(out), 0};
  for (auto n : uncovered_per_plane) result.uncovered_voxels += n;
  if (result.uncovered_voxels > 0) {
    log::warn(std::to_string(result.uncovered_voxels) + " canonical voxels are not covered by any tile");
  }
  return result;
}

FusionResult fuse(std::span<const TileSegmentation> tile_segs, const TileLattice& lattice, int label_count) {
  return fuse(tile_segs, lattice, label_count, Grid::make(lattice.canonical_dims, {1, 1, 1}));
}

int VoteTally::coverage(std::size_t voxel) const {
  int total = 0;
  for (const auto& e : at(voxel)) total += e.votes;
  return total;
}

VoteTally vote_counts(std::span<const TileSegmentation> tile_segs, const TileLattice& lattice, int label_count) {
  validate(tile_segs, lattice, label_count);
  VoteTally tally;
  tally.dims = lattice.canonical_dims;
  tally.label_count = label_count;
  tally.offsets.reserve(tally.dims.count() + 1);
  tally.offsets.push_back(0);
  for_each_voxel_votes(tile_segs, tally.dims, 0, static_cast<std::size_t>(tally.dims.z),
                       [&](std::int64_t, std::int64_t, std::int64_t, std::vector<Label>& votes) {
                         std::sort(votes.begin(), votes.end());
                         for (std::size_t i = 0; i < votes.size();) {
                           std::size_t j = i;
                           while (j < votes.size() && votes[j] == votes[i]) ++j;
                           tally.entries.push_back({votes[i], static_cast<std::uint16_t>(j - i)});
                           i = j;
                         }
                         tally.offsets.push_back(tally.entries.size());
                       });
  return tally;
}

Volume confidence_map(const VoteTally& tally, const LabelVolume& fused) {
  if (fused.dims() != tally.dims) throw Error(ErrorCode::geometry_mismatch, "confidence map dims mismatch");
  Volume out(fused.grid(), 0.0f);
  for (std::size_t i = 0; i < fused.size(); ++i) {
    const auto entries = tally.at(i);
    int total = 0;
    int winner = 0;
    for (const auto& e : entries) {
      total += e.votes;
      if (e.label == fused[i]) winner = e.votes;
    }
    if (total > 0) out[i] = static_cast<float>(winner) / static_cast<float>(total);
  }
  return out;
}

}  // namespace tilefuse
