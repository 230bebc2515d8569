#include "tilefuse/tiling.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

namespace tilefuse {
namespace {

void require_in_bounds(const Dims& dims, const SubSpace& s) {
  for (int a = 0; a < 3; ++a) {
    if (s.corner[a] < 0 || s.size[a] <= 0 || s.corner[a] + s.size[a] > dims[a]) {
      throw Error(ErrorCode::out_of_bounds, "sub-space " + std::to_string(s.index) + " (corner " +
                                                to_string(s.corner) + ", size " + to_string(s.size) +
                                                ") exceeds volume " + to_string(dims));
    }
  }
}

nlohmann::json dims_json(const Dims& d) { return nlohmann::json::array({d.x, d.y, d.z}); }

Dims dims_from(const nlohmann::json& j) { return {j.at(0).get<std::int64_t>(), j.at(1).get<std::int64_t>(), j.at(2).get<std::int64_t>()}; }

}  // namespace

TileLattice make_lattice(Dims canonical_dims, Dims counts, Dims tile_size) {
  for (int a = 0; a < 3; ++a) {
    if (canonical_dims[a] <= 0 || counts[a] < 1 || tile_size[a] < 1) {
      throw Error(ErrorCode::invalid_lattice, "lattice dims, counts and tile size must be positive");
    }
    if (tile_size[a] > canonical_dims[a]) {
      throw Error(ErrorCode::invalid_lattice, "tile size " + to_string(tile_size) + " exceeds volume " +
                                                  to_string(canonical_dims));
    }
    if (counts[a] * tile_size[a] < canonical_dims[a]) {
      throw Error(ErrorCode::coverage_gap, "lattice " + to_string(counts) + " of " + to_string(tile_size) +
                                               " leaves gaps in " + to_string(canonical_dims));
    }
  }
  std::vector<std::int64_t> corners[3];
  for (int a = 0; a < 3; ++a) {
    const std::int64_t span = canonical_dims[a] - tile_size[a];
    if (counts[a] == 1) {
      corners[a].push_back(span / 2);
      continue;
    }
    for (std::int64_t i = 0; i < counts[a]; ++i) {
      const double c = static_cast<double>(i) * static_cast<double>(span) / static_cast<double>(counts[a] - 1);
      corners[a].push_back(static_cast<std::int64_t>(std::llround(c)));
    }
  }
  TileLattice lattice{canonical_dims, counts, tile_size, {}};
  int index = 1;
  for (auto cz : corners[2]) {
    for (auto cy : corners[1]) {
      for (auto cx : corners[0]) {
        lattice.tiles.push_back({{cx, cy, cz}, tile_size, index++});
      }
    }
  }
  return lattice;
}

TileLattice preset_lattice(const std::string& name, Dims dims) {
  if (name == "slant8") {
    return make_lattice(dims, {2, 2, 2}, {(dims.x + 1) / 2, (dims.y + 1) / 2, (dims.z + 1) / 2});
  }
  if (name == "slant27") {
    const double ratio[3] = {96.0 / 172.0, 128.0 / 220.0, 88.0 / 156.0};
    Dims size;
    for (int a = 0; a < 3; ++a) {
      size[a] = std::max<std::int64_t>(1, std::llround(ratio[a] * static_cast<double>(dims[a])));
      size[a] = std::max(size[a], (dims[a] + 2) / 3);
      size[a] = std::min(size[a], dims[a]);
    }
    return make_lattice(dims, {3, 3, 3}, size);
  }
  throw Error(ErrorCode::configuration, "unknown lattice preset '" + name + "' (expected slant8 or slant27)");
}

Grid tile_grid(const Grid& canonical, const SubSpace& s) {
  require_in_bounds(canonical.dims, s);
  const AffineTransform shift =
      AffineTransform::translation({double(s.corner.x), double(s.corner.y), double(s.corner.z)});
  return Grid{s.size, canonical.spacing, compose(canonical.voxel_to_world, shift)};
}

template <typename T>
Image<T> extract_tile(const Image<T>& v, const SubSpace& s) {
  Image<T> out(tile_grid(v.grid(), s));
  for (std::int64_t z = 0; z < s.size.z; ++z) {
    for (std::int64_t y = 0; y < s.size.y; ++y) {
      for (std::int64_t x = 0; x < s.size.x; ++x) {
        out(x, y, z) = v(s.corner.x + x, s.corner.y + y, s.corner.z + z);
      }
    }
  }
  return out;
}

template Image<float> extract_tile(const Image<float>&, const SubSpace&);
template Image<Label> extract_tile(const Image<Label>&, const SubSpace&);
template Image<std::int32_t> extract_tile(const Image<std::int32_t>&, const SubSpace&);

LabelVolume extract_tile(const LabelVolume& v, const SubSpace& s) {
  Image<Label> crop = extract_tile(static_cast<const Image<Label>&>(v), s);
  std::vector<Label> data(crop.data().begin(), crop.data().end());
  return LabelVolume(crop.grid(), std::move(data), v.label_count());
}

CountVolume coverage_map(const TileLattice& lattice) {
  CountVolume out(Grid::make(lattice.canonical_dims, {1, 1, 1}), 0);
  for (const auto& t : lattice.tiles) {
    require_in_bounds(lattice.canonical_dims, t);
    for (std::int64_t z = t.corner.z; z < t.corner.z + t.size.z; ++z) {
      for (std::int64_t y = t.corner.y; y < t.corner.y + t.size.y; ++y) {
        for (std::int64_t x = t.corner.x; x < t.corner.x + t.size.x; ++x) ++out(x, y, z);
      }
    }
  }
  return out;
}

std::string lattice_to_json(const TileLattice& lattice) {
  nlohmann::json j;
  j["canonical_dims"] = dims_json(lattice.canonical_dims);
  j["counts"] = dims_json(lattice.counts);
  j["tile_size"] = dims_json(lattice.tile_size);
  j["tiles"] = nlohmann::json::array();
  for (const auto& t : lattice.tiles) {
    j["tiles"].push_back({{"index", t.index}, {"corner", dims_json(t.corner)}, {"size", dims_json(t.size)}});
  }
  return j.dump(2);
}

TileLattice lattice_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    TileLattice lattice;
    lattice.canonical_dims = dims_from(j.at("canonical_dims"));
    lattice.counts = dims_from(j.at("counts"));
    lattice.tile_size = dims_from(j.at("tile_size"));
    for (const auto& t : j.at("tiles")) {
      SubSpace s{dims_from(t.at("corner")), dims_from(t.at("size")), t.at("index").get<int>()};
      require_in_bounds(lattice.canonical_dims, s);
      lattice.tiles.push_back(s);
    }
    return lattice;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::format, std::string("malformed lattice JSON: ") + e.what());
  }
}

}  // namespace tilefuse
