#include "tilefuse/segmenter.hpp"

#include <stdlib.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <sstream>

#include <nlohmann/json.hpp>

#include "tilefuse/nifti.hpp"
#include "tilefuse/process.hpp"

namespace tilefuse {
namespace {

void require_atlases(std::span<const Atlas> atlases, const TileTask& task) {
  if (atlases.empty()) throw Error(ErrorCode::insufficient_data, "segmenter needs at least one atlas");
  if (task.intensity.dims() != task.tile.size) {
    throw Error(ErrorCode::geometry_mismatch, "tile " + std::to_string(task.tile.index) +
                                                  ": intensity dims do not match the sub-space size");
  }
  for (const auto& a : atlases) {
    if (a.labels.dims() != task.canonical_dims || a.intensity.dims() != task.canonical_dims) {
      throw Error(ErrorCode::geometry_mismatch, "atlas '" + a.id + "' is not on the canonical grid");
    }
    if (a.labels.label_count() > task.label_count) {
      a.labels.check_labels();
      for (std::size_t i = 0; i < a.labels.size(); ++i) {
        if (static_cast<int>(a.labels[i]) >= task.label_count) {
          throw Error(ErrorCode::label_range, "atlas '" + a.id + "' holds labels beyond label_count");
        }
      }
    }
  }
}

struct Offset {
  int dx, dy, dz;
};

// Centre offsets ordered by squared length, then (dz, dy, dx).
std::vector<Offset> ordered_offsets(int half) {
  std::vector<Offset> out;
  for (int dz = -half; dz <= half; ++dz) {
    for (int dy = -half; dy <= half; ++dy) {
      for (int dx = -half; dx <= half; ++dx) out.push_back({dx, dy, dz});
    }
  }
  std::stable_sort(out.begin(), out.end(), [](const Offset& a, const Offset& b) {
    return a.dx * a.dx + a.dy * a.dy + a.dz * a.dz < b.dx * b.dx + b.dy * b.dy + b.dz * b.dz;
  });
  return out;
}

std::int64_t clamp_axis(std::int64_t v, std::int64_t n) { return std::clamp<std::int64_t>(v, 0, n - 1); }

std::filesystem::path make_work_dir(const std::filesystem::path& root, int tile_index) {
  std::filesystem::path base = root.empty() ? std::filesystem::temp_directory_path() : root;
  std::filesystem::create_directories(base);
  char prefix[32];
  std::snprintf(prefix, sizeof prefix, "tile_%03d_XXXXXX", tile_index);
  std::string pattern = (base / prefix).string();
  if (mkdtemp(pattern.data()) == nullptr) {
    throw Error(ErrorCode::write_failure, "cannot create plugin work directory under " + base.string());
  }
  return pattern;
}

}  // namespace

SegmenterKind parse_segmenter_kind(const std::string& name) {
  if (name == "prior") return SegmenterKind::prior;
  if (name == "knn") return SegmenterKind::knn;
  if (name == "external") return SegmenterKind::external;
  throw Error(ErrorCode::configuration, "unknown segmenter '" + name + "' (expected prior, knn or external)");
}

std::string to_string(SegmenterKind kind) {
  switch (kind) {
    case SegmenterKind::prior: return "prior";
    case SegmenterKind::knn: return "knn";
    case SegmenterKind::external: return "external";
  }
  return "unknown";
}

KnnParams KnnParams::from_mm(double patch_mm, double search_mm, double spacing) {
  auto edge = [&](double mm) {
    auto e = static_cast<int>(std::lround(mm / spacing));
    if (e < 1) e = 1;
    if (e % 2 == 0) ++e;
    return e;
  };
  KnnParams p{edge(patch_mm), edge(search_mm)};
  p.search_edge = std::max(p.search_edge, p.patch_edge);
  return p;
}

void KnnParams::validate() const {
  if (patch_edge < 1 || patch_edge % 2 == 0 || search_edge < 1 || search_edge % 2 == 0) {
    throw Error(ErrorCode::invalid_argument, "knn patch and search edges must be odd and >= 1");
  }
  if (search_edge < patch_edge) throw Error(ErrorCode::invalid_argument, "knn search edge must be >= patch edge");
}

LabelVolume segment_prior(const TileTask& task, std::span<const Atlas> atlases) {
  require_atlases(atlases, task);
  const SubSpace& t = task.tile;
  LabelVolume out(task.intensity.grid(), task.label_count);
  std::vector<std::uint32_t> counts(static_cast<std::size_t>(task.label_count), 0);
  for (std::int64_t z = 0; z < t.size.z; ++z) {
    for (std::int64_t y = 0; y < t.size.y; ++y) {
      for (std::int64_t x = 0; x < t.size.x; ++x) {
        Label best = 0;
        std::uint32_t best_count = 0;
        for (const auto& a : atlases) {
          const Label l = a.labels(t.corner.x + x, t.corner.y + y, t.corner.z + z);
          const std::uint32_t c = ++counts[l];
          if (c > best_count || (c == best_count && l < best)) {
            best = l;
            best_count = c;
          }
        }
        for (const auto& a : atlases) counts[a.labels(t.corner.x + x, t.corner.y + y, t.corner.z + z)] = 0;
        out(x, y, z) = best;
      }
    }
  }
  return out;
}

LabelVolume segment_knn(const TileTask& task, std::span<const Atlas> atlases, const KnnParams& params) {
  params.validate();
  require_atlases(atlases, task);
  const SubSpace& t = task.tile;
  const Dims cd = task.canonical_dims;
  const int patch_half = params.patch_edge / 2;
  const int search_half = params.search_edge / 2;
  const auto centres = ordered_offsets(search_half);
  std::vector<Offset> patch;
  for (int dz = -patch_half; dz <= patch_half; ++dz) {
    for (int dy = -patch_half; dy <= patch_half; ++dy) {
      for (int dx = -patch_half; dx <= patch_half; ++dx) patch.push_back({dx, dy, dz});
    }
  }

  LabelVolume out(task.intensity.grid(), task.label_count);
  std::vector<Offset> valid;
  std::vector<float> target;
  for (std::int64_t z = 0; z < t.size.z; ++z) {
    for (std::int64_t y = 0; y < t.size.y; ++y) {
      for (std::int64_t x = 0; x < t.size.x; ++x) {
        valid.clear();
        target.clear();
        for (const auto& o : patch) {
          const auto px = x + o.dx, py = y + o.dy, pz = z + o.dz;
          if (px < 0 || py < 0 || pz < 0 || px >= t.size.x || py >= t.size.y || pz >= t.size.z) continue;
          valid.push_back(o);
          target.push_back(task.intensity(px, py, pz));
        }
        const std::int64_t cx = t.corner.x + x, cy = t.corner.y + y, cz = t.corner.z + z;
        double best = std::numeric_limits<double>::infinity();
        Label best_label = 0;
        for (const auto& atlas : atlases) {
          for (const auto& c : centres) {
            const std::int64_t ax = cx + c.dx, ay = cy + c.dy, az = cz + c.dz;
            if (ax < 0 || ay < 0 || az < 0 || ax >= cd.x || ay >= cd.y || az >= cd.z) continue;
            double d = 0.0;
            for (std::size_t k = 0; k < valid.size() && d < best; ++k) {
              const double diff = target[k] - atlas.intensity(clamp_axis(ax + valid[k].dx, cd.x),
                                                              clamp_axis(ay + valid[k].dy, cd.y),
                                                              clamp_axis(az + valid[k].dz, cd.z));
              d += diff * diff;
            }
            if (d < best) {
              best = d;
              best_label = atlas.labels(ax, ay, az);
            }
          }
        }
        out(x, y, z) = best_label;
      }
    }
  }
  return out;
}

std::string make_manifest(const TileTask& task) {
  nlohmann::json j;
  j["protocol_version"] = 1;
  j["tile_index"] = task.tile.index;
  j["corner"] = {task.tile.corner.x, task.tile.corner.y, task.tile.corner.z};
  j["size"] = {task.tile.size.x, task.tile.size.y, task.tile.size.z};
  j["label_count"] = task.label_count;
  j["input_volume"] = "input.nii";
  j["output_volume"] = "output.nii";
  j["canonical_dims"] = {task.canonical_dims.x, task.canonical_dims.y, task.canonical_dims.z};
  return j.dump(2);
}

LabelVolume segment_external(const TileTask& task, const SegmenterSpec& spec) {
  if (spec.kind != SegmenterKind::external) {
    throw Error(ErrorCode::invalid_argument, "segment_external called with a non-external spec");
  }
  if (spec.external.command.empty()) throw Error(ErrorCode::configuration, "external segmenter has no command");
  if (task.intensity.dims() != task.tile.size) {
    throw Error(ErrorCode::geometry_mismatch, "tile intensity dims do not match the sub-space size");
  }
  const int index = task.tile.index;
  const auto dir = make_work_dir(spec.external.work_root, index);
  const auto manifest_path = std::filesystem::absolute(dir / "manifest.json");
  store_nifti(task.intensity, dir / "input.nii");
  {
    std::ofstream out(manifest_path);
    out << make_manifest(task) << '\n';
    if (!out) throw Error(ErrorCode::write_failure, "cannot write plugin manifest " + manifest_path.string());
  }
  const auto stderr_path = dir / "stderr.log";
  const std::string command = spec.external.command + " " + shell_quote(manifest_path.string());
  const ProcessResult run = run_shell(command, dir, stderr_path, spec.external.timeout_seconds);
  if (run.timed_out) {
    throw Error(ErrorCode::timeout, "tile " + std::to_string(index) + ": plugin timed out after " +
                                        std::to_string(spec.external.timeout_seconds) + " s");
  }
  if (run.exit_code != 0) {
    std::ostringstream msg;
    msg << "tile " << index << ": plugin exited with code " << run.exit_code;
    const auto err = read_tail(stderr_path);
    if (!err.empty()) msg << ": " << err;
    throw Error(ErrorCode::plugin_failure, msg.str());
  }
  const auto output_path = dir / "output.nii";
  if (!std::filesystem::exists(output_path)) {
    throw Error(ErrorCode::protocol_violation, "tile " + std::to_string(index) + ": plugin wrote no output.nii");
  }
  LabelVolume raw;
  try {
    raw = read_labels(output_path, task.label_count);
  } catch (const Error& e) {
    throw Error(ErrorCode::protocol_violation, "tile " + std::to_string(index) + ": invalid plugin output: " + e.what());
  }
  if (raw.dims() != task.tile.size) {
    throw Error(ErrorCode::protocol_violation, "tile " + std::to_string(index) + ": plugin output dims " +
                                                   to_string(raw.dims()) + " != tile size " +
                                                   to_string(task.tile.size));
  }
  std::vector<Label> data(raw.data().begin(), raw.data().end());
  return LabelVolume(task.intensity.grid(), std::move(data), task.label_count);
}

LabelVolume segment_tile(const TileTask& task, const SegmenterSpec& spec, std::span<const Atlas> atlases) {
  switch (spec.kind) {
    case SegmenterKind::prior: return segment_prior(task, atlases);
    case SegmenterKind::knn: return segment_knn(task, atlases, spec.knn);
    case SegmenterKind::external: return segment_external(task, spec);
  }
  throw Error(ErrorCode::invalid_argument, "unknown segmenter kind");
}

LabelVolume quantile_bin_labels(const Volume& intensity, int label_count) {
  if (label_count < 1) throw Error(ErrorCode::invalid_argument, "label_count must be >= 1");
  std::vector<float> sorted(intensity.data().begin(), intensity.data().end());
  std::sort(sorted.begin(), sorted.end());
  const auto n = static_cast<std::uint64_t>(sorted.size());
  LabelVolume out(intensity.grid(), label_count);
  for (std::size_t i = 0; i < intensity.size(); ++i) {
    const auto rank = static_cast<std::uint64_t>(std::lower_bound(sorted.begin(), sorted.end(), intensity[i]) -
                                                 sorted.begin());
    const auto bin = std::min<std::uint64_t>(static_cast<std::uint64_t>(label_count) * rank / n,
                                             static_cast<std::uint64_t>(label_count - 1));
    out[i] = static_cast<Label>(bin);
  }
  return out;
}

LabelVolume threshold_labels(const Volume& intensity, double threshold, int label_count) {
  if (label_count < 2) throw Error(ErrorCode::invalid_argument, "threshold rule needs label_count >= 2");
  LabelVolume out(intensity.grid(), label_count);
  for (std::size_t i = 0; i < intensity.size(); ++i) out[i] = intensity[i] > threshold ? 1 : 0;
  return out;
}

}  // namespace tilefuse
