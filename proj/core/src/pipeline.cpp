#include "tilefuse/pipeline.hpp"

#include <zlib.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "tilefuse/fusion.hpp"
#include "tilefuse/log.hpp"
#include "tilefuse/metrics.hpp"
#include "tilefuse/nifti.hpp"
#include "tilefuse/parallel.hpp"
#include "tilefuse/process.hpp"
#include "tilefuse/resample.hpp"

namespace tilefuse {
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr const char* kModelFormat = "tilefuse-model";
constexpr int kModelVersion = 1;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string file_stem(const fs::path& p) {
  std::string name = p.filename().string();
  for (const char* ext : {".gz", ".nii"}) {
    const std::string e(ext);
    if (name.size() > e.size() && name.compare(name.size() - e.size(), e.size(), e) == 0) {
      name.resize(name.size() - e.size());
    }
  }
  return name;
}

bool safe_name(const std::string& s) {
  if (s.empty() || s == "." || s == "..") return false;
  return std::all_of(s.begin(), s.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) != 0 || c == '_' || c == '-' || c == '.';
  });
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::configuration, "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  out.close();
  if (!out) throw Error(ErrorCode::write_failure, "cannot write " + path.string());
}

std::string crc_hex(std::uint32_t crc) {
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08x", crc);
  return buf;
}

json dims_json(const Dims& d) { return json::array({d.x, d.y, d.z}); }

Dims dims_from_json(const json& j, const std::string& key) {
  if (!j.is_array() || j.size() != 3) {
    throw Error(ErrorCode::configuration, "'" + key + "' must be an array of 3 integers");
  }
  Dims d;
  for (int a = 0; a < 3; ++a) {
    if (!j[a].is_number_integer()) throw Error(ErrorCode::configuration, "'" + key + "' must hold integers");
    d[a] = j[a].get<std::int64_t>();
  }
  return d;
}

// Replaces the grid of a volume that already sits on the template lattice, so
// downstream geometry checks compare against one exact affine.
template <typename T>
Image<T> on_grid(const Image<T>& v, const Grid& grid) {
  return Image<T>(grid, std::vector<T>(v.data().begin(), v.data().end()));
}

LabelVolume on_grid(const LabelVolume& v, const Grid& grid, int label_count) {
  return LabelVolume(grid, std::vector<Label>(v.data().begin(), v.data().end()), label_count);
}

LabelVolume binary_map(const LabelVolume& labels) {
  std::vector<Label> bits(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) bits[i] = labels[i] > 0 ? 1 : 0;
  return LabelVolume(labels.grid(), std::move(bits), 2);
}

// Runs one pipeline stage, records its wall time and prefixes failures with
// the stage name.
class StageRunner {
 public:
  explicit StageRunner(std::vector<StageTiming>& timings) : timings_(timings) {}

  template <typename F>
  void operator()(const std::string& name, F&& body) {
    const auto start = Clock::now();
    log::info("stage " + name);
    try {
      body();
    } catch (const Error& e) {
      throw Error(e.code(), "stage " + name + ": " + e.what());
    } catch (const fs::filesystem_error& e) {
      throw Error(ErrorCode::write_failure, "stage " + name + ": " + e.what());
    }
    timings_.push_back({name, seconds_since(start)});
  }

 private:
  std::vector<StageTiming>& timings_;
};

std::string tile_prefixed(int index, const std::string& message) {
  const std::string prefix = "tile " + std::to_string(index) + ":";
  if (message.rfind(prefix, 0) == 0) return message;
  return prefix + " " + message;
}

TileLattice lattice_for(const PipelineConfig& config, Dims dims) {
  try {
    if (config.lattice == "custom") return make_lattice(dims, *config.tile_counts, *config.tile_size);
    return preset_lattice(config.lattice, dims);
  } catch (const Error& e) {
    throw Error(ErrorCode::configuration, std::string("lattice: ") + e.what());
  }
}

}  // namespace

std::uint32_t file_crc32(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::corrupt_file, "cannot read " + path.string());
  uLong crc = crc32(0L, Z_NULL, 0);
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    const auto got = in.gcount();
    if (got > 0) crc = crc32(crc, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(got));
  }
  return static_cast<std::uint32_t>(crc);
}

// ---------------------------------------------------------------- fit

ModelInfo fit_model(const FitOptions& options) {
  if (options.atlases.empty()) throw Error(ErrorCode::insufficient_data, "fit needs at least one atlas");
  if (options.output_dir.empty()) throw Error(ErrorCode::configuration, "fit needs an output directory");
  if (options.label_count == 1 || options.label_count < 0) {
    throw Error(ErrorCode::configuration, "label count must be >= 2");
  }
  std::set<std::string> ids;
  for (const auto& a : options.atlases) {
    if (!safe_name(a.id)) throw Error(ErrorCode::configuration, "atlas id '" + a.id + "' is not a plain file name");
    if (!ids.insert(a.id).second) throw Error(ErrorCode::configuration, "duplicate atlas id '" + a.id + "'");
  }

  const Volume raw_template = read_volume(options.template_path);
  const Grid& grid = raw_template.grid();

  std::vector<Volume> intensities;
  std::vector<LabelVolume> raw_labels;
  int label_count = options.label_count;
  for (const auto& a : options.atlases) {
    try {
      Volume t1 = read_volume(a.intensity);
      LabelVolume labels = read_labels(a.labels);
      if (!t1.grid().same_as(labels.grid())) {
        throw Error(ErrorCode::geometry_mismatch, "intensity and label grids differ (" + to_string(t1.dims()) +
                                                      " vs " + to_string(labels.dims()) + ")");
      }
      if (options.label_count == 0) label_count = std::max(label_count, labels.label_count());
      if (t1.grid().same_as(grid) && !options.register_atlases) {
        intensities.push_back(on_grid(t1, grid));
        raw_labels.push_back(std::move(labels));
        continue;
      }
      const auto reg = estimate_affine(t1, raw_template, options.registration);
      log::info("atlas " + a.id + " registered, ncc " + std::to_string(reg.similarity));
      intensities.push_back(resample(t1, reg.transform, grid, Interp::trilinear, options.registration.jobs));
      raw_labels.push_back(resample(labels, reg.transform, grid, Interp::nearest, options.registration.jobs));
    } catch (const Error& e) {
      throw Error(e.code(), "atlas '" + a.id + "': " + e.what());
    }
  }
  label_count = std::max(label_count, 2);

  std::vector<LabelVolume> labels;
  std::vector<LabelVolume> maps;
  for (std::size_t i = 0; i < raw_labels.size(); ++i) {
    try {
      labels.push_back(on_grid(raw_labels[i], grid, label_count));
    } catch (const Error& e) {
      throw Error(e.code(), "atlas '" + options.atlases[i].id + "': " + e.what());
    }
    maps.push_back(binary_map(labels.back()));
  }

  const BrainMask mask = build_mask(maps);
  const HarmonizationModel harmonization = build_model(intensities, mask);

  std::vector<NamedVolume> named;
  for (std::size_t i = 0; i < intensities.size(); ++i) named.push_back({options.atlases[i].id, intensities[i]});
  PcaManifold manifold;
  if (named.size() == 1 && options.allow_single_atlas) {
    manifold = degenerate_manifold({named[0].id}, mask);
  } else {
    manifold = build_manifold(named, mask);
  }

  const fs::path& dir = options.output_dir;
  fs::create_directories(dir / "atlases");
  std::map<std::string, std::string> files;  // relative path -> crc
  auto record = [&](const std::string& rel) { files[rel] = crc_hex(file_crc32(dir / rel)); };

  store_nifti(on_grid(raw_template, grid), dir / "template.nii");
  record("template.nii");
  ModelInfo info{dir, label_count, grid, {}};
  json atlases = json::array();
  for (std::size_t i = 0; i < intensities.size(); ++i) {
    const std::string& id = options.atlases[i].id;
    const std::string t1 = "atlases/" + id + "_t1.nii";
    const std::string lab = "atlases/" + id + "_labels.nii";
    store_nifti(intensities[i], dir / t1);
    store_nifti(labels[i], dir / lab);
    record(t1);
    record(lab);
    atlases.push_back({{"id", id}, {"intensity", t1}, {"labels", lab}});
    info.atlases.push_back({id, t1, lab});
  }
  save_model(harmonization, dir / "harmonization.bin");
  record("harmonization.bin");
  save_manifold(manifold, dir / "manifold.bin");
  record("manifold.bin");

  json j;
  j["format"] = kModelFormat;
  j["version"] = kModelVersion;
  j["label_count"] = label_count;
  j["template"] = "template.nii";
  j["dims"] = dims_json(grid.dims);
  j["atlases"] = atlases;
  j["mask_voxels"] = mask.voxel_count();
  j["manifold_components"] = manifold.component_count();
  j["manifold_degenerate"] = manifold.degenerate;
  j["files"] = files;
  write_text(dir / "model.json", j.dump(2) + "\n");
  return info;
}

ModelInfo read_model_info(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error(ErrorCode::configuration, "model directory not found: " + dir.string());
  const fs::path manifest = dir / "model.json";
  if (!fs::is_regular_file(manifest)) {
    throw Error(ErrorCode::configuration, "no model.json in " + dir.string());
  }
  json j;
  try {
    j = json::parse(read_file(manifest));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::corrupt_file, "model.json: " + std::string(e.what()));
  }
  try {
    if (j.at("format") != kModelFormat || j.at("version") != kModelVersion) {
      throw Error(ErrorCode::format, "model.json has an unknown format or version");
    }
    for (const auto& [rel, crc] : j.at("files").items()) {
      const fs::path p = dir / rel;
      if (!fs::is_regular_file(p)) throw Error(ErrorCode::corrupt_file, "model file missing: " + rel);
      const std::string actual = crc_hex(file_crc32(p));
      if (actual != crc.get<std::string>()) {
        throw Error(ErrorCode::corrupt_file,
                    "checksum mismatch for " + rel + " (expected " + crc.get<std::string>() + ", found " + actual + ")");
      }
    }
    ModelInfo info;
    info.dir = dir;
    info.label_count = j.at("label_count").get<int>();
    info.grid = read_volume(dir / j.at("template").get<std::string>()).grid();
    for (const auto& a : j.at("atlases")) {
      info.atlases.push_back({a.at("id").get<std::string>(), a.at("intensity").get<std::string>(),
                              a.at("labels").get<std::string>()});
    }
    return info;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::corrupt_file, "model.json: " + std::string(e.what()));
  }
}

LoadedModel load_model_dir(const fs::path& dir) {
  LoadedModel model;
  model.info = read_model_info(dir);
  model.template_volume = read_volume(dir / "template.nii");
  model.info.grid = model.template_volume.grid();
  model.harmonization = load_model(dir / "harmonization.bin", model.info.grid);
  model.manifold = load_manifold(dir / "manifold.bin", model.harmonization.mask);
  for (const auto& a : model.info.atlases) {
    Volume t1 = read_volume(dir / a.intensity);
    LabelVolume labels = read_labels(dir / a.labels, model.info.label_count);
    require_same_grid(t1.grid(), model.info.grid, "atlas '" + a.id + "' intensity");
    require_same_grid(labels.grid(), model.info.grid, "atlas '" + a.id + "' labels");
    model.atlases.push_back({a.id, znormalize(t1), std::move(labels)});
  }
  if (model.manifold.atlas_ids.size() != model.atlases.size()) {
    throw Error(ErrorCode::corrupt_file, "manifold and model.json disagree on the atlas count");
  }
  return model;
}

// ---------------------------------------------------------------- config

PipelineConfig PipelineConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::configuration, std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw Error(ErrorCode::configuration, "config must be a JSON object");
  PipelineConfig c;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "input") c.input = v.get<std::string>();
      else if (key == "model_dir") c.model_dir = v.get<std::string>();
      else if (key == "template") c.template_path = v.get<std::string>();
      else if (key == "lattice") c.lattice = v.get<std::string>();
      else if (key == "tile_size") c.tile_size = dims_from_json(v, key);
      else if (key == "tile_counts") c.tile_counts = dims_from_json(v, key);
      else if (key == "segmenter") c.segmenter = v.get<std::string>();
      else if (key == "plugin_cmd") c.plugin_cmd = v.get<std::string>();
      else if (key == "plugin_timeout") c.plugin_timeout = v.get<double>();
      else if (key == "patch_mm") c.patch_mm = v.get<double>();
      else if (key == "search_mm") c.search_mm = v.get<double>();
      else if (key == "labels") c.label_count = v.get<int>();
      else if (key == "jobs") c.jobs = v.get<int>();
      else if (key == "pre_hook") c.pre_hook = v.get<std::string>();
      else if (key == "output_dir") c.output_dir = v.get<std::string>();
      else if (key == "keep_intermediates") c.keep_intermediates = v.get<bool>();
      else if (key == "atlas_count") c.atlas_count = v.get<int>();
      else if (key == "registration") {
        for (const auto& [rk, rv] : v.items()) {
          if (rk == "dof") c.registration.dof = rv.get<int>();
          else if (rk == "levels") c.registration.levels = rv.get<int>();
          else if (rk == "max_iters") c.registration.max_iters = rv.get<int>();
          else throw Error(ErrorCode::configuration, "unknown registration key '" + rk + "'");
        }
      } else {
        throw Error(ErrorCode::configuration, "unknown config key '" + key + "'");
      }
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::configuration, std::string("config value has the wrong type: ") + e.what());
  }
  return c;
}

PipelineConfig PipelineConfig::from_file(const fs::path& path) { return from_json(read_file(path)); }

std::string PipelineConfig::to_json() const {
  json j;
  j["input"] = input.string();
  j["model_dir"] = model_dir.string();
  j["template"] = template_path.string();
  j["lattice"] = lattice;
  if (tile_size) j["tile_size"] = dims_json(*tile_size);
  if (tile_counts) j["tile_counts"] = dims_json(*tile_counts);
  j["segmenter"] = segmenter;
  j["plugin_cmd"] = plugin_cmd;
  j["plugin_timeout"] = plugin_timeout;
  j["patch_mm"] = patch_mm;
  j["search_mm"] = search_mm;
  j["labels"] = label_count;
  j["jobs"] = jobs;
  j["pre_hook"] = pre_hook;
  j["output_dir"] = output_dir.string();
  j["keep_intermediates"] = keep_intermediates;
  j["atlas_count"] = atlas_count;
  j["registration"] = {{"dof", registration.dof},
                       {"levels", registration.levels},
                       {"max_iters", registration.max_iters}};
  return j.dump(2) + "\n";
}

void PipelineConfig::validate() const {
  auto fail = [](const std::string& msg) { throw Error(ErrorCode::configuration, msg); };
  if (input.empty()) fail("no input scan given");
  if (model_dir.empty()) fail("no model directory given");
  if (output_dir.empty()) fail("no output directory given");
  if (lattice != "slant8" && lattice != "slant27" && lattice != "custom") {
    fail("unknown lattice '" + lattice + "' (expected slant8, slant27 or custom)");
  }
  if (lattice == "custom" && (!tile_size || !tile_counts)) fail("custom lattice needs tile_size and tile_counts");
  if (lattice != "custom" && (tile_size || tile_counts)) fail("tile_size/tile_counts only apply to a custom lattice");
  const SegmenterKind kind = parse_segmenter_kind(segmenter);
  if (kind == SegmenterKind::external && plugin_cmd.empty()) fail("external segmenter needs plugin_cmd");
  if (plugin_timeout < 0.0) fail("plugin_timeout must be >= 0");
  if (!(patch_mm > 0.0) || !(search_mm > 0.0)) fail("patch_mm and search_mm must be positive");
  if (label_count != 0 && label_count < 2) fail("labels must be >= 2");
  if (jobs < 1) fail("jobs must be >= 1");
  if (atlas_count < 1) fail("atlas_count must be >= 1");
  if (registration.dof != 9 && registration.dof != 12) fail("registration dof must be 9 or 12");
  if (registration.levels < 1 || registration.max_iters < 1) fail("registration levels and max_iters must be >= 1");
}

// ---------------------------------------------------------------- segment

SegmentOutcome segment_scan(const PipelineConfig& config) {
  config.validate();
  const LoadedModel model = load_model_dir(config.model_dir);
  return segment_scan(config, model);
}

SegmentOutcome segment_scan(const PipelineConfig& config, const LoadedModel& model) {
  config.validate();
  const auto run_start = Clock::now();
  SegmentOutcome out;
  StageRunner stage(out.stages);

  const fs::path& dir = config.output_dir;
  const fs::path inter = dir / "intermediates";
  const int label_count = config.label_count > 0 ? config.label_count : model.info.label_count;
  const Grid& canonical = model.info.grid;
  TileLattice lattice;
  SegmenterSpec spec;
  Volume scan;

  stage("setup", [&] {
    if (!fs::is_regular_file(config.input)) {
      throw Error(ErrorCode::configuration, "input scan not found: " + config.input.string());
    }
    if (!config.template_path.empty()) {
      const Volume t = read_volume(config.template_path);
      if (!t.grid().same_as(canonical)) {
        throw Error(ErrorCode::configuration, "template " + config.template_path.string() +
                                                  " does not match the model's canonical grid");
      }
    }
    if (label_count < model.info.label_count) {
      throw Error(ErrorCode::configuration, "labels " + std::to_string(label_count) + " is below the model's " +
                                                std::to_string(model.info.label_count));
    }
    lattice = lattice_for(config, canonical.dims);
    spec.kind = parse_segmenter_kind(config.segmenter);
    spec.knn = KnnParams::from_mm(config.patch_mm, config.search_mm, canonical.spacing.x);
    spec.external = {config.plugin_cmd, config.plugin_timeout, inter / "plugin"};
    fs::create_directories(dir);
    fs::create_directories(inter);
    write_text(dir / "config.json", config.to_json());
    write_text(dir / "lattice.json", lattice_to_json(lattice) + "\n");
    scan = read_volume(config.input);
  });
  const Grid native = scan.grid();

  if (!config.pre_hook.empty()) {
    stage("pre_hook", [&] {
      const fs::path hooked = inter / "prehook.nii";
      const std::string cmd =
          config.pre_hook + " " + shell_quote(fs::absolute(config.input).string()) + " " + shell_quote(hooked.string());
      const fs::path err = inter / "prehook_stderr.log";
      const ProcessResult r = run_shell(cmd, inter, err);
      if (r.exit_code != 0) {
        throw Error(ErrorCode::plugin_failure,
                    "pre-hook exited with code " + std::to_string(r.exit_code) + ": " + read_tail(err));
      }
      scan = read_volume(hooked);
      if (!scan.grid().same_as(native)) {
        throw Error(ErrorCode::protocol_violation, "pre-hook changed the scan geometry");
      }
    });
  }

  RegistrationConfig reg_config = config.registration;
  reg_config.jobs = config.jobs;
  stage("registration", [&] {
    const auto reg = estimate_affine(scan, model.template_volume, reg_config);
    out.scan_to_canonical = reg.transform;
    out.similarity = reg.similarity;
    write_transform(reg.transform, dir / "scan_to_canonical.txt");
    if (reg.similarity < 0.2) {
      out.warnings.push_back("low registration similarity (NCC " + std::to_string(reg.similarity) + ")");
    }
  });

  Volume canonical_scan;
  stage("canonical_resample", [&] {
    canonical_scan = resample(scan, out.scan_to_canonical, canonical, Interp::trilinear, config.jobs);
    if (config.keep_intermediates) store_nifti(canonical_scan, inter / "canonical.nii");
  });

  Volume harmonized;
  stage("harmonization", [&] {
    const Volume z = znormalize(canonical_scan);
    out.harmonization = fit(model.harmonization, sorted_vector(z, model.harmonization.mask));
    if (!out.harmonization.converged) out.warnings.push_back("harmonization fit did not converge");
    harmonized = apply(out.harmonization, z);
    if (config.keep_intermediates) {
      store_nifti(harmonized, inter / "harmonized.nii");
      json j{{"beta0", out.harmonization.beta0},
             {"beta1", out.harmonization.beta1},
             {"iterations", out.harmonization.iterations},
             {"converged", out.harmonization.converged}};
      write_text(inter / "harmonization.json", j.dump(2) + "\n");
    }
  });

  std::vector<Atlas> chosen;
  stage("atlas_selection", [&] {
    const auto n = std::min<std::size_t>(static_cast<std::size_t>(config.atlas_count), model.atlases.size());
    if (n < static_cast<std::size_t>(config.atlas_count)) {
      out.warnings.push_back("only " + std::to_string(n) + " atlases available (requested " +
                             std::to_string(config.atlas_count) + ")");
    }
    if (model.manifold.degenerate) out.warnings.push_back("atlas manifold is degenerate; atlases taken in id order");
    out.selected_atlases = select_atlases(model.manifold, harmonized, n);
    for (const auto& id : out.selected_atlases) {
      for (const auto& a : model.atlases) {
        if (a.id == id) chosen.push_back(a);
      }
    }
    if (config.keep_intermediates) {
      std::ostringstream s;
      for (const auto& id : out.selected_atlases) s << id << "\n";
      write_text(inter / "selected_atlases.txt", s.str());
    }
  });

  std::vector<TileSegmentation> tile_segs(lattice.size());
  stage("tile_segmentation", [&] {
    if (config.keep_intermediates) fs::create_directories(inter / "tiles");
    if (spec.kind == SegmenterKind::external) fs::create_directories(spec.external.work_root);
    std::atomic<std::size_t> invocations{0};
    // Tiles run in parallel; inner work stays single-threaded so the total
    // thread count is bounded by jobs.
    parallel_for(lattice.size(), config.jobs, [&](std::size_t begin, std::size_t end) {
      for (std::size_t t = begin; t < end; ++t) {
        const SubSpace& s = lattice.tiles[t];
        try {
          TileTask task{s, extract_tile(harmonized, s), label_count, canonical.dims};
          invocations.fetch_add(1);
          LabelVolume labels = segment_tile(task, spec, chosen);
          if (config.keep_intermediates) {
            char name[32];
            std::snprintf(name, sizeof name, "tile_%03d_labels.nii", s.index);
            store_nifti(labels, inter / "tiles" / name);
          }
          tile_segs[t] = {s, std::move(labels)};
        } catch (const Error& e) {
          throw Error(e.code(), tile_prefixed(s.index, e.what()));
        }
      }
    });
    out.segmenter_invocations = invocations.load();
  });

  LabelVolume fused;
  Volume confidence;
  stage("fusion", [&] {
    FusionResult result = fuse(tile_segs, lattice, label_count, canonical, config.jobs);
    out.uncovered_voxels = result.uncovered_voxels;
    if (result.uncovered_voxels > 0) {
      out.warnings.push_back(std::to_string(result.uncovered_voxels) +
                             " canonical voxels lie outside every tile and were left unlabeled");
    }
    confidence = confidence_map(vote_counts(tile_segs, lattice, label_count), result.labels);
    fused = std::move(result.labels);
    if (config.keep_intermediates) store_nifti(fused, inter / "canonical_labels.nii");
  });

  stage("native_resample", [&] {
    const AffineTransform back = invert(out.scan_to_canonical);
    out.labels = resample(fused, back, native, Interp::nearest, config.jobs);
    confidence = resample(confidence, back, native, Interp::nearest, config.jobs);
  });

  stage("write_outputs", [&] {
    out.labels_path = dir / "labels.nii";
    store_nifti(out.labels, out.labels_path);
    store_nifti(confidence, dir / "confidence.nii");
    if (!config.keep_intermediates) fs::remove_all(inter);
  });
  out.total_seconds = seconds_since(run_start);

  ReportInput report;
  report.scan_id = file_stem(config.input);
  report.lattice = config.lattice + " (" + std::to_string(lattice.size()) + " tiles of " +
                   to_string(lattice.tile_size) + ")";
  report.segmenter = config.segmenter;
  report.stages = out.stages;
  report.total_seconds = out.total_seconds;
  report.warnings = out.warnings;
  report.intensity = &scan;
  report.labels = &out.labels;
  try {
    const ReportBundle bundle = emit_report(report, dir / "report");
    out.warnings.insert(out.warnings.end(), bundle.warnings.begin(), bundle.warnings.end());
  } catch (const std::exception& e) {
    out.warnings.push_back(std::string("report not written: ") + e.what());
  }
  for (const auto& w : out.warnings) log::warn(w);
  return out;
}

// ---------------------------------------------------------------- batch

std::vector<BatchEntry> batch_segment(const PipelineConfig& base, const fs::path& list) {
  std::ifstream in(list);
  if (!in) throw Error(ErrorCode::configuration, "cannot read scan list " + list.string());
  std::vector<std::string> scans;
  for (std::string line; std::getline(in, line);) {
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    const auto last = line.find_last_not_of(" \t\r");
    scans.push_back(line.substr(first, last - first + 1));
  }
  if (scans.empty()) throw Error(ErrorCode::configuration, "scan list " + list.string() + " is empty");

  PipelineConfig probe = base;
  if (probe.input.empty()) probe.input = scans.front();
  probe.validate();
  const LoadedModel model = load_model_dir(base.model_dir);
  fs::create_directories(base.output_dir);

  std::vector<BatchEntry> entries;
  std::map<std::string, int> seen;
  for (const auto& scan : scans) {
    std::string name = file_stem(scan);
    if (!safe_name(name)) name = "scan";
    const int n = ++seen[name];
    if (n > 1) name += "_" + std::to_string(n);
    PipelineConfig c = base;
    c.input = scan;
    c.output_dir = base.output_dir / name;
    BatchEntry entry{scan, false, 0.0, ""};
    const auto start = Clock::now();
    try {
      segment_scan(c, model);
      entry.ok = true;
    } catch (const std::exception& e) {
      entry.message = e.what();
      log::error("scan " + scan + " failed: " + entry.message);
    }
    entry.seconds = seconds_since(start);
    entries.push_back(std::move(entry));
  }

  std::ostringstream tsv;
  tsv << "scan\tstatus\twall_seconds\tmessage\n";
  for (const auto& e : entries) {
    std::string msg = e.message;
    std::replace(msg.begin(), msg.end(), '\t', ' ');
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    tsv << e.scan << '\t' << (e.ok ? "ok" : "failed") << '\t' << std::fixed << std::setprecision(3) << e.seconds
        << '\t' << msg << '\n';
  }
  write_text(base.output_dir / "summary.tsv", tsv.str());
  return entries;
}

// ---------------------------------------------------------------- phantom / evaluate

PhantomFiles write_phantom(const PhantomSpec& spec, const fs::path& prefix) {
  const Phantom p = make_phantom(spec);
  if (prefix.has_parent_path()) fs::create_directories(prefix.parent_path());
  PhantomFiles files{prefix.string() + "_t1.nii", prefix.string() + "_labels.nii"};
  store_nifti(p.intensity, files.intensity);
  store_nifti(p.labels, files.labels);
  return files;
}

EvaluateOutcome evaluate_files(const EvaluateOptions& options) {
  if (options.predictions.empty()) throw Error(ErrorCode::configuration, "no prediction given");
  if (!options.method_names.empty() && options.method_names.size() != options.predictions.size()) {
    throw Error(ErrorCode::configuration, "one method name per prediction is required");
  }
  const LabelVolume truth = read_labels(options.truth);
  std::map<int, std::string> names;
  if (!options.label_names.empty()) names = read_label_names(options.label_names);
  std::optional<AffineTransform> transform;
  if (!options.transform.empty()) transform = read_transform(options.transform);

  EvaluateOutcome out;
  fs::create_directories(options.output_dir);
  for (std::size_t i = 0; i < options.predictions.size(); ++i) {
    std::string method = options.method_names.empty() ? file_stem(options.predictions[i]) : options.method_names[i];
    if (!safe_name(method)) throw Error(ErrorCode::configuration, "method name '" + method + "' is not a plain file name");
    LabelVolume pred = read_labels(options.predictions[i]);
    if (transform) {
      pred = resample(pred, *transform, truth.grid(), Interp::nearest);
    } else {
      require_same_grid(pred.grid(), truth.grid(), "prediction " + options.predictions[i].string());
    }
    LabelReport report = evaluate_labels(pred, truth, names);
    write_text(options.output_dir / (method + "_labels.csv"), report_csv(report));
    write_text(options.output_dir / (method + "_summary.json"), report_summary_json(report) + "\n");
    out.methods.push_back(method);
    out.reports.push_back(std::move(report));
  }
  if (out.reports.size() < 2) return out;

  // Labels scored by every method form the comparison columns.
  std::vector<std::size_t> columns;
  for (std::size_t r = 0; r < out.reports.front().rows.size(); ++r) {
    bool all = true;
    for (const auto& rep : out.reports) all = all && r < rep.rows.size() && !rep.rows[r].missing;
    if (all) columns.push_back(r);
  }
  std::vector<std::vector<double>> median(out.reports.size());
  for (std::size_t m = 0; m < out.reports.size(); ++m) {
    for (std::size_t r : columns) median[m].push_back(out.reports[m].rows[r].dsc);
  }

  std::ostringstream best;
  best << "method";
  for (double d : options.deltas) best << "\tdelta_" << d;
  best << "\n";
  if (!columns.empty()) {
    const auto counts = best_within_delta(median, options.deltas);
    for (std::size_t m = 0; m < counts.size(); ++m) {
      best << out.methods[m];
      for (int c : counts[m]) best << '\t' << c;
      best << "\n";
    }
  }
  write_text(options.output_dir / "best_within_delta.tsv", best.str());

  std::ostringstream wil;
  wil << "method_a\tmethod_b\tn_labels\tw_plus\tp_value\tmode\n";
  for (std::size_t a = 0; a < median.size(); ++a) {
    for (std::size_t b = a + 1; b < median.size(); ++b) {
      wil << out.methods[a] << '\t' << out.methods[b] << '\t' << columns.size() << '\t';
      try {
        const auto w = wilcoxon_signed_rank(median[a], median[b]);
        wil << w.w_plus << '\t' << std::setprecision(10) << w.p_value << '\t'
            << (w.degenerate ? "degenerate" : (w.exact ? "exact" : "normal")) << "\n";
      } catch (const Error& e) {
        wil << "\t\t" << "insufficient" << "\n";
      }
    }
  }
  write_text(options.output_dir / "wilcoxon.tsv", wil.str());
  return out;
}

}  // namespace tilefuse
