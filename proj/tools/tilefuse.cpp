// tilefuse command line: fit, segment, batch, phantom, evaluate.
//
// Exit codes: 0 ok, 1 at least one batch scan failed, 2 configuration
// error, 3 anything else.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tilefuse/error.hpp"
#include "tilefuse/pipeline.hpp"

namespace fs = std::filesystem;
using namespace tilefuse;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitBatchFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitInternal = 3;

std::vector<double> parse_numbers(const std::string& text, std::size_t expected, const std::string& flag) {
  std::vector<double> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw Error(ErrorCode::configuration, flag + ": '" + item + "' is not a number");
    }
  }
  if (expected != 0 && out.size() != expected) {
    throw Error(ErrorCode::configuration, flag + " expects " + std::to_string(expected) + " comma-separated values");
  }
  return out;
}

Dims parse_dims(const std::string& text, const std::string& flag) {
  const auto v = parse_numbers(text, 3, flag);
  Dims d;
  for (int a = 0; a < 3; ++a) {
    if (v[a] != std::floor(v[a])) throw Error(ErrorCode::configuration, flag + " expects integers");
    d[a] = static_cast<std::int64_t>(v[a]);
  }
  return d;
}

Vec3 parse_vec(const std::string& text, const std::string& flag) {
  const auto v = parse_numbers(text, 3, flag);
  return {v[0], v[1], v[2]};
}

// Flags shared by segment and batch. Strings so that "given" can be told
// apart from defaults; the config file fills the rest.
struct SegmentFlags {
  std::string config;
  std::string input;
  std::string model_dir;
  std::string template_path;
  std::string lattice;
  std::string tile_size;
  std::string tile_counts;
  std::string segmenter;
  std::string plugin_cmd;
  double plugin_timeout = 0.0;
  int labels = 0;
  int jobs = 1;
  std::string pre_hook;
  std::string output_dir;
  bool keep = false;
  bool purge = false;
  int atlas_count = 15;
  double patch_mm = 3.0;
  double search_mm = 5.0;
  int reg_levels = 3;
  int reg_iters = 600;
  int reg_dof = 12;

  std::map<std::string, CLI::Option*> opts;

  void add(CLI::App* app, bool with_input) {
    opts["config"] = app->add_option("--config", config, "JSON config file (flags override it)");
    if (with_input) opts["input"] = app->add_option("--input", input, "Scan to segment (NIfTI)");
    opts["model_dir"] = app->add_option("--model-dir", model_dir, "Model directory written by 'fit'");
    opts["template"] = app->add_option("--template", template_path, "Template; must match the model's grid");
    opts["lattice"] = app->add_option("--lattice", lattice, "slant8 | slant27 | custom")
                          ->check(CLI::IsMember({"slant8", "slant27", "custom"}));
    opts["tile_size"] = app->add_option("--tile-size", tile_size, "X,Y,Z tile size for a custom lattice");
    opts["tile_counts"] = app->add_option("--tile-counts", tile_counts, "X,Y,Z tile counts for a custom lattice");
    opts["segmenter"] = app->add_option("--segmenter", segmenter, "prior | knn | external")
                            ->check(CLI::IsMember({"prior", "knn", "external"}));
    opts["plugin_cmd"] = app->add_option("--plugin-cmd", plugin_cmd, "External segmenter command");
    opts["plugin_timeout"] = app->add_option("--plugin-timeout", plugin_timeout, "Seconds per tile, 0 = none");
    opts["labels"] = app->add_option("--labels", labels, "Label count L (default: the model's)");
    opts["jobs"] = app->add_option("--jobs", jobs, "Parallelism");
    opts["pre_hook"] = app->add_option("--pre-hook", pre_hook, "Command run as: CMD <input> <output>");
    opts["output_dir"] = app->add_option("--output-dir", output_dir, "Output directory");
    opts["keep"] = app->add_flag("--keep-intermediates", keep, "Keep stage artifacts (default)");
    opts["purge"] = app->add_flag("--purge-intermediates", purge, "Delete stage artifacts after success");
    opts["atlas_count"] = app->add_option("--atlas-count", atlas_count, "Atlases to select (default 15)");
    opts["patch_mm"] = app->add_option("--patch-mm", patch_mm, "knn patch edge in mm (default 3)");
    opts["search_mm"] = app->add_option("--search-mm", search_mm, "knn search edge in mm (default 5)");
    opts["reg_levels"] = app->add_option("--reg-levels", reg_levels, "Registration pyramid levels");
    opts["reg_iters"] = app->add_option("--reg-iters", reg_iters, "Registration iterations per level");
    opts["reg_dof"] = app->add_option("--reg-dof", reg_dof, "Registration degrees of freedom (9 or 12)");
    app->get_option("--keep-intermediates")->excludes("--purge-intermediates");
  }

  bool given(const std::string& key) const {
    const auto it = opts.find(key);
    return it != opts.end() && it->second->count() > 0;
  }

  PipelineConfig resolve() const {
    PipelineConfig c = config.empty() ? PipelineConfig{} : PipelineConfig::from_file(config);
    if (given("input")) c.input = input;
    if (given("model_dir")) c.model_dir = model_dir;
    if (given("template")) c.template_path = template_path;
    if (given("lattice")) c.lattice = lattice;
    if (given("tile_size")) c.tile_size = parse_dims(tile_size, "--tile-size");
    if (given("tile_counts")) c.tile_counts = parse_dims(tile_counts, "--tile-counts");
    if (given("segmenter")) c.segmenter = segmenter;
    if (given("plugin_cmd")) c.plugin_cmd = plugin_cmd;
    if (given("plugin_timeout")) c.plugin_timeout = plugin_timeout;
    if (given("labels")) c.label_count = labels;
    if (given("jobs")) c.jobs = jobs;
    if (given("pre_hook")) c.pre_hook = pre_hook;
    if (given("output_dir")) c.output_dir = output_dir;
    if (given("keep")) c.keep_intermediates = true;
    if (given("purge")) c.keep_intermediates = false;
    if (given("atlas_count")) c.atlas_count = atlas_count;
    if (given("patch_mm")) c.patch_mm = patch_mm;
    if (given("search_mm")) c.search_mm = search_mm;
    if (given("reg_levels")) c.registration.levels = reg_levels;
    if (given("reg_iters")) c.registration.max_iters = reg_iters;
    if (given("reg_dof")) c.registration.dof = reg_dof;
    return c;
  }
};

AtlasInput parse_atlas(const std::string& text) {
  std::vector<std::string> parts;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) parts.push_back(item);
  if (parts.size() != 2 && parts.size() != 3) {
    throw Error(ErrorCode::configuration, "--atlas expects T1,LABELS[,ID], got '" + text + "'");
  }
  AtlasInput a;
  a.intensity = parts[0];
  a.labels = parts[1];
  if (parts.size() == 3) {
    a.id = parts[2];
  } else {
    std::string stem = a.intensity.filename().string();
    for (const std::string ext : {".gz", ".nii"}) {
      if (stem.size() > ext.size() && stem.ends_with(ext)) stem.resize(stem.size() - ext.size());
    }
    a.id = stem;
  }
  return a;
}

std::vector<AtlasInput> read_atlas_list(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::configuration, "cannot read atlas list " + path.string());
  std::vector<AtlasInput> out;
  for (std::string line; std::getline(in, line);) {
    std::stringstream ss(line);
    std::string id, t1, labels;
    if (!(ss >> id) || id[0] == '#') continue;
    if (!(ss >> t1 >> labels)) throw Error(ErrorCode::configuration, "atlas list line needs: ID T1 LABELS");
    out.push_back({id, t1, labels});
  }
  return out;
}

int exit_code_for(const Error& e) {
  switch (e.code()) {
    case ErrorCode::configuration:
    case ErrorCode::spec:
      return kExitConfig;
    default:
      return kExitInternal;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tilefuse: tiled whole-brain segmentation with majority-vote label fusion"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "tilefuse 0.1.0");

  // fit
  auto* fit_cmd = app.add_subcommand("fit", "Build a model directory from labelled atlases");
  std::string fit_template, fit_out, fit_list;
  std::vector<std::string> fit_atlases;
  int fit_labels = 0;
  int fit_jobs = 1;
  bool fit_register = false;
  bool fit_single = false;
  fit_cmd->add_option("--template", fit_template, "Template volume defining the canonical grid")->required();
  fit_cmd->add_option("--atlas", fit_atlases, "T1,LABELS[,ID] (repeatable)");
  fit_cmd->add_option("--atlas-list", fit_list, "Whitespace-separated lines: ID T1 LABELS");
  fit_cmd->add_option("--output-dir,--model-dir", fit_out, "Model directory to write")->required();
  fit_cmd->add_option("--labels", fit_labels, "Label count L (default: largest label + 1)");
  fit_cmd->add_option("--jobs", fit_jobs, "Registration parallelism");
  fit_cmd->add_flag("--register-atlases", fit_register, "Register atlases even when already on the template grid");
  fit_cmd->add_flag("--allow-single-atlas", fit_single, "Accept one atlas (degenerate selection manifold)");

  // segment / batch
  auto* seg_cmd = app.add_subcommand("segment", "Segment one scan");
  SegmentFlags seg_flags;
  seg_flags.add(seg_cmd, true);

  auto* batch_cmd = app.add_subcommand("batch", "Segment every scan in a list");
  SegmentFlags batch_flags;
  std::string batch_list;
  batch_flags.add(batch_cmd, false);
  batch_cmd->add_option("--scans", batch_list, "File with one scan path per line")->required();

  // phantom
  auto* ph_cmd = app.add_subcommand("phantom", "Write a synthetic phantom and its ground-truth labels");
  std::string ph_out, ph_dims = "96,96,96", ph_spacing = "1,1,1", ph_rot = "0,0,0", ph_trans = "0,0,0",
                      ph_scale = "1,1,1";
  PhantomSpec ph_spec;
  ph_cmd->add_option("--output", ph_out, "Output prefix; writes PREFIX_t1.nii and PREFIX_labels.nii")->required();
  ph_cmd->add_option("--dims", ph_dims, "X,Y,Z (default 96,96,96)");
  ph_cmd->add_option("--spacing", ph_spacing, "mm per voxel (default 1,1,1)");
  ph_cmd->add_option("--labels", ph_spec.label_count, "Label count including background (default 6)");
  ph_cmd->add_option("--seed", ph_spec.seed, "Noise seed");
  ph_cmd->add_option("--noise", ph_spec.noise_std, "Gaussian noise std relative to the intensity range");
  ph_cmd->add_option("--bias", ph_spec.bias_amplitude, "Peak relative bias-field deviation");
  ph_cmd->add_option("--rotate", ph_rot, "Rotation about x,y,z in degrees");
  ph_cmd->add_option("--translate", ph_trans, "Translation x,y,z in mm");
  ph_cmd->add_option("--scale", ph_scale, "Scale x,y,z");

  // evaluate
  auto* ev_cmd = app.add_subcommand("evaluate", "Score predicted labels against ground truth");
  EvaluateOptions ev;
  std::vector<std::string> ev_preds, ev_methods;
  std::string ev_truth, ev_names, ev_transform, ev_out, ev_deltas;
  ev_cmd->add_option("--pred", ev_preds, "Predicted label volume (repeatable)")->required();
  ev_cmd->add_option("--method", ev_methods, "Name per --pred (default: file stem)");
  ev_cmd->add_option("--truth", ev_truth, "Ground-truth label volume")->required();
  ev_cmd->add_option("--names", ev_names, "Label names file: 'id name' per line");
  ev_cmd->add_option("--transform", ev_transform, "Prediction-world to truth-world transform file");
  ev_cmd->add_option("--output-dir", ev_out, "Report directory")->required();
  ev_cmd->add_option("--deltas", ev_deltas, "Comma-separated best-within-delta thresholds");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*fit_cmd) {
      FitOptions o;
      o.template_path = fit_template;
      o.output_dir = fit_out;
      o.label_count = fit_labels;
      o.register_atlases = fit_register;
      o.allow_single_atlas = fit_single;
      o.registration.jobs = fit_jobs;
      for (const auto& a : fit_atlases) o.atlases.push_back(parse_atlas(a));
      if (!fit_list.empty()) {
        for (auto& a : read_atlas_list(fit_list)) o.atlases.push_back(std::move(a));
      }
      if (o.atlases.empty()) throw Error(ErrorCode::configuration, "fit needs --atlas or --atlas-list");
      if (!fs::is_regular_file(o.template_path)) {
        throw Error(ErrorCode::configuration, "template not found: " + o.template_path.string());
      }
      const ModelInfo info = fit_model(o);
      std::cout << "model written to " << info.dir.string() << " (" << info.atlases.size() << " atlases, L="
                << info.label_count << ")\n";
      return kExitOk;
    }
    if (*seg_cmd) {
      const PipelineConfig c = seg_flags.resolve();
      const SegmentOutcome r = segment_scan(c);
      std::cout << "labels written to " << r.labels_path.string() << " (" << r.segmenter_invocations
                << " tiles, " << r.warnings.size() << " warnings)\n";
      return kExitOk;
    }
    if (*batch_cmd) {
      const PipelineConfig c = batch_flags.resolve();
      const auto entries = batch_segment(c, batch_list);
      std::size_t failed = 0;
      for (const auto& e : entries) failed += e.ok ? 0 : 1;
      std::cout << entries.size() - failed << " of " << entries.size() << " scans segmented; summary in "
                << (c.output_dir / "summary.tsv").string() << "\n";
      return failed == 0 ? kExitOk : kExitBatchFailure;
    }
    if (*ph_cmd) {
      ph_spec.dims = parse_dims(ph_dims, "--dims");
      ph_spec.spacing = parse_vec(ph_spacing, "--spacing");
      const Vec3 deg = parse_vec(ph_rot, "--rotate");
      const double k = std::numbers::pi / 180.0;
      ph_spec.misalignment.rotation = {deg.x * k, deg.y * k, deg.z * k};
      ph_spec.misalignment.translation = parse_vec(ph_trans, "--translate");
      ph_spec.misalignment.scale = parse_vec(ph_scale, "--scale");
      const PhantomFiles files = write_phantom(ph_spec, ph_out);
      std::cout << files.intensity.string() << "\n" << files.labels.string() << "\n";
      return kExitOk;
    }
    if (*ev_cmd) {
      for (const auto& p : ev_preds) ev.predictions.emplace_back(p);
      ev.method_names = ev_methods;
      ev.truth = ev_truth;
      ev.label_names = ev_names;
      ev.transform = ev_transform;
      ev.output_dir = ev_out;
      if (!ev_deltas.empty()) ev.deltas = parse_numbers(ev_deltas, 0, "--deltas");
      const auto r = evaluate_files(ev);
      std::cout << "evaluated " << r.methods.size() << " prediction(s); reports in " << ev_out << "\n";
      return kExitOk;
    }
  } catch (const Error& e) {
    std::cerr << "tilefuse: " << to_string(e.code()) << ": " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "tilefuse: internal error: " << e.what() << "\n";
    return kExitInternal;
  }
  return kExitInternal;
}
