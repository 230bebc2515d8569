#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tilefuse/atlas_select.hpp"
#include "tilefuse/harmonize.hpp"
#include "tilefuse/phantom.hpp"
#include "tilefuse/registration.hpp"
#include "tilefuse/report.hpp"
#include "tilefuse/segmenter.hpp"
#include "tilefuse/tiling.hpp"

namespace tilefuse {

// ---- model directory ----

struct AtlasInput {
  std::string id;
  std::filesystem::path intensity;
  std::filesystem::path labels;
};

struct FitOptions {
  std::filesystem::path template_path;
  std::vector<AtlasInput> atlases;
  std::filesystem::path output_dir;
  int label_count = 0;  // 0: largest atlas label + 1
  // Atlases already on the template grid are taken as canonical unless this
  // is set; atlases on any other grid are always registered.
  bool register_atlases = false;
  // A single atlas cannot span a PCA manifold. With this set the model keeps
  // a degenerate manifold (selection returns the one atlas) instead of failing.
  bool allow_single_atlas = false;
  RegistrationConfig registration;
};

struct ModelAtlas {
  std::string id;
  std::filesystem::path intensity;  // relative to the model dir
  std::filesystem::path labels;
};

struct ModelInfo {
  std::filesystem::path dir;
  int label_count = 0;
  Grid grid;  // template grid
  std::vector<ModelAtlas> atlases;
};

/// Writes template.nii, atlases/, harmonization.bin, manifold.bin and
/// model.json (file list with CRC-32 checksums). Output is byte-identical
/// for identical inputs.
ModelInfo fit_model(const FitOptions& options);

/// Reads model.json and verifies every listed checksum.
ModelInfo read_model_info(const std::filesystem::path& dir);

struct LoadedModel {
  ModelInfo info;
  Volume template_volume;
  HarmonizationModel harmonization;
  PcaManifold manifold;
  std::vector<Atlas> atlases;  // z-normalized intensities, canonical grid
};

LoadedModel load_model_dir(const std::filesystem::path& dir);

std::uint32_t file_crc32(const std::filesystem::path& path);

// ---- segmentation ----

struct PipelineConfig {
  std::filesystem::path input;
  std::filesystem::path model_dir;
  std::filesystem::path template_path;  // empty: the model's template
  std::string lattice = "slant27";  // slant8 | slant27 | custom
  std::optional<Dims> tile_size;
  std::optional<Dims> tile_counts;
  std::string segmenter = "prior";
  std::string plugin_cmd;
  double plugin_timeout = 0.0;
  double patch_mm = 3.0;
  double search_mm = 5.0;
  int label_count = 0;  // 0: from the model
  int jobs = 1;
  std::string pre_hook;
  std::filesystem::path output_dir;
  bool keep_intermediates = true;
  int atlas_count = 15;
  RegistrationConfig registration;

  /// Unknown keys and malformed values throw ErrorCode::configuration.
  static PipelineConfig from_json(const std::string& text);
  static PipelineConfig from_file(const std::filesystem::path& path);
  std::string to_json() const;

  /// Checks everything that can be checked without touching the model.
  void validate() const;
};

struct SegmentOutcome {
  std::filesystem::path labels_path;
  LabelVolume labels;  // native grid
  AffineTransform scan_to_canonical;
  double similarity = 0.0;
  HarmonizationFit harmonization;
  std::vector<std::string> selected_atlases;
  std::size_t segmenter_invocations = 0;
  std::size_t uncovered_voxels = 0;
  std::vector<StageTiming> stages;
  double total_seconds = 0.0;
  std::vector<std::string> warnings;
};

/// Runs the full flow for config.input and writes into config.output_dir:
/// labels.nii, confidence.nii, scan_to_canonical.txt, lattice.json,
/// config.json, report/ and (unless purged) intermediates/.
/// Stage failures rethrow with the stage name (and tile index) prefixed.
SegmentOutcome segment_scan(const PipelineConfig& config);
SegmentOutcome segment_scan(const PipelineConfig& config, const LoadedModel& model);

struct BatchEntry {
  std::string scan;
  bool ok = false;
  double seconds = 0.0;
  std::string message;
};

/// One line per scan path in `list` ('#' comments and blank lines skipped).
/// Each scan goes to output_dir/<scan stem>/; summary.tsv is written at the
/// end. Failures are recorded and do not stop the batch.
std::vector<BatchEntry> batch_segment(const PipelineConfig& base, const std::filesystem::path& list);

// ---- phantom / evaluation ----

struct PhantomFiles {
  std::filesystem::path intensity;
  std::filesystem::path labels;
};

/// Writes <prefix>_t1.nii and <prefix>_labels.nii.
PhantomFiles write_phantom(const PhantomSpec& spec, const std::filesystem::path& prefix);

struct EvaluateOptions {
  std::vector<std::filesystem::path> predictions;
  std::vector<std::string> method_names;  // defaults to prediction file stems
  std::filesystem::path truth;
  std::filesystem::path label_names;  // optional
  std::filesystem::path transform;  // optional, prediction world -> truth world
  std::filesystem::path output_dir;
  std::vector<double> deltas{0.0, 0.01, 0.02, 0.05};
};

struct EvaluateOutcome {
  std::vector<std::string> methods;
  std::vector<LabelReport> reports;
};

/// Per method: <name>_labels.csv and <name>_summary.json. With two or more
/// methods also best_within_delta.tsv and wilcoxon.tsv (paired per-label DSC).
EvaluateOutcome evaluate_files(const EvaluateOptions& options);

}  // namespace tilefuse
