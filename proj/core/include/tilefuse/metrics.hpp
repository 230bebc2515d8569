#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tilefuse/volume.hpp"

namespace tilefuse {

using MaskVolume = Image<std::uint8_t>;

MaskVolume label_mask(const LabelVolume& labels, Label label);

/// 2|A∩M| / (|A| + |M|); 1 when both are empty.
double dsc(const MaskVolume& a, const MaskVolume& m);

struct VoxelPoint {
  std::int64_t x, y, z;
};

/// Set voxels with at least one of their 6 face neighbours unset or outside
/// the grid.
std::vector<VoxelPoint> surface_points(const MaskVolume& mask);

/// sqrt((dx*sx)^2 + (dy*sy)^2 + (dz*sz)^2) in millimetres.
inline double point_distance(const VoxelPoint& a, const VoxelPoint& b, const Vec3& spacing) {
  const double dx = static_cast<double>(a.x - b.x) * spacing.x;
  const double dy = static_cast<double>(a.y - b.y) * spacing.y;
  const double dz = static_cast<double>(a.z - b.z) * spacing.z;
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

struct SurfaceDistances {
  double msd_directed = 0.0;  // A (automatic) -> M (manual)
  double msd_reverse = 0.0;  // M -> A
  double msd_symmetric = 0.0;  // mean of the two directed values
  double hausdorff = 0.0;
};

/// Surface distances via an exact Euclidean feature transform; nearest
/// points are found by the transform and their distance evaluated with
/// point_distance(). Throws ErrorCode::undefined_distance for an empty mask.
SurfaceDistances surface_distance(const MaskVolume& a, const MaskVolume& m, const Vec3& spacing);

struct WilcoxonResult {
  double p_value = 1.0;
  double w_plus = 0.0;
  std::size_t n_nonzero = 0;
  bool exact = false;
  bool degenerate = false;  // every difference was zero
};

/// Two-sided paired signed-rank test. Zero differences are dropped, tied
/// |differences| share the average rank. Exact null distribution for
/// n <= 25 non-zero pairs, normal approximation with continuity and tie
/// correction above. p = min(1, 2 * min(P(W+ <= w), P(W+ >= w))).
WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& x, const std::vector<double>& y);

/// counts[method][delta] = number of ROIs (columns) whose median for that
/// method is >= column max - delta.
std::vector<std::vector<int>> best_within_delta(const std::vector<std::vector<double>>& median_dsc,
                                                const std::vector<double>& deltas);

struct MdsResult {
  std::vector<std::size_t> order;  // ROI indices sorted by coordinate
  std::vector<double> coordinate;  // per input ROI
  bool degenerate = false;
};

/// Classical MDS of the rows to one dimension; sign chosen so the first
/// row's coordinate is <= the last row's.
MdsResult mds_order(const std::vector<std::vector<double>>& stats);

struct LabelRow {
  int label = 0;
  std::string name;
  std::size_t auto_voxels = 0;
  std::size_t manual_voxels = 0;
  bool missing = false;  // empty in either volume
  double dsc = 0.0;
  double msd = 0.0;  // directed auto -> manual
  double msd_symmetric = 0.0;
  double hausdorff = 0.0;
};

struct LabelReport {
  std::vector<LabelRow> rows;
};

struct SummaryStats {
  double mean = 0.0;
  double median = 0.0;
  double std = 0.0;  // sample (n - 1)
  std::size_t count = 0;
};

SummaryStats summarize(const std::vector<double>& values);

/// Rows for labels 1..L-1 (background excluded). Labels empty in either
/// volume are reported as missing rows.
LabelReport evaluate_labels(const LabelVolume& pred, const LabelVolume& truth,
                            const std::map<int, std::string>& names = {});

/// CSV header: id,name,dsc,msd,msd_sym,hd,size_auto,size_manual
/// (metric cells are empty for missing rows).
std::string report_csv(const LabelReport& report);
/// {"labels_evaluated":n,"labels_missing":[..],"dsc":{mean,median,std},"msd":..,"msd_sym":..,"hd":..}
std::string report_summary_json(const LabelReport& report);

/// "id name" per line; '#' starts a comment.
std::map<int, std::string> read_label_names(const std::filesystem::path& path);

}  // namespace tilefuse
