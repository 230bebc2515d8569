#include "tilefuse/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "tilefuse/log.hpp"

namespace tilefuse {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr std::size_t kExactWilcoxonLimit = 25;

void require_same_dims(const MaskVolume& a, const MaskVolume& m) {
  if (a.dims() != m.dims()) {
    throw Error(ErrorCode::geometry_mismatch, "masks differ in dims: " + to_string(a.dims()) + " vs " +
                                                  to_string(m.dims()));
  }
}

// One pass of the Felzenszwalb-Huttenlocher lower envelope along a line,
// carrying the index of the minimising feature.
void envelope_1d(const std::vector<double>& f, const std::vector<std::int64_t>& id, double w2,
                 std::vector<double>& d_out, std::vector<std::int64_t>& id_out, std::vector<std::int64_t>& v,
                 std::vector<double>& z) {
  const auto n = static_cast<std::int64_t>(f.size());
  std::int64_t k = -1;
  for (std::int64_t q = 0; q < n; ++q) {
    if (f[static_cast<std::size_t>(q)] == kInf) continue;
    const double fq = f[static_cast<std::size_t>(q)] + w2 * double(q) * double(q);
    double s = -kInf;
    while (k >= 0) {
      const auto vk = v[static_cast<std::size_t>(k)];
      const double fv = f[static_cast<std::size_t>(vk)] + w2 * double(vk) * double(vk);
      s = (fq - fv) / (2.0 * w2 * double(q - vk));
      if (s <= z[static_cast<std::size_t>(k)]) {
        --k;
        continue;
      }
      break;
    }
    ++k;
    v[static_cast<std::size_t>(k)] = q;
    z[static_cast<std::size_t>(k)] = k == 0 ? -kInf : s;
    z[static_cast<std::size_t>(k + 1)] = kInf;
  }
  if (k < 0) {
    std::fill(d_out.begin(), d_out.end(), kInf);
    std::fill(id_out.begin(), id_out.end(), -1);
    return;
  }
  std::int64_t j = 0;
  for (std::int64_t p = 0; p < n; ++p) {
    while (z[static_cast<std::size_t>(j + 1)] < double(p)) ++j;
    const auto vj = v[static_cast<std::size_t>(j)];
    const double dp = double(p - vj);
    d_out[static_cast<std::size_t>(p)] = w2 * dp * dp + f[static_cast<std::size_t>(vj)];
    id_out[static_cast<std::size_t>(p)] = id[static_cast<std::size_t>(vj)];
  }
}

// Feature transform inside a box: for every voxel, the linear index (in box
// coordinates) of the nearest feature voxel.
std::vector<std::int64_t> feature_transform(const std::vector<std::uint8_t>& feature, const Dims& box,
                                            const Vec3& spacing) {
  const std::size_t n = box.count();
  std::vector<double> dist(n);
  std::vector<std::int64_t> nearest(n);
  for (std::size_t i = 0; i < n; ++i) {
    dist[i] = feature[i] ? 0.0 : kInf;
    nearest[i] = feature[i] ? static_cast<std::int64_t>(i) : -1;
  }
  const std::int64_t stride[3] = {1, box.x, box.x * box.y};
  for (int axis = 0; axis < 3; ++axis) {
    const std::int64_t len = box[axis];
    const double w2 = spacing[axis] * spacing[axis];
    std::vector<double> f(static_cast<std::size_t>(len)), d(static_cast<std::size_t>(len));
    std::vector<std::int64_t> id(static_cast<std::size_t>(len)), id_out(static_cast<std::size_t>(len));
    std::vector<std::int64_t> v(static_cast<std::size_t>(len));
    std::vector<double> z(static_cast<std::size_t>(len + 1));
    const int a1 = (axis + 1) % 3;
    const int a2 = (axis + 2) % 3;
    for (std::int64_t j = 0; j < box[a2]; ++j) {
      for (std::int64_t i = 0; i < box[a1]; ++i) {
        const std::int64_t base = i * stride[a1] + j * stride[a2];
        for (std::int64_t p = 0; p < len; ++p) {
          const auto idx = static_cast<std::size_t>(base + p * stride[axis]);
          f[static_cast<std::size_t>(p)] = dist[idx];
          id[static_cast<std::size_t>(p)] = nearest[idx];
        }
        envelope_1d(f, id, w2, d, id_out, v, z);
        for (std::int64_t p = 0; p < len; ++p) {
          const auto idx = static_cast<std::size_t>(base + p * stride[axis]);
          dist[idx] = d[static_cast<std::size_t>(p)];
          nearest[idx] = id_out[static_cast<std::size_t>(p)];
        }
      }
    }
  }
  return nearest;
}

struct DirectedStats {
  double mean = 0.0;
  double max = 0.0;
};

DirectedStats directed(const std::vector<VoxelPoint>& from, const std::vector<VoxelPoint>& to,
                       const Dims& dims, const Vec3& spacing) {
  // Box spanning both point sets; the transform is exact inside it because
  // every feature lies inside.
  Dims lo{dims.x, dims.y, dims.z}, hi{-1, -1, -1};
  for (const auto* set : {&from, &to}) {
    for (const auto& p : *set) {
      lo.x = std::min(lo.x, p.x);
      lo.y = std::min(lo.y, p.y);
      lo.z = std::min(lo.z, p.z);
      hi.x = std::max(hi.x, p.x);
      hi.y = std::max(hi.y, p.y);
      hi.z = std::max(hi.z, p.z);
    }
  }
  const Dims box{hi.x - lo.x + 1, hi.y - lo.y + 1, hi.z - lo.z + 1};
  auto local = [&](const VoxelPoint& p) {
    return static_cast<std::size_t>(((p.z - lo.z) * box.y + (p.y - lo.y)) * box.x + (p.x - lo.x));
  };
  std::vector<std::uint8_t> feature(box.count(), 0);
  for (const auto& p : to) feature[local(p)] = 1;
  const auto nearest = feature_transform(feature, box, spacing);

  DirectedStats stats;
  double sum = 0.0;
  for (const auto& p : from) {
    const auto id = nearest[local(p)];
    const VoxelPoint q{lo.x + id % box.x, lo.y + (id / box.x) % box.y, lo.z + id / (box.x * box.y)};
    const double d = point_distance(p, q, spacing);
    sum += d;
    stats.max = std::max(stats.max, d);
  }
  stats.mean = sum / static_cast<double>(from.size());
  return stats;
}

double median_sorted(const std::vector<double>& sorted) {
  const std::size_t n = sorted.size();
  if (n == 0) return 0.0;
  return n % 2 == 1 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
}

}  // namespace

MaskVolume label_mask(const LabelVolume& labels, Label label) {
  MaskVolume out(labels.grid(), 0);
  for (std::size_t i = 0; i < labels.size(); ++i) out[i] = labels[i] == label ? 1 : 0;
  return out;
}

double dsc(const MaskVolume& a, const MaskVolume& m) {
  require_same_dims(a, m);
  std::size_t na = 0, nm = 0, both = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool ia = a[i] != 0;
    const bool im = m[i] != 0;
    na += ia;
    nm += im;
    both += ia && im;
  }
  if (na + nm == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(na + nm);
}

std::vector<VoxelPoint> surface_points(const MaskVolume& mask) {
  const Dims d = mask.dims();
  std::vector<VoxelPoint> out;
  auto set = [&](std::int64_t x, std::int64_t y, std::int64_t z) {
    return mask.grid().contains(x, y, z) && mask(x, y, z) != 0;
  };
  for (std::int64_t z = 0; z < d.z; ++z) {
    for (std::int64_t y = 0; y < d.y; ++y) {
      for (std::int64_t x = 0; x < d.x; ++x) {
        if (mask(x, y, z) == 0) continue;
        if (!set(x - 1, y, z) || !set(x + 1, y, z) || !set(x, y - 1, z) || !set(x, y + 1, z) ||
            !set(x, y, z - 1) || !set(x, y, z + 1)) {
          out.push_back({x, y, z});
        }
      }
    }
  }
  return out;
}

SurfaceDistances surface_distance(const MaskVolume& a, const MaskVolume& m, const Vec3& spacing) {
  require_same_dims(a, m);
  const auto sa = surface_points(a);
  const auto sm = surface_points(m);
  if (sa.empty() || sm.empty()) {
    throw Error(ErrorCode::undefined_distance, "surface distance is undefined for an empty mask");
  }
  const auto am = directed(sa, sm, a.dims(), spacing);
  const auto ma = directed(sm, sa, a.dims(), spacing);
  SurfaceDistances out;
  out.msd_directed = am.mean;
  out.msd_reverse = ma.mean;
  out.msd_symmetric = 0.5 * (am.mean + ma.mean);
  out.hausdorff = std::max(am.max, ma.max);
  return out;
}

WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw Error(ErrorCode::invalid_argument, "wilcoxon needs paired samples of equal length");
  if (x.size() < 5) throw Error(ErrorCode::insufficient_data, "wilcoxon needs at least 5 pairs");
  std::vector<double> diff;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - y[i];
    if (d != 0.0) diff.push_back(d);
  }
  WilcoxonResult result;
  result.n_nonzero = diff.size();
  if (diff.empty()) {
    result.degenerate = true;
    result.exact = true;
    return result;
  }
  const std::size_t n = diff.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return std::abs(diff[a]) < std::abs(diff[b]); });
  // Doubled average ranks stay integral.
  std::vector<std::int64_t> rank2(n);
  double tie_term = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && std::abs(diff[order[j]]) == std::abs(diff[order[i]])) ++j;
    const auto doubled = static_cast<std::int64_t>(i + 1 + j);  // 2 * mean of ranks i+1..j
    for (std::size_t k = i; k < j; ++k) rank2[order[k]] = doubled;
    const double t = static_cast<double>(j - i);
    tie_term += t * t * t - t;
    i = j;
  }
  std::int64_t w2 = 0;
  std::int64_t total2 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    total2 += rank2[i];
    if (diff[i] > 0) w2 += rank2[i];
  }
  result.w_plus = static_cast<double>(w2) / 2.0;

  if (n <= kExactWilcoxonLimit) {
    result.exact = true;
    std::vector<double> count(static_cast<std::size_t>(total2 + 1), 0.0);
    count[0] = 1.0;
    std::int64_t reach = 0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::int64_t s = reach; s >= 0; --s) {
        if (count[static_cast<std::size_t>(s)] != 0.0) count[static_cast<std::size_t>(s + rank2[i])] += count[static_cast<std::size_t>(s)];
      }
      reach += rank2[i];
    }
    const double outcomes = std::ldexp(1.0, static_cast<int>(n));
    double lower = 0.0, upper = 0.0;
    for (std::int64_t s = 0; s <= total2; ++s) {
      if (s <= w2) lower += count[static_cast<std::size_t>(s)];
      if (s >= w2) upper += count[static_cast<std::size_t>(s)];
    }
    result.p_value = std::min(1.0, 2.0 * std::min(lower, upper) / outcomes);
    return result;
  }

  const double nn = static_cast<double>(n);
  const double mean = nn * (nn + 1.0) / 4.0;
  const double var = nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0 - tie_term / 48.0;
  const double z = std::max(0.0, std::abs(result.w_plus - mean) - 0.5) / std::sqrt(var);
  result.p_value = std::min(1.0, std::erfc(z / std::sqrt(2.0)));
  return result;
}

std::vector<std::vector<int>> best_within_delta(const std::vector<std::vector<double>>& median_dsc,
                                                const std::vector<double>& deltas) {
  if (median_dsc.empty() || median_dsc.front().empty()) {
    throw Error(ErrorCode::invalid_argument, "best_within_delta needs a non-empty matrix");
  }
  const std::size_t rois = median_dsc.front().size();
  for (const auto& row : median_dsc) {
    if (row.size() != rois) throw Error(ErrorCode::invalid_argument, "ragged method x ROI matrix");
  }
  std::vector<std::vector<int>> counts(median_dsc.size(), std::vector<int>(deltas.size(), 0));
  for (std::size_t r = 0; r < rois; ++r) {
    double best = -kInf;
    for (const auto& row : median_dsc) best = std::max(best, row[r]);
    for (std::size_t d = 0; d < deltas.size(); ++d) {
      for (std::size_t m = 0; m < median_dsc.size(); ++m) {
        if (median_dsc[m][r] >= best - deltas[d]) ++counts[m][d];
      }
    }
  }
  return counts;
}

MdsResult mds_order(const std::vector<std::vector<double>>& stats) {
  const std::size_t n = stats.size();
  if (n < 2) throw Error(ErrorCode::insufficient_data, "MDS ordering needs at least 2 ROIs");
  const std::size_t f = stats.front().size();
  for (const auto& row : stats) {
    if (row.size() != f) throw Error(ErrorCode::invalid_argument, "ragged ROI x feature matrix");
  }
  const auto N = static_cast<Eigen::Index>(n);
  Eigen::MatrixXd d2(N, N);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < f; ++k) {
        const double d = stats[i][k] - stats[j][k];
        s += d * d;
      }
      d2(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = s;
    }
  }
  const Eigen::MatrixXd centering =
      Eigen::MatrixXd::Identity(N, N) - Eigen::MatrixXd::Constant(N, N, 1.0 / static_cast<double>(n));
  const Eigen::MatrixXd b = -0.5 * centering * d2 * centering;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(b);
  const double top = solver.eigenvalues()(N - 1);

  MdsResult result;
  result.order.resize(n);
  std::iota(result.order.begin(), result.order.end(), std::size_t{0});
  result.coordinate.assign(n, 0.0);
  const double scale = std::max(1.0, d2.maxCoeff());
  if (!(top > 1e-12 * scale)) {
    log::warn("MDS input rows are identical; keeping input order");
    result.degenerate = true;
    return result;
  }
  const Eigen::VectorXd u = solver.eigenvectors().col(N - 1);
  for (std::size_t i = 0; i < n; ++i) result.coordinate[i] = std::sqrt(top) * u(static_cast<Eigen::Index>(i));
  if (result.coordinate.front() > result.coordinate.back()) {
    for (auto& c : result.coordinate) c = -c;
  }
  std::stable_sort(result.order.begin(), result.order.end(),
                   [&](std::size_t a, std::size_t b) { return result.coordinate[a] < result.coordinate[b]; });
  return result;
}

SummaryStats summarize(const std::vector<double>& values) {
  SummaryStats s;
  s.count = values.size();
  if (values.empty()) return s;
  std::vector<double> sorted = values;
  std::sort(sorted.begin(), sorted.end());
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(values.size());
  s.median = median_sorted(sorted);
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return s;
}

LabelReport evaluate_labels(const LabelVolume& pred, const LabelVolume& truth, const std::map<int, std::string>& names) {
  if (pred.dims() != truth.dims()) {
    throw Error(ErrorCode::geometry_mismatch, "prediction " + to_string(pred.dims()) + " and truth " +
                                                  to_string(truth.dims()) + " grids differ");
  }
  const int labels = std::max(pred.label_count(), truth.label_count());
  std::vector<std::size_t> pred_count(static_cast<std::size_t>(labels), 0), truth_count(static_cast<std::size_t>(labels), 0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    ++pred_count[pred[i]];
    ++truth_count[truth[i]];
  }
  LabelReport report;
  for (int l = 1; l < labels; ++l) {
    LabelRow row;
    row.label = l;
    if (auto it = names.find(l); it != names.end()) row.name = it->second;
    row.auto_voxels = pred_count[static_cast<std::size_t>(l)];
    row.manual_voxels = truth_count[static_cast<std::size_t>(l)];
    if (row.auto_voxels == 0 || row.manual_voxels == 0) {
      row.missing = true;
      report.rows.push_back(row);
      continue;
    }
    const auto a = label_mask(pred, static_cast<Label>(l));
    const auto m = label_mask(truth, static_cast<Label>(l));
    row.dsc = dsc(a, m);
    const auto sd = surface_distance(a, m, truth.grid().spacing);
    row.msd = sd.msd_directed;
    row.msd_symmetric = sd.msd_symmetric;
    row.hausdorff = sd.hausdorff;
    report.rows.push_back(row);
  }
  return report;
}

std::string report_csv(const LabelReport& report) {
  std::ostringstream out;
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  out << "id,name,dsc,msd,msd_sym,hd,size_auto,size_manual\n";
  for (const auto& r : report.rows) {
    out << r.label << ',' << r.name << ',';
    if (r.missing) {
      out << ",,,,";
    } else {
      out << r.dsc << ',' << r.msd << ',' << r.msd_symmetric << ',' << r.hausdorff << ',';
    }
    out << r.auto_voxels << ',' << r.manual_voxels << '\n';
  }
  return out.str();
}

std::string report_summary_json(const LabelReport& report) {
  std::vector<double> dscs, msds, msd_syms, hds;
  nlohmann::json missing = nlohmann::json::array();
  for (const auto& r : report.rows) {
    if (r.missing) {
      missing.push_back(r.label);
      continue;
    }
    dscs.push_back(r.dsc);
    msds.push_back(r.msd);
    msd_syms.push_back(r.msd_symmetric);
    hds.push_back(r.hausdorff);
  }
  auto stats_json = [](const std::vector<double>& v) {
    const auto s = summarize(v);
    return nlohmann::json{{"mean", s.mean}, {"median", s.median}, {"std", s.std}};
  };
  nlohmann::json j;
  j["labels_evaluated"] = dscs.size();
  j["labels_missing"] = missing;
  j["dsc"] = stats_json(dscs);
  j["msd"] = stats_json(msds);
  j["msd_sym"] = stats_json(msd_syms);
  j["hd"] = stats_json(hds);
  return j.dump(2);
}

std::map<int, std::string> read_label_names(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::configuration, "cannot open label names file " + path.string());
  std::map<int, std::string> names;
  std::string line;
  while (std::getline(in, line)) {
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ss(line);
    int id = 0;
    if (!(ss >> id)) continue;
    std::string name;
    std::getline(ss >> std::ws, name);
    while (!name.empty() && std::isspace(static_cast<unsigned char>(name.back()))) name.pop_back();
    names[id] = name;
  }
  return names;
}

}  // namespace tilefuse
