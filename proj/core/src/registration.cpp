#include "tilefuse/registration.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <span>
#include <sstream>
#include <vector>

#include <Eigen/Dense>

#include "tilefuse/log.hpp"
#include "tilefuse/parallel.hpp"
#include "tilefuse/resample.hpp"

namespace tilefuse {
namespace {

using Matrix3 = std::array<double, 9>;

Matrix3 mul(const Matrix3& a, const Matrix3& b) {
  Matrix3 out{};
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) {
      double s = 0.0;
      for (int k = 0; k < 3; ++k) s += a[r * 3 + k] * b[k * 3 + c];
      out[r * 3 + c] = s;
    }
  }
  return out;
}

struct Moments {
  double n = 0, sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
  void add(const Moments& o) {
    n += o.n;
    sa += o.sa;
    sb += o.sb;
    saa += o.saa;
    sbb += o.sbb;
    sab += o.sab;
  }
};

// Sample count below which the overlap is considered lost.
constexpr double kMinOverlapFraction = 0.1;
// Per-evaluation sample budget on every pyramid level.
constexpr double kMaxSamples = 40000.0;
constexpr int kMaxRestarts = 8;
constexpr double kMaxRefineSamples = 150000.0;
constexpr int kRefineIters = 40;
// Blur applied to both images on every level, in voxels of that level.
// Sharp label edges otherwise leave the objective flat between voxels.
constexpr double kSmoothing = 1.5;

struct PyramidLevel {
  Volume moving;
  Volume fixed;
  int stride = 1;
};

Vec3 center_of_mass(const Volume& v) {
  float lo = v.data().empty() ? 0.0f : *std::min_element(v.data().begin(), v.data().end());
  double w = 0.0;
  Vec3 acc;
  const Dims d = v.dims();
  for (std::int64_t z = 0; z < d.z; ++z) {
    for (std::int64_t y = 0; y < d.y; ++y) {
      for (std::int64_t x = 0; x < d.x; ++x) {
        const double m = static_cast<double>(v(x, y, z)) - lo;
        w += m;
        acc = acc + m * Vec3{double(x), double(y), double(z)};
      }
    }
  }
  if (w <= 0.0) return v.grid().center_world();
  return v.grid().world((1.0 / w) * acc);
}

void require_variance(const Volume& v, const char* which) {
  const auto [mean, sd] = mean_and_std(v.data());
  if (!(sd > 0.0) || !std::isfinite(sd)) {
    throw Error(ErrorCode::degenerate_input, std::string(which) + " volume has zero intensity variance");
  }
  (void)mean;
}

// Separable Gaussian blur, sigma in voxels, edges clamped.
Volume smooth(const Volume& src, double sigma) {
  if (sigma <= 0.0) return src;
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
    sum += kernel[static_cast<std::size_t>(i + radius)];
  }
  for (double& k : kernel) k /= sum;
  Volume out = src;
  const Dims d = src.dims();
  const std::array<std::int64_t, 3> n{d.x, d.y, d.z};
  const std::array<std::int64_t, 3> stride{1, d.x, d.x * d.y};
  for (int axis = 0; axis < 3; ++axis) {
    const Volume in = out;
    const std::int64_t len = n[static_cast<std::size_t>(axis)];
    const std::int64_t st = stride[static_cast<std::size_t>(axis)];
    for (std::size_t start = 0; start < in.size(); ++start) {
      // Visit each line once, from its first voxel.
      if ((static_cast<std::int64_t>(start) / st) % len != 0) continue;
      for (std::int64_t i = 0; i < len; ++i) {
        double acc = 0.0;
        for (int k = -radius; k <= radius; ++k) {
          const std::int64_t j = std::clamp<std::int64_t>(i + k, 0, len - 1);
          acc += kernel[static_cast<std::size_t>(k + radius)] * in[start + static_cast<std::size_t>(j * st)];
        }
        out[start + static_cast<std::size_t>(i * st)] = static_cast<float>(acc);
      }
    }
  }
  return out;
}

class SimplexObjective {
 public:
  SimplexObjective(const PyramidLevel& level, Vec3 center, int dof, const std::vector<double>& step,
                   const std::vector<double>& origin, int jobs)
      : level_(level), center_(center), dof_(dof), step_(step), origin_(origin), jobs_(jobs) {}

  AffineParams params(const std::vector<double>& u) const {
    std::vector<double> p(u.size());
    for (std::size_t i = 0; i < u.size(); ++i) p[i] = origin_[i] + step_[i] * u[i];
    return unpack(p, dof_);
  }

  static AffineParams unpack(const std::vector<double>& p, int dof) {
    AffineParams a;
    a.translation = {p[0], p[1], p[2]};
    a.rotation = {p[3], p[4], p[5]};
    a.scale = {p[6], p[7], p[8]};
    if (dof == 12) a.shear = {p[9], p[10], p[11]};
    return a;
  }

  double operator()(const std::vector<double>& u) {
    ++evaluations;
    const AffineTransform map = affine_from_params(params(u), center_);
    const double ncc = normalized_cross_correlation(level_.moving, level_.fixed, map, level_.stride, jobs_);
    if (!std::isfinite(ncc)) {
      throw Error(ErrorCode::optimization_failure, "registration objective is not finite");
    }
    return -ncc;
  }

  int evaluations = 0;

 private:
  const PyramidLevel& level_;
  Vec3 center_;
  int dof_;
  std::vector<double> step_;
  std::vector<double> origin_;
  int jobs_;
};

// Nelder-Mead in normalised coordinates where each unit is one initial step.
// Converged once every vertex lies within `tolerance` of the best one.
std::vector<double> nelder_mead(SimplexObjective& f, std::vector<double> start, int max_iters, double tolerance,
                                int& iterations) {
  const std::size_t n = start.size();
  std::vector<std::vector<double>> simplex(n + 1, start);
  for (std::size_t i = 0; i < n; ++i) simplex[i + 1][i] += 1.0;
  std::vector<double> value(n + 1);
  for (std::size_t i = 0; i <= n; ++i) value[i] = f(simplex[i]);

  std::vector<std::size_t> order(n + 1);
  auto point = [&](const std::vector<double>& c, const std::vector<double>& w, double t) {
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = c[i] + t * (w[i] - c[i]);
    return out;
  };

  for (iterations = 0; iterations < max_iters; ++iterations) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return value[a] < value[b]; });
    const std::size_t best = order.front();
    const std::size_t worst = order.back();
    const std::size_t second = order[n - 1];

    double spread = 0.0;
    for (std::size_t v = 0; v <= n; ++v) {
      for (std::size_t i = 0; i < n; ++i) spread = std::max(spread, std::abs(simplex[v][i] - simplex[best][i]));
    }
    if (spread < tolerance) break;

    std::vector<double> centroid(n, 0.0);
    for (std::size_t v = 0; v <= n; ++v) {
      if (v == worst) continue;
      for (std::size_t i = 0; i < n; ++i) centroid[i] += simplex[v][i] / static_cast<double>(n);
    }

    auto reflected = point(centroid, simplex[worst], -1.0);
    const double fr = f(reflected);
    if (fr < value[best]) {
      auto expanded = point(centroid, simplex[worst], -2.0);
      const double fe = f(expanded);
      if (fe < fr) {
        simplex[worst] = std::move(expanded);
        value[worst] = fe;
      } else {
        simplex[worst] = std::move(reflected);
        value[worst] = fr;
      }
      continue;
    }
    if (fr < value[second]) {
      simplex[worst] = std::move(reflected);
      value[worst] = fr;
      continue;
    }
    const bool outside = fr < value[worst];
    auto contracted = point(centroid, outside ? reflected : simplex[worst], 0.5);
    const double fc = f(contracted);
    if (fc < (outside ? fr : value[worst])) {
      simplex[worst] = std::move(contracted);
      value[worst] = fc;
      continue;
    }
    for (std::size_t v = 0; v <= n; ++v) {
      if (v == best) continue;
      simplex[v] = point(simplex[best], simplex[v], 0.5);
      value[v] = f(simplex[v]);
    }
  }
  const auto best = static_cast<std::size_t>(std::min_element(value.begin(), value.end()) - value.begin());
  return simplex[best];
}

// Linear model of the map from fixed voxel to moving voxel around a
// parameter vector: the 3x4 block and its derivative along each parameter.
struct VoxelMap {
  std::array<double, 12> m{};
  std::vector<std::array<double, 12>> dm;
};

struct NormalEquations {
  Eigen::MatrixXd h;
  Eigen::VectorXd g;
  double cost = 0.0;
  double n = 0.0;
  Moments moments;  // a = moving, b = fixed

  explicit NormalEquations(std::size_t k) : h(Eigen::MatrixXd::Zero(Eigen::Index(k), Eigen::Index(k))),
                                            g(Eigen::VectorXd::Zero(Eigen::Index(k))) {}
  void add(const NormalEquations& o) {
    h += o.h;
    g += o.g;
    cost += o.cost;
    n += o.n;
    moments.add(o.moments);
  }
};

// Least squares on gain * moving(map(x)) + offset - fixed(x). Fitting gain
// and offset alongside the geometry makes the minimum that of NCC.
class Refiner {
 public:
  Refiner(const PyramidLevel& level, Vec3 center, int dof, int stride, int jobs)
      : level_(level), center_(center), dof_(dof), stride_(stride), jobs_(jobs) {}

  VoxelMap voxel_map(const std::vector<double>& params) const {
    VoxelMap out;
    out.m = block(params);
    for (std::size_t k = 0; k < params.size(); ++k) {
      const double h = 1e-6;
      auto hi = params, lo = params;
      hi[k] += h;
      lo[k] -= h;
      const auto a = block(hi), b = block(lo);
      std::array<double, 12> d{};
      for (std::size_t i = 0; i < 12; ++i) d[i] = (a[i] - b[i]) / (2.0 * h);
      out.dm.push_back(d);
    }
    return out;
  }

  NormalEquations accumulate(const VoxelMap& map, double gain, double offset, bool with_jacobian) const {
    const std::size_t np = map.dm.size();
    const std::size_t k = np + 2;
    const Dims fd = level_.fixed.dims();
    const Dims md = level_.moving.dims();
    const auto step = static_cast<std::int64_t>(stride_);
    const auto planes = static_cast<std::size_t>((fd.z + step - 1) / step);
    std::vector<NormalEquations> partial(planes, NormalEquations(with_jacobian ? k : 0));
    const std::span<const float> mdata = level_.moving.data();
    const std::int64_t sy = md.x, sz = md.x * md.y;
    const double hx = double(md.x - 1), hy = double(md.y - 1), hz = double(md.z - 1);
    const auto& m = map.m;
    parallel_for(planes, jobs_, [&](std::size_t begin, std::size_t end) {
      std::vector<double> row(k);
      for (std::size_t plane = begin; plane < end; ++plane) {
        NormalEquations& ne = partial[plane];
        const double z = double(static_cast<std::int64_t>(plane) * step);
        for (std::int64_t yi = 0; yi < fd.y; yi += step) {
          const double y = double(yi);
          for (std::int64_t xi = 0; xi < fd.x; xi += step) {
            const double x = double(xi);
            const double cx = m[0] * x + m[1] * y + m[2] * z + m[3];
            const double cy = m[4] * x + m[5] * y + m[6] * z + m[7];
            const double cz = m[8] * x + m[9] * y + m[10] * z + m[11];
            if (!(cx >= 0.0 && cy >= 0.0 && cz >= 0.0 && cx <= hx && cy <= hy && cz <= hz)) continue;
            const auto x0 = static_cast<std::int64_t>(cx);
            const auto y0 = static_cast<std::int64_t>(cy);
            const auto z0 = static_cast<std::int64_t>(cz);
            const double fx = cx - double(x0), fy = cy - double(y0), fz = cz - double(z0);
            const std::int64_t dx = x0 + 1 < md.x ? 1 : 0;
            const std::int64_t dy = y0 + 1 < md.y ? sy : 0;
            const std::int64_t dz = z0 + 1 < md.z ? sz : 0;
            const float* p = mdata.data() + (z0 * sz + y0 * sy + x0);
            const double e00 = p[dx] - p[0], e10 = p[dy + dx] - p[dy];
            const double e01 = p[dz + dx] - p[dz], e11 = p[dz + dy + dx] - p[dz + dy];
            const double c00 = p[0] + e00 * fx, c10 = p[dy] + e10 * fx;
            const double c01 = p[dz] + e01 * fx, c11 = p[dz + dy] + e11 * fx;
            const double lo = c00 + (c10 - c00) * fy, hi = c01 + (c11 - c01) * fy;
            const double a = lo + (hi - lo) * fz;
            const double b = level_.fixed(xi, yi, static_cast<std::int64_t>(plane) * step);
            const double r = gain * a + offset - b;
            ne.n += 1;
            ne.cost += r * r;
            ne.moments.n += 1;
            ne.moments.sa += a;
            ne.moments.sb += b;
            ne.moments.saa += a * a;
            ne.moments.sbb += b * b;
            ne.moments.sab += a * b;
            if (!with_jacobian) continue;
            const double gx = (e00 + (e10 - e00) * fy) * (1 - fz) + (e01 + (e11 - e01) * fy) * fz;
            const double gy = (c10 - c00) * (1 - fz) + (c11 - c01) * fz;
            const double gz = hi - lo;
            for (std::size_t q = 0; q < np; ++q) {
              const auto& d = map.dm[q];
              const double vx = d[0] * x + d[1] * y + d[2] * z + d[3];
              const double vy = d[4] * x + d[5] * y + d[6] * z + d[7];
              const double vz = d[8] * x + d[9] * y + d[10] * z + d[11];
              row[q] = gain * (gx * vx + gy * vy + gz * vz);
            }
            row[np] = a;
            row[np + 1] = 1.0;
            for (std::size_t i = 0; i < k; ++i) {
              ne.g(Eigen::Index(i)) += row[i] * r;
              for (std::size_t j = 0; j <= i; ++j) ne.h(Eigen::Index(i), Eigen::Index(j)) += row[i] * row[j];
            }
          }
        }
      }
    });
    NormalEquations total(with_jacobian ? k : 0);
    for (const auto& ne : partial) total.add(ne);
    if (with_jacobian) total.h = total.h.selfadjointView<Eigen::Lower>();
    return total;
  }

  // Levenberg-Marquardt from `params`; returns the refined parameters.
  std::vector<double> run(std::vector<double> params, int max_iters) {
    const std::size_t np = params.size();
    VoxelMap map = voxel_map(params);
    NormalEquations ne = accumulate(map, 1.0, 0.0, false);
    if (ne.n < 2) return params;
    const Moments& mo = ne.moments;
    const double va = mo.saa - mo.sa * mo.sa / mo.n;
    if (!(va > 0.0)) return params;
    double gain = (mo.sab - mo.sa * mo.sb / mo.n) / va;
    double offset = (mo.sb - gain * mo.sa) / mo.n;

    ne = accumulate(map, gain, offset, true);
    double lambda = 1e-3;
    for (int it = 0; it < max_iters; ++it) {
      const double current = ne.cost / ne.n;
      Eigen::MatrixXd a = ne.h;
      for (Eigen::Index i = 0; i < a.rows(); ++i) a(i, i) += lambda * std::max(a(i, i), 1e-12);
      const Eigen::VectorXd delta = a.ldlt().solve(-ne.g);
      if (!delta.allFinite()) break;
      std::vector<double> trial = params;
      for (std::size_t i = 0; i < np; ++i) trial[i] += delta(Eigen::Index(i));
      const double trial_gain = gain + delta(Eigen::Index(np));
      const double trial_offset = offset + delta(Eigen::Index(np + 1));
      bool improved = false;
      VoxelMap trial_map;
      NormalEquations trial_ne(0);
      try {
        trial_map = voxel_map(trial);
        trial_ne = accumulate(trial_map, trial_gain, trial_offset, true);
        improved = trial_ne.n >= kMinOverlapFraction * ne.n && trial_ne.cost / trial_ne.n < current;
      } catch (const Error&) {
        improved = false;
      }
      if (improved) {
        const double gain_rel = (current - trial_ne.cost / trial_ne.n) / std::max(current, 1e-300);
        params = std::move(trial);
        gain = trial_gain;
        offset = trial_offset;
        ne = std::move(trial_ne);
        lambda = std::max(lambda / 3.0, 1e-9);
        if (gain_rel < 1e-9) break;
      } else {
        lambda *= 4.0;
        if (lambda > 1e8) break;
      }
    }
    return params;
  }

 private:
  std::array<double, 12> block(const std::vector<double>& params) const {
    const AffineTransform map =
        compose(invert(level_.moving.grid().voxel_to_world),
                compose(affine_from_params(SimplexObjective::unpack(params, dof_), center_),
                        level_.fixed.grid().voxel_to_world));
    std::array<double, 12> out{};
    for (std::size_t i = 0; i < 12; ++i) out[i] = map.matrix()[i];
    return out;
  }

  const PyramidLevel& level_;
  Vec3 center_;
  int dof_;
  int stride_;
  int jobs_;
};

}  // namespace

AffineTransform affine_from_params(const AffineParams& p, Vec3 center) {
  const double cx = std::cos(p.rotation.x), sx = std::sin(p.rotation.x);
  const double cy = std::cos(p.rotation.y), sy = std::sin(p.rotation.y);
  const double cz = std::cos(p.rotation.z), sz = std::sin(p.rotation.z);
  const Matrix3 rx{1, 0, 0, 0, cx, -sx, 0, sx, cx};
  const Matrix3 ry{cy, 0, sy, 0, 1, 0, -sy, 0, cy};
  const Matrix3 rz{cz, -sz, 0, sz, cz, 0, 0, 0, 1};
  const Matrix3 s{p.scale.x, 0, 0, 0, p.scale.y, 0, 0, 0, p.scale.z};
  const Matrix3 h{1, p.shear.x, p.shear.y, 0, 1, p.shear.z, 0, 0, 1};
  const Matrix3 a = mul(mul(mul(rz, ry), rx), mul(s, h));

  AffineTransform::Matrix m{};
  for (int r = 0; r < 3; ++r) {
    double moved = 0.0;
    for (int c = 0; c < 3; ++c) {
      m[static_cast<std::size_t>(r * 4 + c)] = a[r * 3 + c];
      moved += a[r * 3 + c] * center[c];
    }
    m[static_cast<std::size_t>(r * 4 + 3)] = center[r] + p.translation[r] - moved;
  }
  m[15] = 1.0;
  return AffineTransform(m);
}

double normalized_cross_correlation(const Volume& moving, const Volume& fixed, const AffineTransform& fixed_to_moving,
                                    int stride, int jobs) {
  const AffineTransform map = compose(invert(moving.grid().voxel_to_world),
                                      compose(fixed_to_moving, fixed.grid().voxel_to_world));
  const Dims fd = fixed.dims();
  const Dims md = moving.dims();
  const auto step = static_cast<std::int64_t>(std::max(1, stride));
  const auto planes = static_cast<std::size_t>((fd.z + step - 1) / step);
  // Per-plane partial sums reduced in plane order keep the result
  // independent of the thread count.
  std::vector<Moments> partial(planes);
  const auto& mm = map.matrix();
  const Vec3 col_x{mm[0], mm[4], mm[8]};
  const std::span<const float> mdata = moving.data();
  const std::int64_t sy = md.x;
  const std::int64_t sz = md.x * md.y;
  const double hx = double(md.x - 1), hy = double(md.y - 1), hz = double(md.z - 1);
  parallel_for(planes, jobs, [&](std::size_t begin, std::size_t end) {
    for (std::size_t plane = begin; plane < end; ++plane) {
      Moments m;
      const auto z = static_cast<std::int64_t>(plane) * step;
      for (std::int64_t y = 0; y < fd.y; y += step) {
        const Vec3 row = map.apply({0.0, double(y), double(z)});
        for (std::int64_t x = 0; x < fd.x; x += step) {
          const double t = double(x);
          const double cx = row.x + t * col_x.x;
          const double cy = row.y + t * col_x.y;
          const double cz = row.z + t * col_x.z;
          if (!(cx >= 0.0 && cy >= 0.0 && cz >= 0.0 && cx <= hx && cy <= hy && cz <= hz)) continue;
          const auto x0 = static_cast<std::int64_t>(cx);
          const auto y0 = static_cast<std::int64_t>(cy);
          const auto z0 = static_cast<std::int64_t>(cz);
          const double fx = cx - double(x0), fy = cy - double(y0), fz = cz - double(z0);
          const std::int64_t dx = x0 + 1 < md.x ? 1 : 0;
          const std::int64_t dy = y0 + 1 < md.y ? sy : 0;
          const std::int64_t dz = z0 + 1 < md.z ? sz : 0;
          const float* p = mdata.data() + (z0 * sz + y0 * sy + x0);
          const double c00 = p[0] * (1 - fx) + p[dx] * fx;
          const double c10 = p[dy] * (1 - fx) + p[dy + dx] * fx;
          const double c01 = p[dz] * (1 - fx) + p[dz + dx] * fx;
          const double c11 = p[dz + dy] * (1 - fx) + p[dz + dy + dx] * fx;
          const double a = (c00 * (1 - fy) + c10 * fy) * (1 - fz) + (c01 * (1 - fy) + c11 * fy) * fz;
          const double b = fixed(x, y, z);
          m.n += 1;
          m.sa += a;
          m.sb += b;
          m.saa += a * a;
          m.sbb += b * b;
          m.sab += a * b;
        }
      }
      partial[plane] = m;
    }
  });
  Moments total;
  for (const auto& m : partial) total.add(m);

  const double samples = double((fd.x + step - 1) / step) * double((fd.y + step - 1) / step) * double(planes);
  if (total.n < kMinOverlapFraction * samples || total.n < 2) return -1.0;
  const double cov = total.sab - total.sa * total.sb / total.n;
  const double va = total.saa - total.sa * total.sa / total.n;
  const double vb = total.sbb - total.sb * total.sb / total.n;
  if (va <= 0.0 || vb <= 0.0) return 0.0;
  return cov / std::sqrt(va * vb);
}

RegistrationResult estimate_affine(const Volume& moving, const Volume& fixed, const RegistrationConfig& config) {
  if (moving.empty() || fixed.empty()) throw Error(ErrorCode::degenerate_input, "registration input is empty");
  if (config.dof != 9 && config.dof != 12) throw Error(ErrorCode::invalid_argument, "dof must be 9 or 12");
  if (config.levels < 1) throw Error(ErrorCode::invalid_argument, "levels must be >= 1");
  require_variance(moving, "moving");
  require_variance(fixed, "fixed");

  const Vec3 center = fixed.grid().center_world();
  const Vec3 com_shift = center_of_mass(moving) - center_of_mass(fixed);
  const auto nparams = static_cast<std::size_t>(config.dof);

  // Absolute parameters, carried from level to level.
  std::vector<double> current(nparams, 0.0);
  current[0] = com_shift.x;
  current[1] = com_shift.y;
  current[2] = com_shift.z;
  current[6] = current[7] = current[8] = 1.0;

  RegistrationResult result;
  const double min_spacing = std::min({fixed.grid().spacing.x, fixed.grid().spacing.y, fixed.grid().spacing.z});
  for (int level = config.levels - 1; level >= 0; --level) {
    const int factor = 1 << level;
    PyramidLevel pyramid{smooth(downsample(moving, factor), kSmoothing), smooth(downsample(fixed, factor), kSmoothing), 1};
    // Keep per-evaluation cost bounded on the finer levels.
    const double voxels = static_cast<double>(pyramid.fixed.size());
    while (voxels / std::pow(pyramid.stride, 3) > kMaxSamples) ++pyramid.stride;

    const double refine = static_cast<double>(factor) / static_cast<double>(1 << (config.levels - 1));
    std::vector<double> step(nparams);
    for (std::size_t i = 0; i < nparams; ++i) {
      if (i < 3) step[i] = 2.0 * min_spacing * factor;
      else if (i < 6) step[i] = 0.06 * std::max(refine, 0.25);
      else if (i < 9) step[i] = 0.04 * std::max(refine, 0.25);
      else step[i] = 0.03 * std::max(refine, 0.25);
    }
    SimplexObjective objective(pyramid, center, config.dof, step, current, config.jobs);
    std::vector<double> u(nparams, 0.0);
    int iterations = 0;
    int budget = config.max_iters;
    // Restart from each converged point with a fresh full-size simplex until
    // a restart no longer helps; a collapsed simplex stalls in valleys where
    // rotation trades against scale and shear.
    double last = objective(u);
    for (int pass = 0; pass < kMaxRestarts && budget > 0; ++pass) {
      u = nelder_mead(objective, u, budget, 1e-4, iterations);
      budget -= iterations;
      const double now = objective(u);
      if (last - now < 1e-7) break;
      last = now;
    }
    for (std::size_t i = 0; i < nparams; ++i) current[i] += step[i] * u[i];

    // The simplex gets close; Gauss-Newton steps finish the job along the
    // narrow valleys where it stalls.
    int refine_stride = 1;
    while (voxels / std::pow(refine_stride, 3) > kMaxRefineSamples) ++refine_stride;
    Refiner refiner(pyramid, center, config.dof, refine_stride, config.jobs);
    std::vector<double> refined = refiner.run(current, kRefineIters);
    const auto ncc_at = [&](const std::vector<double>& p) {
      return normalized_cross_correlation(pyramid.moving, pyramid.fixed,
                                          affine_from_params(SimplexObjective::unpack(p, config.dof), center),
                                          refine_stride, config.jobs);
    };
    const double before = ncc_at(current), after = ncc_at(refined);
    if (after >= before) current = std::move(refined);
    {
      std::ostringstream m;
      m << "refine x" << factor << ": ncc " << before << " -> " << after;
      log::debug(m.str());
    }
    result.evaluations += objective.evaluations;
    std::ostringstream msg;
    msg << "registration level x" << factor << ": " << objective.evaluations << " evaluations";
    log::debug(msg.str());
  }

  const AffineTransform fixed_to_moving =
      affine_from_params(SimplexObjective::unpack(current, config.dof), center);
  result.similarity = normalized_cross_correlation(moving, fixed, fixed_to_moving, 1, config.jobs);
  result.identity_similarity =
      normalized_cross_correlation(moving, fixed, AffineTransform::identity(), 1, config.jobs);
  if (!std::isfinite(result.similarity)) {
    throw Error(ErrorCode::optimization_failure, "registration produced a non-finite similarity");
  }
  if (result.identity_similarity > result.similarity) {
    result.transform = AffineTransform::identity();
    result.similarity = result.identity_similarity;
  } else {
    result.transform = invert(fixed_to_moving);
  }
  return result;
}

double mean_corner_displacement(const AffineTransform& a, const AffineTransform& b, const Grid& grid) {
  double total = 0.0;
  for (int corner = 0; corner < 8; ++corner) {
    const Vec3 voxel{(corner & 1) ? double(grid.dims.x - 1) : 0.0, (corner & 2) ? double(grid.dims.y - 1) : 0.0,
                     (corner & 4) ? double(grid.dims.z - 1) : 0.0};
    const Vec3 w = grid.world(voxel);
    total += norm(a.apply(w) - b.apply(w));
  }
  return total / 8.0;
}

}  // namespace tilefuse
