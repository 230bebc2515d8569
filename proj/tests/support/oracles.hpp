#pragma once

// Brute-force reference implementations. Deliberately naive and written
// without reusing library internals so they can serve as independent checks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <vector>

#include "tilefuse/fusion.hpp"
#include "tilefuse/metrics.hpp"
#include "tilefuse/segmenter.hpp"
#include "tilefuse/tiling.hpp"

namespace oracle {

using tilefuse::Dims;
using tilefuse::Label;

// Per-voxel histogram over covering tiles; argmax with the smallest label on
// ties; voxels outside every tile get 0.
inline std::vector<Label> fuse(const std::vector<tilefuse::TileSegmentation>& segs, Dims dims, int label_count) {
  std::vector<Label> out(dims.count(), 0);
  for (std::int64_t z = 0; z < dims.z; ++z) {
    for (std::int64_t y = 0; y < dims.y; ++y) {
      for (std::int64_t x = 0; x < dims.x; ++x) {
        std::vector<int> hist(static_cast<std::size_t>(label_count), 0);
        int covered = 0;
        for (const auto& s : segs) {
          const auto& c = s.tile.corner;
          const auto& sz = s.tile.size;
          if (x < c.x || y < c.y || z < c.z || x >= c.x + sz.x || y >= c.y + sz.y || z >= c.z + sz.z) continue;
          ++covered;
          ++hist[s.labels(x - c.x, y - c.y, z - c.z)];
        }
        if (covered == 0) continue;
        int best = 0;
        for (int l = 1; l < label_count; ++l) {
          if (hist[static_cast<std::size_t>(l)] > hist[static_cast<std::size_t>(best)]) best = l;
        }
        out[static_cast<std::size_t>((z * dims.y + y) * dims.x + x)] = static_cast<Label>(best);
      }
    }
  }
  return out;
}

inline std::vector<int> coverage(const tilefuse::TileLattice& lat) {
  const Dims d = lat.canonical_dims;
  std::vector<int> out(d.count(), 0);
  for (const auto& t : lat.tiles) {
    for (std::int64_t z = t.corner.z; z < t.corner.z + t.size.z; ++z) {
      for (std::int64_t y = t.corner.y; y < t.corner.y + t.size.y; ++y) {
        for (std::int64_t x = t.corner.x; x < t.corner.x + t.size.x; ++x) {
          ++out[static_cast<std::size_t>((z * d.y + y) * d.x + x)];
        }
      }
    }
  }
  return out;
}

// 2|A∩M| / (|A| + |M|) straight from the definition.
inline double dsc(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& m) {
  double inter = 0, na = 0, nm = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += (a[i] && m[i]) ? 1 : 0;
    na += a[i] ? 1 : 0;
    nm += m[i] ? 1 : 0;
  }
  if (na + nm == 0) return 1.0;
  return 2.0 * inter / (na + nm);
}

struct Point {
  std::int64_t x, y, z;
};

inline std::vector<Point> surface(const std::vector<std::uint8_t>& mask, Dims d) {
  auto at = [&](std::int64_t x, std::int64_t y, std::int64_t z) -> bool {
    if (x < 0 || y < 0 || z < 0 || x >= d.x || y >= d.y || z >= d.z) return false;
    return mask[static_cast<std::size_t>((z * d.y + y) * d.x + x)] != 0;
  };
  std::vector<Point> out;
  for (std::int64_t z = 0; z < d.z; ++z) {
    for (std::int64_t y = 0; y < d.y; ++y) {
      for (std::int64_t x = 0; x < d.x; ++x) {
        if (!at(x, y, z)) continue;
        if (!at(x - 1, y, z) || !at(x + 1, y, z) || !at(x, y - 1, z) || !at(x, y + 1, z) || !at(x, y, z - 1) ||
            !at(x, y, z + 1)) {
          out.push_back({x, y, z});
        }
      }
    }
  }
  return out;
}

struct Directed {
  double mean = 0;
  double max = 0;
};

// All-pairs nearest-surface distances from `from` to `to`.
inline Directed directed(const std::vector<Point>& from, const std::vector<Point>& to, tilefuse::Vec3 sp) {
  Directed r;
  double sum = 0;
  for (const auto& p : from) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& q : to) {
      const double dx = double(p.x - q.x) * sp.x, dy = double(p.y - q.y) * sp.y, dz = double(p.z - q.z) * sp.z;
      best = std::min(best, std::sqrt(dx * dx + dy * dy + dz * dz));
    }
    sum += best;
    r.max = std::max(r.max, best);
  }
  r.mean = sum / double(from.size());
  return r;
}

// Two-sided signed-rank p-value by enumerating every sign assignment.
inline double wilcoxon_enumerate(const std::vector<double>& x, const std::vector<double>& y, double* w_plus = nullptr) {
  std::vector<double> d;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] != y[i]) d.push_back(x[i] - y[i]);
  }
  const std::size_t n = d.size();
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n; ++i) {
    double less = 0, equal = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (std::abs(d[j]) < std::abs(d[i])) ++less;
      else if (std::abs(d[j]) == std::abs(d[i])) ++equal;
    }
    rank[i] = less + (equal + 1) / 2.0;
  }
  double w = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (d[i] > 0) w += rank[i];
  }
  if (w_plus) *w_plus = w;
  double lower = 0, upper = 0;
  const std::uint64_t total = std::uint64_t{1} << n;
  for (std::uint64_t mask = 0; mask < total; ++mask) {
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (mask & (std::uint64_t{1} << i)) s += rank[i];
    }
    if (s <= w + 1e-9) ++lower;
    if (s >= w - 1e-9) ++upper;
  }
  return std::min(1.0, 2.0 * std::min(lower, upper) / double(total));
}

// Straight per-voxel patch search. Centres outside the canonical grid are
// skipped. Ties: lower atlas index, then the centre offset closest to the
// voxel, then the smallest (dz, dy, dx).
inline std::vector<Label> knn(const tilefuse::TileTask& task, const std::vector<tilefuse::Atlas>& atlases,
                              int patch_edge, int search_edge) {
  const Dims ts = task.tile.size;
  const Dims cd = task.canonical_dims;
  const int pr = patch_edge / 2;
  const int sr = search_edge / 2;
  auto clamp = [](std::int64_t v, std::int64_t n) { return std::clamp<std::int64_t>(v, 0, n - 1); };
  std::vector<Label> out(ts.count(), 0);
  for (std::int64_t z = 0; z < ts.z; ++z) {
    for (std::int64_t y = 0; y < ts.y; ++y) {
      for (std::int64_t x = 0; x < ts.x; ++x) {
        double best = std::numeric_limits<double>::infinity();
        std::int64_t best_a = 0, best_norm = 0, bz = 0, by = 0, bx = 0;
        Label label = 0;
        for (std::size_t a = 0; a < atlases.size(); ++a) {
          for (std::int64_t oz = -sr; oz <= sr; ++oz) {
            for (std::int64_t oy = -sr; oy <= sr; ++oy) {
              for (std::int64_t ox = -sr; ox <= sr; ++ox) {
                const std::int64_t cx = task.tile.corner.x + x + ox;
                const std::int64_t cy = task.tile.corner.y + y + oy;
                const std::int64_t cz = task.tile.corner.z + z + oz;
                if (cx < 0 || cy < 0 || cz < 0 || cx >= cd.x || cy >= cd.y || cz >= cd.z) continue;
                double score = 0;
                for (std::int64_t pz = -pr; pz <= pr; ++pz) {
                  for (std::int64_t py = -pr; py <= pr; ++py) {
                    for (std::int64_t px = -pr; px <= pr; ++px) {
                      const std::int64_t tx = x + px, ty = y + py, tz = z + pz;
                      if (tx < 0 || ty < 0 || tz < 0 || tx >= ts.x || ty >= ts.y || tz >= ts.z) continue;
                      const double diff = task.intensity(tx, ty, tz) -
                                          atlases[a].intensity(clamp(cx + px, cd.x), clamp(cy + py, cd.y),
                                                               clamp(cz + pz, cd.z));
                      score += diff * diff;
                    }
                  }
                }
                const std::int64_t nrm = ox * ox + oy * oy + oz * oz;
                bool better = score < best;
                if (score == best) {
                  if (std::int64_t(a) != best_a) {
                    better = std::int64_t(a) < best_a;
                  } else if (nrm != best_norm) {
                    better = nrm < best_norm;
                  } else {
                    better = std::tie(oz, oy, ox) < std::tie(bz, by, bx);
                  }
                }
                if (better) {
                  best = score;
                  best_a = std::int64_t(a);
                  best_norm = nrm;
                  bz = oz;
                  by = oy;
                  bx = ox;
                  label = atlases[a].labels(cx, cy, cz);
                }
              }
            }
          }
        }
        out[static_cast<std::size_t>((z * ts.y + y) * ts.x + x)] = label;
      }
    }
  }
  return out;
}

// floor(L * #{v' < v} / N) by counting.
inline std::vector<Label> quantile_bins(const std::vector<float>& v, int label_count) {
  std::vector<Label> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::size_t below = 0;
    for (float w : v) below += w < v[i] ? 1 : 0;
    const auto l = static_cast<std::int64_t>(label_count) * static_cast<std::int64_t>(below) /
                   static_cast<std::int64_t>(v.size());
    out[i] = static_cast<Label>(std::min<std::int64_t>(l, label_count - 1));
  }
  return out;
}

// Ordinary least squares y = b0 + b1 x.
inline std::pair<double, double> ols(const std::vector<double>& x, const std::vector<double>& y) {
  long double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const long double n = static_cast<long double>(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += static_cast<long double>(x[i]) * x[i];
    sxy += static_cast<long double>(x[i]) * y[i];
  }
  const long double b1 = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  const long double b0 = (sy - b1 * sx) / n;
  return {static_cast<double>(b0), static_cast<double>(b1)};
}

}  // namespace oracle
