#include "tilefuse/atlas_select.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include <Eigen/Dense>

#include "tilefuse/log.hpp"

namespace tilefuse {
namespace {

constexpr char kManifoldMagic[8] = {'T', 'F', 'P', 'C', 'A', 'M', 'F', '1'};

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

template <typename T>
void write_pod(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}

}  // namespace

std::vector<double> masked_vector(const Volume& v, const BrainMask& mask) {
  require_same_grid(v.grid(), mask.grid(), "masked_vector");
  const Volume z = znormalize(v);
  std::vector<double> out;
  out.reserve(mask.voxel_count());
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (mask.contains(i)) out.push_back(z[i]);
  }
  return out;
}

PcaManifold degenerate_manifold(std::vector<std::string> atlas_ids, const BrainMask& mask) {
  PcaManifold m;
  m.mask = mask;
  m.mean.assign(mask.voxel_count(), 0.0);
  m.atlas_projections.assign(atlas_ids.size(), {});
  m.atlas_ids = std::move(atlas_ids);
  m.degenerate = true;
  return m;
}

PcaManifold build_manifold(std::span<const NamedVolume> atlases, const BrainMask& mask) {
  if (atlases.size() < 2) {
    throw Error(ErrorCode::insufficient_data, "PCA manifold needs at least 2 atlases, got " +
                                                  std::to_string(atlases.size()));
  }
  const std::size_t n = atlases.size();
  const std::size_t m = mask.voxel_count();
  PcaManifold manifold;
  manifold.mask = mask;
  std::vector<std::vector<double>> centered;
  centered.reserve(n);
  manifold.mean.assign(m, 0.0);
  for (const auto& atlas : atlases) {
    if (!atlas.volume.grid().same_as(mask.grid())) {
      throw Error(ErrorCode::geometry_mismatch, "atlas '" + atlas.id + "' is not on the mask grid");
    }
    centered.push_back(masked_vector(atlas.volume, mask));
    for (std::size_t i = 0; i < m; ++i) manifold.mean[i] += centered.back()[i];
    manifold.atlas_ids.push_back(atlas.id);
  }
  for (auto& v : manifold.mean) v /= static_cast<double>(n);
  for (auto& row : centered) {
    for (std::size_t i = 0; i < m; ++i) row[i] -= manifold.mean[i];
  }

  // Eigen-decompose the n x n Gram matrix instead of the m x m covariance.
  Eigen::MatrixXd gram(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = a; b < n; ++b) {
      const double g = dot(centered[a], centered[b]);
      gram(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = g;
      gram(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(a)) = g;
    }
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(gram);
  const Eigen::VectorXd& values = solver.eigenvalues();  // ascending
  const double largest = values.size() > 0 ? values(values.size() - 1) : 0.0;
  const double threshold = std::max(1e-12 * std::abs(largest), 1e-12);

  for (Eigen::Index k = values.size() - 1; k >= 0; --k) {
    if (values(k) <= threshold || manifold.components.size() >= n - 1) break;
    std::vector<double> comp(m, 0.0);
    for (std::size_t a = 0; a < n; ++a) {
      const double coeff = solver.eigenvectors()(static_cast<Eigen::Index>(a), k);
      for (std::size_t i = 0; i < m; ++i) comp[i] += coeff * centered[a][i];
    }
    // Re-orthogonalise against earlier components (modified Gram-Schmidt).
    for (const auto& prev : manifold.components) {
      const double p = dot(comp, prev);
      for (std::size_t i = 0; i < m; ++i) comp[i] -= p * prev[i];
    }
    const double len = std::sqrt(dot(comp, comp));
    if (!(len > 0.0)) continue;
    for (auto& c : comp) c /= len;
    manifold.components.push_back(std::move(comp));
  }

  manifold.degenerate = manifold.components.empty();
  if (manifold.degenerate) log::warn("atlas PCA manifold is degenerate (zero variance); selection uses id order");
  for (const auto& row : centered) {
    std::vector<double> proj(manifold.components.size());
    for (std::size_t k = 0; k < proj.size(); ++k) proj[k] = dot(row, manifold.components[k]);
    manifold.atlas_projections.push_back(std::move(proj));
  }
  return manifold;
}

std::vector<double> project(const PcaManifold& manifold, const Volume& test) {
  if (!test.grid().same_as(manifold.mask.grid())) {
    throw Error(ErrorCode::geometry_mismatch, "test volume is not on the manifold grid");
  }
  auto v = masked_vector(test, manifold.mask);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] -= manifold.mean[i];
  std::vector<double> proj(manifold.components.size());
  for (std::size_t k = 0; k < proj.size(); ++k) proj[k] = dot(v, manifold.components[k]);
  return proj;
}

std::vector<std::string> select_atlases(const PcaManifold& manifold, const Volume& test, std::size_t n) {
  if (n > manifold.atlas_count()) {
    throw Error(ErrorCode::invalid_argument, "cannot select " + std::to_string(n) + " of " +
                                                 std::to_string(manifold.atlas_count()) + " atlases");
  }
  std::vector<double> distance(manifold.atlas_count(), 0.0);
  if (manifold.degenerate) {
    log::warn("degenerate atlas manifold; selecting atlases in id order");
  } else {
    const auto proj = project(manifold, test);
    for (std::size_t a = 0; a < distance.size(); ++a) {
      double s = 0.0;
      for (std::size_t k = 0; k < proj.size(); ++k) {
        const double d = proj[k] - manifold.atlas_projections[a][k];
        s += d * d;
      }
      distance[a] = std::sqrt(s);
    }
  }
  std::vector<std::size_t> order(distance.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (distance[a] != distance[b]) return distance[a] < distance[b];
    return manifold.atlas_ids[a] < manifold.atlas_ids[b];
  });
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(manifold.atlas_ids[order[i]]);
  return out;
}

void save_manifold(const PcaManifold& manifold, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::write_failure, "cannot open " + path.string());
  out.write(kManifoldMagic, 8);
  write_pod<std::uint64_t>(out, manifold.mean.size());
  write_pod<std::uint64_t>(out, manifold.atlas_count());
  write_pod<std::uint64_t>(out, manifold.component_count());
  write_pod<std::uint8_t>(out, manifold.degenerate ? 1 : 0);
  for (const auto& id : manifold.atlas_ids) {
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(id.size()));
    out.write(id.data(), static_cast<std::streamsize>(id.size()));
  }
  auto write_vec = [&](const std::vector<double>& v) {
    out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
  };
  write_vec(manifold.mean);
  for (const auto& c : manifold.components) write_vec(c);
  for (const auto& p : manifold.atlas_projections) write_vec(p);
  out.close();
  if (!out) throw Error(ErrorCode::write_failure, "failed writing " + path.string());
}

PcaManifold load_manifold(const std::filesystem::path& path, const BrainMask& mask) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::format, "cannot open manifold " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kManifoldMagic, 8) != 0) {
    throw Error(ErrorCode::format, "bad manifold magic in " + path.string());
  }
  const auto m = read_pod<std::uint64_t>(in);
  const auto n = read_pod<std::uint64_t>(in);
  const auto k = read_pod<std::uint64_t>(in);
  const auto degenerate = read_pod<std::uint8_t>(in);
  if (!in || m != mask.voxel_count() || n > 100000 || k > n) {
    throw Error(ErrorCode::corrupt_file, "manifold header inconsistent with mask in " + path.string());
  }
  PcaManifold manifold;
  manifold.mask = mask;
  manifold.degenerate = degenerate != 0;
  for (std::uint64_t a = 0; a < n; ++a) {
    const auto len = read_pod<std::uint32_t>(in);
    if (!in || len > 4096) throw Error(ErrorCode::corrupt_file, "bad atlas id in " + path.string());
    std::string id(len, '\0');
    in.read(id.data(), len);
    manifold.atlas_ids.push_back(std::move(id));
  }
  auto read_vec = [&](std::size_t len) {
    std::vector<double> v(len);
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(len * sizeof(double)));
    return v;
  };
  manifold.mean = read_vec(m);
  for (std::uint64_t c = 0; c < k; ++c) manifold.components.push_back(read_vec(m));
  for (std::uint64_t a = 0; a < n; ++a) manifold.atlas_projections.push_back(read_vec(k));
  if (!in) throw Error(ErrorCode::corrupt_file, "truncated manifold " + path.string());
  return manifold;
}

}  // namespace tilefuse
