#include "tilefuse/harmonize.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <sstream>

#include "tilefuse/log.hpp"

namespace tilefuse {
namespace {

constexpr char kModelMagic[8] = {'T', 'F', 'H', 'M', 'O', 'D', 'L', '1'};
constexpr double kHuberTune = 1.345;
constexpr double kMadToSigma = 0.6745;
constexpr int kMaxIterations = 50;
constexpr double kCoefficientTolerance = 1e-6;

double median_of(std::vector<double> values) {
  if (values.empty()) return 0.0;
  const std::size_t mid = values.size() / 2;
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid), values.end());
  const double upper = values[mid];
  if (values.size() % 2 == 1) return upper;
  const double lower = *std::max_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lower + upper);
}

struct Line {
  double beta0 = 0.0;
  double beta1 = 0.0;
};

// Weighted least squares for y = b1 * x + b0, using centred sums.
Line weighted_line(std::span<const double> x, std::span<const double> y, std::span<const double> w) {
  double sw = 0.0, sx = 0.0, sy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sw += w[i];
    sx += w[i] * x[i];
    sy += w[i] * y[i];
  }
  const double mx = sx / sw;
  const double my = sy / sw;
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx;
    sxx += w[i] * dx * dx;
    sxy += w[i] * dx * (y[i] - my);
  }
  if (!(sxx > 0.0)) {
    throw Error(ErrorCode::degenerate_fit, "weighted predictor has zero variance");
  }
  const double b1 = sxy / sxx;
  return {my - b1 * mx, b1};
}

}  // namespace

BrainMask::BrainMask(Grid grid, std::vector<std::uint8_t> bits) : grid_(std::move(grid)), bits_(std::move(bits)) {
  grid_.validate();
  if (bits_.size() != grid_.voxel_count()) {
    throw Error(ErrorCode::invalid_argument, "mask length does not match grid");
  }
  for (auto& b : bits_) {
    b = b != 0 ? 1 : 0;
    count_ += b;
  }
  if (count_ == 0) throw Error(ErrorCode::empty_mask, "brain mask is empty");
}

Volume znormalize(const Volume& v) {
  const auto [mean, sd] = mean_and_std(v.data());
  if (!(sd > 0.0) || !std::isfinite(sd)) {
    throw Error(ErrorCode::zero_variance, "cannot z-normalize a constant volume");
  }
  Volume out(v.grid(), 0.0f);
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>((v[i] - mean) / sd);
  return out;
}

BrainMask build_mask(std::span<const LabelVolume> prob_maps) {
  if (prob_maps.empty()) throw Error(ErrorCode::insufficient_data, "build_mask needs at least one map");
  const Grid& grid = prob_maps.front().grid();
  std::vector<std::uint32_t> votes(grid.voxel_count(), 0);
  for (std::size_t m = 0; m < prob_maps.size(); ++m) {
    require_same_grid(grid, prob_maps[m].grid(), "brain map " + std::to_string(m));
    for (std::size_t i = 0; i < votes.size(); ++i) votes[i] += prob_maps[m][i] > 0 ? 1 : 0;
  }
  // mean >= 0.5  <=>  2 * votes >= n, kept in integers so the boundary is exact.
  const auto n = static_cast<std::uint64_t>(prob_maps.size());
  std::vector<std::uint8_t> bits(votes.size());
  for (std::size_t i = 0; i < votes.size(); ++i) bits[i] = 2 * static_cast<std::uint64_t>(votes[i]) >= n ? 1 : 0;
  return BrainMask(grid, std::move(bits));
}

std::vector<double> sorted_vector(const Volume& v, const BrainMask& mask) {
  require_same_grid(v.grid(), mask.grid(), "sorted_vector");
  std::vector<double> out;
  out.reserve(mask.voxel_count());
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (mask.contains(i)) out.push_back(v[i]);
  }
  std::sort(out.begin(), out.end(), std::greater<>());
  return out;
}

HarmonizationModel build_model(std::span<const Volume> atlas_volumes, const BrainMask& mask) {
  if (atlas_volumes.empty()) throw Error(ErrorCode::insufficient_data, "build_model needs at least one atlas");
  std::vector<double> sum(mask.voxel_count(), 0.0);
  for (std::size_t a = 0; a < atlas_volumes.size(); ++a) {
    require_same_grid(atlas_volumes[a].grid(), mask.grid(), "atlas " + std::to_string(a));
    const auto sorted = sorted_vector(znormalize(atlas_volumes[a]), mask);
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += sorted[i];
  }
  const auto n = static_cast<double>(atlas_volumes.size());
  for (auto& s : sum) s /= n;
  return {mask, std::move(sum)};
}

HarmonizationFit huber_line_fit(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw Error(ErrorCode::invalid_argument, "fit vectors differ in length");
  if (x.size() < 2) throw Error(ErrorCode::degenerate_fit, "fit needs at least two samples");

  std::vector<double> w(x.size(), 1.0);
  Line line = weighted_line(x, y, w);

  // Scale floor as in common robust-fit implementations: a perfect inlier
  // fit must not drive the scale (and hence outlier weights) to zero.
  double ymean = 0.0;
  for (double v : y) ymean += v;
  ymean /= static_cast<double>(y.size());
  double yss = 0.0;
  for (double v : y) yss += (v - ymean) * (v - ymean);
  double tiny_scale = 1e-6 * std::sqrt(yss / static_cast<double>(y.size() - 1));
  if (tiny_scale == 0.0) tiny_scale = 1.0;

  HarmonizationFit result;
  std::vector<double> residual(x.size());
  std::vector<double> abs_residual(x.size());
  for (int iter = 1; iter <= kMaxIterations; ++iter) {
    result.iterations = iter;
    for (std::size_t i = 0; i < x.size(); ++i) {
      residual[i] = y[i] - (line.beta1 * x[i] + line.beta0);
      abs_residual[i] = std::abs(residual[i]);
    }
    const double scale = std::max(median_of(abs_residual) / kMadToSigma, tiny_scale);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double u = std::abs(residual[i]) / (kHuberTune * scale);
      w[i] = u <= 1.0 ? 1.0 : 1.0 / u;
    }
    const Line next = weighted_line(x, y, w);
    const double change = std::max(std::abs(next.beta0 - line.beta0), std::abs(next.beta1 - line.beta1));
    line = next;
    if (change < kCoefficientTolerance) {
      result.converged = true;
      break;
    }
  }
  result.beta0 = line.beta0;
  result.beta1 = line.beta1;
  if (!std::isfinite(result.beta0) || !std::isfinite(result.beta1)) {
    throw Error(ErrorCode::degenerate_fit, "robust fit produced non-finite coefficients");
  }
  if (result.beta1 <= 0.0) {
    log::warn("harmonization gain beta1 <= 0; marking fit as not converged");
    result.converged = false;
  }
  return result;
}

HarmonizationFit fit(const HarmonizationModel& model, std::span<const double> test_sorted) {
  if (test_sorted.size() != model.mean_sorted.size()) {
    throw Error(ErrorCode::invalid_argument, "test sorted vector length " + std::to_string(test_sorted.size()) +
                                                 " != model length " + std::to_string(model.mean_sorted.size()));
  }
  const auto [lo, hi] = std::minmax_element(test_sorted.begin(), test_sorted.end());
  if (test_sorted.empty() || *lo == *hi) {
    throw Error(ErrorCode::degenerate_fit, "test sorted vector has zero variance");
  }
  return huber_line_fit(test_sorted, model.mean_sorted);
}

Volume apply(const HarmonizationFit& f, const Volume& v) {
  Volume out(v.grid(), 0.0f);
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(f.beta1 * v[i] + f.beta0);
  return out;
}

void save_model(const HarmonizationModel& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::write_failure, "cannot open " + path.string());
  out.write(kModelMagic, sizeof(kModelMagic));
  const Dims& d = model.mask.grid().dims;
  for (int a = 0; a < 3; ++a) {
    const auto v = static_cast<std::int32_t>(d[a]);
    out.write(reinterpret_cast<const char*>(&v), 4);
  }
  const auto count = static_cast<std::uint64_t>(model.mask.voxel_count());
  out.write(reinterpret_cast<const char*>(&count), 8);
  const auto bits = model.mask.bits();
  std::vector<unsigned char> packed((bits.size() + 7) / 8, 0);
  for (std::size_t i = 0; i < bits.size(); ++i) {
    if (bits[i] != 0) packed[i / 8] |= static_cast<unsigned char>(1u << (i % 8));
  }
  out.write(reinterpret_cast<const char*>(packed.data()), static_cast<std::streamsize>(packed.size()));
  out.write(reinterpret_cast<const char*>(model.mean_sorted.data()),
            static_cast<std::streamsize>(model.mean_sorted.size() * sizeof(double)));
  out.close();
  if (!out) throw Error(ErrorCode::write_failure, "failed writing " + path.string());
}

HarmonizationModel load_model(const std::filesystem::path& path, const Grid& grid) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::format, "cannot open harmonization model " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kModelMagic, 8) != 0) {
    throw Error(ErrorCode::format, "bad harmonization model magic in " + path.string());
  }
  Dims d;
  for (int a = 0; a < 3; ++a) {
    std::int32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 4);
    d[a] = v;
  }
  std::uint64_t count = 0;
  in.read(reinterpret_cast<char*>(&count), 8);
  if (!in) throw Error(ErrorCode::corrupt_file, "truncated harmonization model " + path.string());
  if (d != grid.dims) {
    throw Error(ErrorCode::geometry_mismatch, "harmonization model dims " + to_string(d) +
                                                  " do not match template " + to_string(grid.dims));
  }
  std::vector<unsigned char> packed((grid.voxel_count() + 7) / 8);
  in.read(reinterpret_cast<char*>(packed.data()), static_cast<std::streamsize>(packed.size()));
  std::vector<double> mean_sorted(count);
  in.read(reinterpret_cast<char*>(mean_sorted.data()), static_cast<std::streamsize>(count * sizeof(double)));
  if (!in) throw Error(ErrorCode::corrupt_file, "truncated harmonization model " + path.string());
  std::vector<std::uint8_t> bits(grid.voxel_count());
  for (std::size_t i = 0; i < bits.size(); ++i) bits[i] = (packed[i / 8] >> (i % 8)) & 1u;
  BrainMask mask(grid, std::move(bits));
  if (mask.voxel_count() != count) {
    throw Error(ErrorCode::corrupt_file, "mask voxel count disagrees with stored vector length");
  }
  return {std::move(mask), std::move(mean_sorted)};
}

}  // namespace tilefuse
