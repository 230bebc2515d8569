#include "tilefuse/report.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

namespace tilefuse {
namespace {

struct SliceView {
  int width = 0;
  int height = 0;
  std::int64_t fixed = 0;
  SliceAxis axis = SliceAxis::axial;

  // Image (u, v) -> voxel; v runs top to bottom, so the voxel axis is flipped.
  std::array<std::int64_t, 3> voxel(int u, int v) const {
    const std::int64_t flipped = height - 1 - v;
    switch (axis) {
      case SliceAxis::axial: return {u, flipped, fixed};
      case SliceAxis::coronal: return {u, fixed, flipped};
      case SliceAxis::sagittal: return {fixed, u, flipped};
    }
    return {0, 0, 0};
  }
};

SliceView make_view(const Dims& d, SliceAxis axis) {
  switch (axis) {
    case SliceAxis::axial: return {int(d.x), int(d.y), d.z / 2, axis};
    case SliceAxis::coronal: return {int(d.x), int(d.z), d.y / 2, axis};
    case SliceAxis::sagittal: return {int(d.y), int(d.z), d.x / 2, axis};
  }
  return {};
}

const char* slice_name(SliceAxis axis) {
  switch (axis) {
    case SliceAxis::axial: return "axial";
    case SliceAxis::coronal: return "coronal";
    case SliceAxis::sagittal: return "sagittal";
  }
  return "slice";
}

}  // namespace

GrayImage render_slice(const Volume& intensity, const LabelVolume& labels, SliceAxis axis) {
  if (intensity.dims() != labels.dims()) {
    throw Error(ErrorCode::geometry_mismatch, "report intensity and labels differ in dims");
  }
  const SliceView view = make_view(intensity.dims(), axis);
  GrayImage image{view.width, view.height, {}};
  image.pixels.assign(static_cast<std::size_t>(view.width) * static_cast<std::size_t>(view.height), 0);

  std::vector<float> values;
  values.reserve(image.pixels.size());
  for (int v = 0; v < view.height; ++v) {
    for (int u = 0; u < view.width; ++u) {
      const auto p = view.voxel(u, v);
      values.push_back(intensity(p[0], p[1], p[2]));
    }
  }
  std::vector<float> sorted = values;
  std::sort(sorted.begin(), sorted.end());
  const float lo = sorted[sorted.size() / 100];
  const float hi = sorted[std::min(sorted.size() - 1, sorted.size() * 99 / 100)];
  const double range = hi > lo ? static_cast<double>(hi - lo) : 1.0;

  auto label_at = [&](int u, int v) {
    const auto p = view.voxel(u, v);
    return labels(p[0], p[1], p[2]);
  };
  for (int v = 0; v < view.height; ++v) {
    for (int u = 0; u < view.width; ++u) {
      const auto i = static_cast<std::size_t>(v) * static_cast<std::size_t>(view.width) + static_cast<std::size_t>(u);
      const Label here = label_at(u, v);
      bool boundary = false;
      const int du[4] = {-1, 1, 0, 0};
      const int dv[4] = {0, 0, -1, 1};
      for (int k = 0; k < 4 && !boundary; ++k) {
        const int nu = u + du[k];
        const int nv = v + dv[k];
        if (nu < 0 || nv < 0 || nu >= view.width || nv >= view.height) continue;
        boundary = label_at(nu, nv) != here;
      }
      if (boundary) {
        image.pixels[i] = 255;
        continue;
      }
      const double t = std::clamp((values[i] - lo) / range, 0.0, 1.0);
      image.pixels[i] = static_cast<std::uint8_t>(std::lround(254.0 * t));
    }
  }
  return image;
}

void write_pgm(const GrayImage& image, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::write_failure, "cannot open " + path.string());
  out << "P5\n" << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
  out.close();
  if (!out) throw Error(ErrorCode::write_failure, "failed writing " + path.string());
}

ReportBundle emit_report(const ReportInput& input, const std::filesystem::path& dir) {
  ReportBundle bundle;
  std::filesystem::create_directories(dir);
  std::vector<std::string> warnings = input.warnings;

  if (input.intensity != nullptr && input.labels != nullptr) {
    for (SliceAxis axis : {SliceAxis::axial, SliceAxis::coronal, SliceAxis::sagittal}) {
      const auto path = dir / (std::string(slice_name(axis)) + ".pgm");
      try {
        write_pgm(render_slice(*input.intensity, *input.labels, axis), path);
        bundle.slices.push_back(path);
      } catch (const std::exception& e) {
        bundle.warnings.push_back(std::string("slice image ") + slice_name(axis) + ": " + e.what());
      }
    }
  }
  warnings.insert(warnings.end(), bundle.warnings.begin(), bundle.warnings.end());

  std::ostringstream text;
  text << std::fixed << std::setprecision(3);
  text << "tilefuse segmentation report\n";
  text << "scan: " << input.scan_id << "\n";
  text << "lattice: " << input.lattice << "\n";
  text << "segmenter: " << input.segmenter << "\n\n";
  text << "stage wall times (s)\n";
  double stage_sum = 0.0;
  for (const auto& s : input.stages) {
    text << "  " << std::left << std::setw(24) << s.stage << std::right << std::setw(10) << s.seconds << "\n";
    stage_sum += s.seconds;
  }
  text << "  " << std::left << std::setw(24) << "total" << std::right << std::setw(10) << input.total_seconds << "\n";
  text << "  " << std::left << std::setw(24) << "sum of stages" << std::right << std::setw(10) << stage_sum << "\n\n";

  if (input.labels != nullptr) {
    std::map<Label, std::size_t> counts;
    for (std::size_t i = 0; i < input.labels->size(); ++i) ++counts[(*input.labels)[i]];
    const Vec3 sp = input.labels->grid().spacing;
    const double voxel_mm3 = sp.x * sp.y * sp.z;
    text << "label volumes\n";
    text << "  label     voxels        mm^3\n";
    for (const auto& [label, n] : counts) {
      if (label == 0) continue;
      text << "  " << std::setw(5) << label << std::setw(11) << n << std::setw(12) << std::setprecision(1)
           << static_cast<double>(n) * voxel_mm3 << std::setprecision(3) << "\n";
    }
    text << "  labelled voxels: " << (input.labels->size() - counts[0]) << " of " << input.labels->size() << "\n\n";
  }

  if (input.metrics != nullptr) {
    std::vector<double> dscs;
    for (const auto& r : input.metrics->rows) {
      if (!r.missing) dscs.push_back(r.dsc);
    }
    const auto s = summarize(dscs);
    text << "evaluation: mean DSC " << s.mean << ", median " << s.median << " over " << s.count << " labels\n\n";
  }

  text << "warnings (" << warnings.size() << ")\n";
  for (const auto& w : warnings) text << "  - " << w << "\n";

  bundle.summary = dir / "summary.txt";
  std::ofstream out(bundle.summary);
  out << text.str();
  if (!out) throw Error(ErrorCode::write_failure, "cannot write report summary " + bundle.summary.string());
  return bundle;
}

}  // namespace tilefuse
