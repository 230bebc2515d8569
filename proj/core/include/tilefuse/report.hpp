#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tilefuse/metrics.hpp"
#include "tilefuse/volume.hpp"

namespace tilefuse {

struct StageTiming {
  std::string stage;
  double seconds = 0.0;
};

struct ReportInput {
  std::string scan_id;
  std::string lattice;
  std::string segmenter;
  std::vector<StageTiming> stages;
  double total_seconds = 0.0;
  std::vector<std::string> warnings;
  const Volume* intensity = nullptr;
  const LabelVolume* labels = nullptr;
  const LabelReport* metrics = nullptr;  // optional
};

struct ReportBundle {
  std::filesystem::path summary;
  std::vector<std::filesystem::path> slices;  // axial, coronal, sagittal
  std::vector<std::string> warnings;  // write problems, not fatal
};

enum class SliceAxis { axial, coronal, sagittal };

struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // row-major, top row first
};

/// Mid-plane slice: intensity mapped to 0..254 between the 1st and 99th
/// percentile of the slice, label boundaries drawn at 255.
GrayImage render_slice(const Volume& intensity, const LabelVolume& labels, SliceAxis axis);

/// Binary P5 PGM.
void write_pgm(const GrayImage& image, const std::filesystem::path& path);

/// Writes summary.txt and axial.pgm / coronal.pgm / sagittal.pgm into `dir`.
/// Image write failures become warnings in the bundle.
ReportBundle emit_report(const ReportInput& input, const std::filesystem::path& dir);

}  // namespace tilefuse
