#include <doctest.h>

#include <fstream>
#include <random>
#include <sstream>

#include "fixtures.hpp"
#include "tilefuse/phantom.hpp"
#include "tilefuse/report.hpp"

using namespace tilefuse;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

struct Pgm {
  int width = 0, height = 0, maxval = 0;
  std::string pixels;
};

Pgm parse_pgm(const std::string& raw) {
  std::istringstream in(raw);
  std::string magic;
  Pgm p;
  in >> magic >> p.width >> p.height >> p.maxval;
  REQUIRE(magic == "P5");
  in.get();
  p.pixels = raw.substr(static_cast<std::size_t>(in.tellg()));
  return p;
}

}  // namespace

TEST_CASE("slice rendering geometry and boundaries") {
  const Grid g = Grid::make({6, 5, 4}, {1, 1, 1});
  Volume v(g, 0.0f);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(i);
  LabelVolume l(g, 2);
  const auto flat = render_slice(v, l, SliceAxis::axial);
  CHECK(flat.width == 6);
  CHECK(flat.height == 5);
  CHECK(std::count(flat.pixels.begin(), flat.pixels.end(), std::uint8_t{255}) == 0);
  // Top row shows the largest y, so it is brighter than the bottom row.
  CHECK(flat.pixels[0] > flat.pixels[static_cast<std::size_t>(4 * 6)]);
  const auto cor = render_slice(v, l, SliceAxis::coronal);
  CHECK(cor.width == 6);
  CHECK(cor.height == 4);
  const auto sag = render_slice(v, l, SliceAxis::sagittal);
  CHECK(sag.width == 5);
  CHECK(sag.height == 4);

  for (std::int64_t z = 0; z < 4; ++z) {
    for (std::int64_t y = 0; y < 5; ++y) l(3, y, z) = 1;
  }
  const auto edged = render_slice(v, l, SliceAxis::axial);
  for (int row = 0; row < 5; ++row) {
    for (int col = 0; col < 6; ++col) {
      const bool edge = col >= 2 && col <= 4;
      CHECK((edged.pixels[static_cast<std::size_t>(row * 6 + col)] == 255) == edge);
    }
  }
  CHECK_THROWS_AS(render_slice(v, LabelVolume(Grid::make({6, 5, 3}, {1, 1, 1}), 2), SliceAxis::axial), Error);
}

TEST_CASE("report bundle contents") {
  fixture::TempDir dir("report");
  PhantomSpec spec;
  spec.dims = {32, 30, 28};
  spec.spacing = {2, 2, 2};
  spec.label_count = 3;
  const auto p = make_phantom(spec);
  ReportInput in;
  in.scan_id = "sub-01";
  in.lattice = "slant27";
  in.segmenter = "prior";
  in.stages = {{"registration", 1.25}, {"fusion", 0.5}, {"write_outputs", 0.25}};
  in.total_seconds = 2.01;
  in.warnings = {"low registration similarity 0.150"};
  in.intensity = &p.intensity;
  in.labels = &p.labels;
  const auto bundle = emit_report(in, dir / "report");
  CHECK(bundle.warnings.empty());
  REQUIRE(bundle.slices.size() == 3);
  for (const char* name : {"axial.pgm", "coronal.pgm", "sagittal.pgm"}) {
    const auto pgm = parse_pgm(slurp(dir / "report" / name));
    CHECK(pgm.maxval == 255);
    CHECK(pgm.pixels.size() == static_cast<std::size_t>(pgm.width * pgm.height));
  }
  CHECK(parse_pgm(slurp(dir / "report" / "axial.pgm")).width == 32);
  CHECK(parse_pgm(slurp(dir / "report" / "sagittal.pgm")).width == 30);

  const std::string text = slurp(bundle.summary);
  CHECK(text.find("scan: sub-01") != std::string::npos);
  CHECK(text.find("registration") != std::string::npos);
  CHECK(text.find("sum of stages") != std::string::npos);
  CHECK(text.find("2.000") != std::string::npos);
  CHECK(text.find("warnings (1)") != std::string::npos);
  CHECK(text.find("low registration similarity") != std::string::npos);
  std::size_t label1 = 0;
  for (std::size_t i = 0; i < p.labels.size(); ++i) label1 += p.labels[i] == 1;
  std::ostringstream expect;
  expect << label1 << std::fixed;
  CHECK(text.find(expect.str()) != std::string::npos);
  CHECK(text.find(std::to_string(label1 * 8) + ".0") != std::string::npos);
}

TEST_CASE("image write problems become warnings") {
  fixture::TempDir dir("report_warn");
  const Grid g = Grid::make({4, 4, 4}, {1, 1, 1});
  const Volume v(g, 1.0f);
  const LabelVolume l(g, 2);
  fs::create_directories(dir / "r" / "coronal.pgm");  // a directory where the image should go
  ReportInput in;
  in.intensity = &v;
  in.labels = &l;
  const auto bundle = emit_report(in, dir / "r");
  CHECK(bundle.slices.size() == 2);
  REQUIRE(bundle.warnings.size() == 1);
  CHECK(bundle.warnings[0].find("coronal") != std::string::npos);
  CHECK(slurp(bundle.summary).find("warnings (1)") != std::string::npos);
}
