#include <doctest.h>

#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "fixtures.hpp"
#include "tilefuse/metrics.hpp"
#include "tilefuse/nifti.hpp"
#include "tilefuse/pipeline.hpp"
#include "tilefuse/resample.hpp"

using namespace tilefuse;
using fixture::code_of;
namespace fs = std::filesystem;

namespace {

PhantomSpec small_spec(std::uint64_t seed, double noise) {
  PhantomSpec s;
  s.dims = {48, 48, 48};
  s.spacing = {2, 2, 2};
  s.label_count = 4;
  s.seed = seed;
  s.noise_std = noise;
  return s;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

// Five noisy phantom atlases and a fitted model, shared across test cases.
struct World {
  fixture::TempDir dir{"pipeline"};
  FitOptions fit;
  ModelInfo info;

  World() {
    fit.template_path = write_phantom(small_spec(1, 0.0), dir / "template").intensity;
    for (int i = 0; i < 5; ++i) {
      const auto files = write_phantom(small_spec(10 + i, 0.03 + 0.01 * i), dir / ("atlas" + std::to_string(i)));
      fit.atlases.push_back({"A" + std::to_string(i), files.intensity, files.labels});
    }
    fit.output_dir = dir / "model";
    info = fit_model(fit);
  }
};

World& world() {
  static World w;
  return w;
}

PipelineConfig base_config(const fs::path& input, const fs::path& out) {
  PipelineConfig c;
  c.input = input;
  c.model_dir = world().fit.output_dir;
  c.output_dir = out;
  c.atlas_count = 3;
  return c;
}

std::string test_plugin(const std::string& mode) { return std::string(TILEFUSE_TEST_PLUGIN) + " " + mode; }

double mean_dsc(const LabelVolume& a, const LabelVolume& b) {
  const auto rep = evaluate_labels(a, b);
  double s = 0;
  int n = 0;
  for (const auto& r : rep.rows) {
    s += r.missing ? 0.0 : r.dsc;
    ++n;
  }
  return s / n;
}

}  // namespace

TEST_CASE("fit writes a checksummed model directory") {
  const auto& w = world();
  CHECK(w.info.label_count == 4);
  CHECK(w.info.atlases.size() == 5);
  const auto j = nlohmann::json::parse(slurp(w.fit.output_dir / "model.json"));
  CHECK(j["format"] == "tilefuse-model");
  CHECK(j["manifold_components"] == 4);
  CHECK(j["manifold_degenerate"] == false);
  REQUIRE(j["files"].size() == 1 + 10 + 2);
  for (const auto& [rel, crc] : j["files"].items()) {
    char hex[16];
    std::snprintf(hex, sizeof hex, "%08x", file_crc32(w.fit.output_dir / rel));
    CHECK_MESSAGE(crc.get<std::string>() == hex, rel);
  }
  const auto info = read_model_info(w.fit.output_dir);
  CHECK(info.grid.same_as(read_volume(w.fit.template_path).grid()));
  const auto loaded = load_model_dir(w.fit.output_dir);
  CHECK(loaded.atlases.size() == 5);
  CHECK(loaded.manifold.atlas_ids == std::vector<std::string>{"A0", "A1", "A2", "A3", "A4"});
}

TEST_CASE("refitting is byte-identical") {
  auto fit = world().fit;
  fixture::TempDir other("refit");
  fit.output_dir = other / "model";
  fit_model(fit);
  for (const auto& e : fs::recursive_directory_iterator(world().fit.output_dir)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), world().fit.output_dir);
    CHECK_MESSAGE(fixture::same_bytes(e.path(), fit.output_dir / rel), rel.string());
  }
}

TEST_CASE("fit error cases") {
  auto fit = world().fit;
  fixture::TempDir tmp("fit_err");
  fit.output_dir = tmp / "model";
  fit.atlases.resize(1);
  CHECK(code_of([&] { fit_model(fit); }) == ErrorCode::insufficient_data);
  fit.allow_single_atlas = true;
  fit_model(fit);
  CHECK(nlohmann::json::parse(slurp(fit.output_dir / "model.json"))["manifold_degenerate"] == true);
  CHECK(load_model_dir(fit.output_dir).manifold.degenerate);

  auto bad = world().fit;
  bad.output_dir = tmp / "bad";
  PhantomSpec other = small_spec(3, 0.0);
  other.dims = {40, 48, 48};
  bad.atlases[2].labels = write_phantom(other, tmp / "other").labels;
  try {
    fit_model(bad);
    FAIL("mismatched atlas accepted");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::geometry_mismatch);
    CHECK(std::string(e.what()).find("A2") != std::string::npos);
  }
  auto dup = world().fit;
  dup.output_dir = tmp / "dup";
  dup.atlases[1].id = "A0";
  CHECK(code_of([&] { fit_model(dup); }) == ErrorCode::configuration);
  dup.atlases[1].id = "../x";
  CHECK(code_of([&] { fit_model(dup); }) == ErrorCode::configuration);
}

TEST_CASE("tampered or missing model files are detected") {
  fixture::TempDir tmp("tamper");
  fs::copy(world().fit.output_dir, tmp / "model", fs::copy_options::recursive);
  read_model_info(tmp / "model");
  {
    std::fstream f(tmp / "model" / "harmonization.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(40);
    f.put('\x5a');
  }
  CHECK(code_of([&] { read_model_info(tmp / "model"); }) == ErrorCode::corrupt_file);
  fs::remove(tmp / "model" / "manifold.bin");
  CHECK(code_of([&] { read_model_info(tmp / "model"); }) == ErrorCode::corrupt_file);
  CHECK(code_of([&] { read_model_info(tmp / "nowhere"); }) == ErrorCode::configuration);
  fs::create_directories(tmp / "empty");
  CHECK(code_of([&] { read_model_info(tmp / "empty"); }) == ErrorCode::configuration);
}

TEST_CASE("segment a misaligned phantom with the prior segmenter") {
  fixture::TempDir tmp("seg");
  PhantomSpec spec = small_spec(40, 0.02);
  spec.misalignment.translation = {4, -3, 2};
  spec.misalignment.rotation = {0.05, 0, -0.04};
  const auto scan = write_phantom(spec, tmp / "scan");
  const auto out = segment_scan(base_config(scan.intensity, tmp / "out"));
  const auto truth = read_labels(scan.labels);
  CHECK(out.labels.grid().same_as(truth.grid()));
  CHECK(out.labels.label_count() == 4);
  CHECK(mean_dsc(out.labels, truth) > 0.85);
  CHECK(out.selected_atlases.size() == 3);
  CHECK(out.segmenter_invocations == 27);
  CHECK(out.uncovered_voxels == 0);
  for (const char* f : {"labels.nii", "confidence.nii", "scan_to_canonical.txt", "lattice.json", "config.json",
                        "report/summary.txt", "report/axial.pgm", "intermediates/canonical.nii",
                        "intermediates/harmonized.nii", "intermediates/selected_atlases.txt",
                        "intermediates/canonical_labels.nii", "intermediates/tiles/tile_027_labels.nii"}) {
    CHECK_MESSAGE(fs::exists(tmp / "out" / f), f);
  }
  const auto written = read_labels(out.labels_path);
  CHECK(written == out.labels);
  std::vector<std::string> names;
  double sum = 0;
  for (const auto& s : out.stages) {
    names.push_back(s.stage);
    sum += s.seconds;
  }
  CHECK(names == std::vector<std::string>{"setup", "registration", "canonical_resample", "harmonization",
                                          "atlas_selection", "tile_segmentation", "fusion", "native_resample",
                                          "write_outputs"});
  CHECK(sum <= out.total_seconds + 1e-9);
  CHECK(sum >= 0.95 * out.total_seconds);
}

TEST_CASE("external plugin runs once per tile") {
  fixture::TempDir tmp("seg_ext");
  const auto scan = write_phantom(small_spec(41, 0.02), tmp / "scan");
  auto c = base_config(scan.intensity, tmp / "out");
  c.segmenter = "external";
  c.plugin_cmd = test_plugin("threshold");
  c.jobs = 3;
  const auto out = segment_scan(c);
  CHECK(out.segmenter_invocations == 27);
  int dirs = 0;
  for (const auto& e : fs::directory_iterator(tmp / "out" / "intermediates" / "plugin")) dirs += e.is_directory();
  CHECK(dirs == 27);
  CHECK(out.labels.grid().same_as(read_volume(scan.intensity).grid()));

  c.lattice = "slant8";
  c.output_dir = tmp / "out8";
  CHECK(segment_scan(c).segmenter_invocations == 8);

  c.lattice = "custom";
  c.tile_counts = Dims{2, 1, 1};
  c.tile_size = Dims{30, 48, 48};
  c.output_dir = tmp / "outc";
  CHECK(segment_scan(c).segmenter_invocations == 2);
}

TEST_CASE("plugin failure names the stage and tile") {
  fixture::TempDir tmp("seg_fail");
  const auto scan = write_phantom(small_spec(42, 0.02), tmp / "scan");
  auto c = base_config(scan.intensity, tmp / "out");
  c.segmenter = "external";
  c.plugin_cmd = test_plugin("fail");
  try {
    segment_scan(c);
    FAIL("failing plugin accepted");
  } catch (const Error& e) {
    const std::string msg = e.what();
    CHECK(e.code() == ErrorCode::plugin_failure);
    CHECK(msg.rfind("stage tile_segmentation: tile ", 0) == 0);
    CHECK(msg.find("deliberate failure") != std::string::npos);
  }
  CHECK(fs::exists(tmp / "out" / "intermediates"));  // kept for inspection
}

TEST_CASE("pre-hook replaces the scan") {
  fixture::TempDir tmp("hook");
  const auto scan = write_phantom(small_spec(43, 0.02), tmp / "scan");
  write_file(tmp / "copy.sh", "cp \"$1\" \"$2\"\necho ran >&2\n");
  auto c = base_config(scan.intensity, tmp / "out");
  c.pre_hook = "sh " + (tmp / "copy.sh").string();
  const auto out = segment_scan(c);
  CHECK(out.stages[1].stage == "pre_hook");
  CHECK(fs::exists(tmp / "out" / "intermediates" / "prehook.nii"));
  CHECK(slurp(tmp / "out" / "intermediates" / "prehook_stderr.log").find("ran") != std::string::npos);

  c.pre_hook = "false";
  c.output_dir = tmp / "out2";
  try {
    segment_scan(c);
    FAIL("failing hook accepted");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::plugin_failure);
    CHECK(std::string(e.what()).rfind("stage pre_hook:", 0) == 0);
  }

  PhantomSpec small = small_spec(44, 0.0);
  small.dims = {40, 40, 40};
  const auto other = write_phantom(small, tmp / "small");
  write_file(tmp / "swap.sh", "cp '" + other.intensity.string() + "' \"$2\"\n");
  c.pre_hook = "sh " + (tmp / "swap.sh").string();
  c.output_dir = tmp / "out3";
  CHECK(code_of([&] { segment_scan(c); }) == ErrorCode::protocol_violation);
}

TEST_CASE("purged intermediates") {
  fixture::TempDir tmp("purge");
  const auto scan = write_phantom(small_spec(45, 0.02), tmp / "scan");
  auto c = base_config(scan.intensity, tmp / "out");
  c.keep_intermediates = false;
  segment_scan(c);
  CHECK(fs::exists(tmp / "out" / "labels.nii"));
  CHECK_FALSE(fs::exists(tmp / "out" / "intermediates"));
}

TEST_CASE("configuration errors") {
  fixture::TempDir tmp("cfg");
  const auto scan = write_phantom(small_spec(46, 0.02), tmp / "scan");
  auto c = base_config(scan.intensity, tmp / "out");
  c.model_dir = tmp / "no_model";
  CHECK(code_of([&] { segment_scan(c); }) == ErrorCode::configuration);

  c = base_config(tmp / "missing.nii", tmp / "out");
  CHECK(code_of([&] { segment_scan(c); }) == ErrorCode::configuration);

  c = base_config(scan.intensity, tmp / "out");
  c.label_count = 3;
  CHECK(code_of([&] { segment_scan(c); }) == ErrorCode::configuration);
  c.label_count = 0;
  c.lattice = "custom";
  c.tile_counts = Dims{1, 1, 1};
  c.tile_size = Dims{20, 48, 48};
  CHECK(code_of([&] { segment_scan(c); }) == ErrorCode::configuration);

  const auto check_invalid = [&](auto mutate) {
    auto k = base_config(scan.intensity, tmp / "out");
    mutate(k);
    CHECK(code_of([&] { k.validate(); }) == ErrorCode::configuration);
  };
  check_invalid([](PipelineConfig& k) { k.lattice = "slant64"; });
  check_invalid([](PipelineConfig& k) { k.tile_size = Dims{1, 1, 1}; });
  check_invalid([](PipelineConfig& k) { k.segmenter = "unet"; });
  check_invalid([](PipelineConfig& k) { k.segmenter = "external"; });
  check_invalid([](PipelineConfig& k) { k.jobs = 0; });
  check_invalid([](PipelineConfig& k) { k.registration.dof = 6; });
  check_invalid([](PipelineConfig& k) { k.output_dir.clear(); });
}

TEST_CASE("config JSON is strict and round trips") {
  auto c = PipelineConfig::from_json(R"({"input": "a.nii", "model_dir": "m", "output_dir": "o", "labels": 7,
                                         "lattice": "custom", "tile_size": [8, 8, 8], "tile_counts": [2, 2, 2],
                                         "registration": {"levels": 2}, "keep_intermediates": false})");
  CHECK(c.label_count == 7);
  CHECK(c.registration.levels == 2);
  CHECK(c.registration.dof == 12);
  CHECK(c.tile_size == Dims{8, 8, 8});
  CHECK_FALSE(c.keep_intermediates);
  const auto back = PipelineConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK(code_of([] { PipelineConfig::from_json(R"({"inptu": "a.nii"})"); }) == ErrorCode::configuration);
  CHECK(code_of([] { PipelineConfig::from_json(R"({"jobs": "four"})"); }) == ErrorCode::configuration);
  CHECK(code_of([] { PipelineConfig::from_json(R"({"tile_size": [1, 2]})"); }) == ErrorCode::configuration);
  CHECK(code_of([] { PipelineConfig::from_json(R"({"registration": {"step": 1}})"); }) == ErrorCode::configuration);
  CHECK(code_of([] { PipelineConfig::from_json("[1"); }) == ErrorCode::configuration);
  CHECK(code_of([] { PipelineConfig::from_file("/nonexistent/config.json"); }) == ErrorCode::configuration);
}

TEST_CASE("batch continues past a corrupt scan and is deterministic") {
  fixture::TempDir tmp("batch");
  const auto a = write_phantom(small_spec(47, 0.02), tmp / "sub1");
  const auto b = write_phantom(small_spec(48, 0.02), tmp / "sub2");
  write_file(tmp / "broken.nii", "not a nifti file at all");
  write_file(tmp / "list.txt", "# scans\n" + a.intensity.string() + "\n\n" + (tmp / "broken.nii").string() + "\n" +
                                   b.intensity.string() + "\n");
  PipelineConfig c = base_config("", tmp / "run1");
  const auto entries = batch_segment(c, tmp / "list.txt");
  REQUIRE(entries.size() == 3);
  CHECK(entries[0].ok);
  CHECK_FALSE(entries[1].ok);
  CHECK(entries[1].message.find("stage setup") != std::string::npos);
  CHECK(entries[2].ok);
  const std::string tsv = slurp(tmp / "run1" / "summary.tsv");
  CHECK(tsv.rfind("scan\tstatus\twall_seconds\tmessage\n", 0) == 0);
  CHECK(tsv.find("\tfailed\t") != std::string::npos);
  CHECK(fs::exists(tmp / "run1" / "sub1_t1" / "labels.nii"));
  CHECK(fs::exists(tmp / "run1" / "sub2_t1" / "labels.nii"));

  c.output_dir = tmp / "run2";
  c.jobs = 2;
  batch_segment(c, tmp / "list.txt");
  CHECK(fixture::same_bytes(tmp / "run1" / "sub1_t1" / "labels.nii", tmp / "run2" / "sub1_t1" / "labels.nii"));
  CHECK(fixture::same_bytes(tmp / "run1" / "sub2_t1" / "labels.nii", tmp / "run2" / "sub2_t1" / "labels.nii"));

  write_file(tmp / "empty.txt", "# nothing\n");
  CHECK(code_of([&] { batch_segment(c, tmp / "empty.txt"); }) == ErrorCode::configuration);
}

TEST_CASE("evaluate writes per-method and comparison tables") {
  fixture::TempDir tmp("eval");
  PhantomSpec spec = small_spec(49, 0.0);
  spec.label_count = 6;
  spec.dims = {64, 64, 64};
  spec.spacing = {1.5, 1.5, 1.5};
  const auto truth = write_phantom(spec, tmp / "truth");
  auto labels = read_labels(truth.labels);
  auto noisy = labels;
  for (std::size_t i = 0; i < noisy.size(); i += 7) {
    if (noisy[i] > 1) noisy[i] = static_cast<Label>(noisy[i] - 1);
  }
  store_nifti(labels, tmp / "exact.nii");
  store_nifti(noisy, tmp / "noisy.nii");
  write_file(tmp / "names.txt", "1 outer\n2 second\n");

  EvaluateOptions o;
  o.predictions = {tmp / "exact.nii", tmp / "noisy.nii"};
  o.truth = truth.labels;
  o.label_names = tmp / "names.txt";
  o.output_dir = tmp / "eval";
  const auto res = evaluate_files(o);
  CHECK(res.methods == std::vector<std::string>{"exact", "noisy"});
  CHECK(res.reports[0].rows[0].dsc == 1.0);
  CHECK(res.reports[0].rows[0].name == "outer");
  const std::string csv = slurp(tmp / "eval" / "exact_labels.csv");
  CHECK(csv.find("1,outer,1,0,0,0,") != std::string::npos);
  CHECK(fs::exists(tmp / "eval" / "noisy_summary.json"));
  const std::string best = slurp(tmp / "eval" / "best_within_delta.tsv");
  CHECK(best.rfind("method\tdelta_0\t", 0) == 0);
  CHECK(best.find("exact\t5\t5\t5\t5") != std::string::npos);
  const std::string wil = slurp(tmp / "eval" / "wilcoxon.tsv");
  CHECK(wil.find("exact\tnoisy\t5\t") != std::string::npos);
  CHECK(wil.find("exact\n") != std::string::npos);

  // A shifted prediction evaluated through its transform.
  PhantomSpec moved = spec;
  moved.misalignment.translation = {3, 0, 0};
  const auto shifted = write_phantom(moved, tmp / "shifted");
  write_transform(invert(phantom_misalignment(moved)), tmp / "back.txt");
  EvaluateOptions t;
  t.predictions = {shifted.labels};
  t.method_names = {"shifted"};
  t.truth = truth.labels;
  t.transform = tmp / "back.txt";
  t.output_dir = tmp / "eval2";
  const auto r = evaluate_files(t);
  CHECK(mean_dsc(resample(read_labels(shifted.labels), invert(phantom_misalignment(moved)), labels.grid(),
                          Interp::nearest),
                 labels) > 0.97);
  CHECK(r.reports[0].rows[0].dsc > 0.97);
  t.transform.clear();
  t.output_dir = tmp / "eval3";
  PhantomSpec coarse = spec;
  coarse.dims = {60, 64, 64};
  t.predictions = {write_phantom(coarse, tmp / "coarse").labels};
  CHECK(code_of([&] { evaluate_files(t); }) == ErrorCode::geometry_mismatch);
}
