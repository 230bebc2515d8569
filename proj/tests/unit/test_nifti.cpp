#include <doctest.h>

#include <array>
#include <cstring>
#include <random>

#include <zlib.h>

#include "fixtures.hpp"
#include "tilefuse/error.hpp"
#include "tilefuse/nifti.hpp"

using namespace tilefuse;
namespace fs = std::filesystem;

namespace {

// Independent minimal header writer used to feed the reader variants the
// library never writes itself.
struct RawHeader {
  std::array<unsigned char, 352> bytes{};
  bool big_endian = false;

  template <typename T>
  void put(int offset, T value) {
    unsigned char tmp[sizeof(T)];
    std::memcpy(tmp, &value, sizeof(T));
    if (big_endian) std::reverse(tmp, tmp + sizeof(T));
    std::memcpy(bytes.data() + offset, tmp, sizeof(T));
  }
};

RawHeader header(std::array<std::int16_t, 3> dims, std::int16_t datatype, std::int16_t bitpix, bool big = false) {
  RawHeader h;
  h.big_endian = big;
  h.put<std::int32_t>(0, 348);
  h.put<std::int16_t>(40, 3);
  for (int a = 0; a < 3; ++a) h.put<std::int16_t>(42 + 2 * a, dims[a]);
  for (int a = 4; a < 8; ++a) h.put<std::int16_t>(40 + 2 * a, 1);
  h.put<std::int16_t>(70, datatype);
  h.put<std::int16_t>(72, bitpix);
  for (int a = 0; a < 8; ++a) h.put<float>(76 + 4 * a, 1.0f);
  h.put<float>(108, 352.0f);
  std::memcpy(h.bytes.data() + 344, "n+1\0", 4);
  return h;
}

template <typename T>
void write_raw(const fs::path& path, const RawHeader& h, const std::vector<T>& data) {
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(h.bytes.data()), 352);
  for (T v : data) {
    unsigned char tmp[sizeof(T)];
    std::memcpy(tmp, &v, sizeof(T));
    if (h.big_endian) std::reverse(tmp, tmp + sizeof(T));
    out.write(reinterpret_cast<const char*>(tmp), sizeof(T));
  }
}

}  // namespace

TEST_CASE("float volumes round trip through .nii and .nii.gz") {
  fixture::TempDir dir("nifti");
  std::mt19937_64 rng(3);
  Volume v = fixture::random_volume({7, 5, 3}, rng, -50, 50);
  const Grid g{v.dims(), {0.8, 1.2, 2.5},
               compose(AffineTransform::translation({-10, 4, 7}), AffineTransform::scaling({0.8, 1.2, 2.5}))};
  v = Volume(g, std::vector<float>(v.data().begin(), v.data().end()));
  for (const char* name : {"v.nii", "v.nii.gz"}) {
    store_nifti(v, dir / name);
    const Volume r = read_volume(dir / name);
    CHECK(r == v);
    CHECK(r.grid().same_as(v.grid()));
  }
  // gzip output really is compressed data
  std::ifstream gz(dir / "v.nii.gz", std::ios::binary);
  CHECK(gz.get() == 0x1f);
  CHECK(gz.get() == 0x8b);
}

TEST_CASE("label volumes keep their label count and narrow storage") {
  fixture::TempDir dir("nifti_labels");
  std::mt19937_64 rng(4);
  const Grid g = Grid::make({6, 6, 6}, {1, 1, 1});
  const LabelVolume small = fixture::random_labels(g, 7, rng);
  store_nifti(small, dir / "small.nii");
  CHECK(fs::file_size(dir / "small.nii") == 352 + 216);
  const LabelVolume r = read_labels(dir / "small.nii");
  CHECK(r == small);
  CHECK(r.label_count() == 7);
  CHECK(std::holds_alternative<LabelVolume>(load_nifti(dir / "small.nii")));

  const LabelVolume wide = fixture::random_labels(g, 300, rng);
  store_nifti(wide, dir / "wide.nii.gz");
  CHECK(read_labels(dir / "wide.nii.gz") == wide);

  // Float files are intensities even when their values look like labels.
  store_nifti(Volume(g, 1.0f), dir / "float.nii");
  CHECK(std::holds_alternative<Volume>(load_nifti(dir / "float.nii")));
}

TEST_CASE("int16 data with scaling and big-endian headers") {
  fixture::TempDir dir("nifti_raw");
  RawHeader h = header({2, 2, 1}, 4, 16, true);
  h.put<float>(112, 0.5f);
  h.put<float>(116, 10.0f);
  write_raw<std::int16_t>(dir / "be.nii", h, {-2, 0, 2, 400});
  const Volume v = read_volume(dir / "be.nii");
  CHECK(v[0] == 9.0f);
  CHECK(v[1] == 10.0f);
  CHECK(v[2] == 11.0f);
  CHECK(v[3] == 210.0f);
}

TEST_CASE("geometry precedence: sform, then qform, then pixdim") {
  fixture::TempDir dir("nifti_geom");
  const std::vector<std::uint8_t> data(8, 1);

  RawHeader diag = header({2, 2, 2}, 2, 8);
  diag.put<float>(80, 2.0f);
  diag.put<float>(84, 3.0f);
  diag.put<float>(88, 4.0f);
  write_raw(dir / "diag.nii", diag, data);
  CHECK(read_volume(dir / "diag.nii").grid().world({1, 1, 1}) == Vec3{2, 3, 4});

  // qform: 180 degrees about z (b=c=0, d=1), offset (5,6,7), qfac 1
  RawHeader q = diag;
  q.put<std::int16_t>(252, 1);
  q.put<float>(256, 0.0f);
  q.put<float>(260, 0.0f);
  q.put<float>(264, 1.0f);
  q.put<float>(268, 5.0f);
  q.put<float>(272, 6.0f);
  q.put<float>(276, 7.0f);
  write_raw(dir / "q.nii", q, data);
  const Vec3 wq = read_volume(dir / "q.nii").grid().world({1, 1, 1});
  CHECK(wq.x == doctest::Approx(3.0));
  CHECK(wq.y == doctest::Approx(3.0));
  CHECK(wq.z == doctest::Approx(11.0));

  // sform wins over qform
  RawHeader s = q;
  s.put<std::int16_t>(254, 1);
  const float rows[12] = {1, 0, 0, 100, 0, 1, 0, 200, 0, 0, 1, 300};
  for (int i = 0; i < 12; ++i) s.put<float>(280 + 4 * i, rows[i]);
  write_raw(dir / "s.nii", s, data);
  CHECK(read_volume(dir / "s.nii").grid().world({1, 1, 1}) == Vec3{101, 201, 301});
}

TEST_CASE("reader errors") {
  fixture::TempDir dir("nifti_err");
  auto code_of = [](const fs::path& p) {
    try {
      read_volume(p);
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::spec;  // sentinel: no error
  };
  CHECK(code_of(dir / "missing.nii") == ErrorCode::format);

  RawHeader f64 = header({2, 2, 2}, 64, 64);
  write_raw(dir / "f64.nii", f64, std::vector<double>(8, 1.0));
  CHECK(code_of(dir / "f64.nii") == ErrorCode::unsupported_datatype);

  RawHeader u8 = header({4, 4, 4}, 2, 8);
  write_raw(dir / "short.nii", u8, std::vector<std::uint8_t>(10, 1));
  CHECK(code_of(dir / "short.nii") == ErrorCode::corrupt_file);

  std::ofstream(dir / "junk.nii") << "not a nifti file at all";
  const ErrorCode junk = code_of(dir / "junk.nii");
  CHECK((junk == ErrorCode::corrupt_file || junk == ErrorCode::format));

  RawHeader four = header({2, 2, 2}, 2, 8);
  four.put<std::int16_t>(40, 4);
  four.put<std::int16_t>(48, 3);
  write_raw(dir / "4d.nii", four, std::vector<std::uint8_t>(24, 1));
  CHECK(code_of(dir / "4d.nii") == ErrorCode::format);

  // Non-integral values cannot be labels.
  store_nifti(Volume(Grid::make({2, 1, 1}, {1, 1, 1}), {0.5f, 1.0f}), dir / "frac.nii");
  CHECK_THROWS_AS(read_labels(dir / "frac.nii"), Error);
}
