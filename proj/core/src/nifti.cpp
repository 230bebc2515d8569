#include "tilefuse/nifti.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <memory>

namespace tilefuse {
namespace {

constexpr int kHeaderSize = 348;
constexpr int kVoxOffset = 352;
constexpr std::int16_t kDtUint8 = 2;
constexpr std::int16_t kDtInt16 = 4;
constexpr std::int16_t kDtFloat32 = 16;
constexpr std::int16_t kIntentLabel = 1002;

// Byte offsets into the 348-byte nifti_1_header.
namespace off {
constexpr int sizeof_hdr = 0;
constexpr int dim = 40;
constexpr int intent_p1 = 56;
constexpr int intent_code = 68;
constexpr int datatype = 70;
constexpr int bitpix = 72;
constexpr int pixdim = 76;
constexpr int vox_offset = 108;
constexpr int scl_slope = 112;
constexpr int scl_inter = 116;
constexpr int xyzt_units = 123;
constexpr int descrip = 148;
constexpr int qform_code = 252;
constexpr int sform_code = 254;
constexpr int quatern_b = 256;
constexpr int qoffset_x = 268;
constexpr int srow_x = 280;
constexpr int magic = 344;
}  // namespace off

using HeaderBytes = std::array<unsigned char, kHeaderSize>;

template <typename T>
T byteswap_value(T v) {
  auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
  std::reverse(bytes.begin(), bytes.end());
  return std::bit_cast<T>(bytes);
}

class HeaderView {
 public:
  HeaderView(HeaderBytes& bytes, bool swapped) : bytes_(bytes), swapped_(swapped) {}

  template <typename T>
  T get(int offset, int index = 0) const {
    T v;
    std::memcpy(&v, bytes_.data() + offset + index * static_cast<int>(sizeof(T)), sizeof(T));
    return swapped_ ? byteswap_value(v) : v;
  }
  template <typename T>
  void set(int offset, T v, int index = 0) {
    std::memcpy(bytes_.data() + offset + index * static_cast<int>(sizeof(T)), &v, sizeof(T));
  }

 private:
  HeaderBytes& bytes_;
  bool swapped_;
};

struct GzFile {
  gzFile handle = nullptr;
  ~GzFile() {
    if (handle != nullptr) gzclose(handle);
  }
};

std::size_t read_exact(gzFile f, void* dst, std::size_t n) {
  std::size_t total = 0;
  auto* out = static_cast<unsigned char*>(dst);
  while (total < n) {
    const auto chunk = static_cast<unsigned>(std::min<std::size_t>(n - total, 1u << 30));
    const int got = gzread(f, out + total, chunk);
    if (got <= 0) break;
    total += static_cast<std::size_t>(got);
  }
  return total;
}

AffineTransform quatern_to_affine(float qb, float qc, float qd, Vec3 offset, Vec3 spacing, float qfac) {
  double b = qb;
  double c = qc;
  double d = qd;
  double a = 1.0 - (b * b + c * c + d * d);
  if (a < 1e-7) {
    a = 1.0 / std::sqrt(b * b + c * c + d * d);
    b *= a;
    c *= a;
    d *= a;
    a = 0.0;
  } else {
    a = std::sqrt(a);
  }
  const double xd = spacing.x;
  const double yd = spacing.y;
  const double zd = qfac < 0 ? -spacing.z : spacing.z;
  AffineTransform::Matrix m{};
  m[0] = (a * a + b * b - c * c - d * d) * xd;
  m[1] = 2.0 * (b * c - a * d) * yd;
  m[2] = 2.0 * (b * d + a * c) * zd;
  m[4] = 2.0 * (b * c + a * d) * xd;
  m[5] = (a * a + c * c - b * b - d * d) * yd;
  m[6] = 2.0 * (c * d - a * b) * zd;
  m[8] = 2.0 * (b * d - a * c) * xd;
  m[9] = 2.0 * (c * d + a * b) * yd;
  m[10] = (a * a + d * d - c * c - b * b) * zd;
  m[3] = offset.x;
  m[7] = offset.y;
  m[11] = offset.z;
  m[15] = 1.0;
  return AffineTransform(m);
}

struct RawNifti {
  Grid grid;
  std::vector<double> values;  // scaled
  std::int16_t datatype = 0;
  bool label_intent = false;
  float intent_p1 = 0.0f;
};

RawNifti read_raw(const std::filesystem::path& path) {
  GzFile file;
  file.handle = gzopen(path.string().c_str(), "rb");
  if (file.handle == nullptr) {
    throw Error(ErrorCode::format, "cannot open NIfTI file " + path.string());
  }
  HeaderBytes bytes{};
  if (read_exact(file.handle, bytes.data(), bytes.size()) != bytes.size()) {
    throw Error(ErrorCode::corrupt_file, "truncated NIfTI header in " + path.string());
  }
  if (std::memcmp(bytes.data() + off::magic, "n+1\0", 4) != 0) {
    throw Error(ErrorCode::format, "not a single-file NIfTI-1 (bad magic) " + path.string());
  }
  std::int32_t sizeof_hdr;
  std::memcpy(&sizeof_hdr, bytes.data(), 4);
  bool swapped = false;
  if (sizeof_hdr != kHeaderSize) {
    if (byteswap_value(sizeof_hdr) != kHeaderSize) {
      throw Error(ErrorCode::format, "bad sizeof_hdr in " + path.string());
    }
    swapped = true;
  }
  HeaderView h(bytes, swapped);

  const auto ndim = h.get<std::int16_t>(off::dim, 0);
  if (ndim < 1 || ndim > 7) throw Error(ErrorCode::format, "bad dim[0] in " + path.string());
  Dims dims{1, 1, 1};
  for (int a = 0; a < std::min<int>(ndim, 3); ++a) dims[a] = h.get<std::int16_t>(off::dim, a + 1);
  for (int a = 4; a <= ndim; ++a) {
    if (h.get<std::int16_t>(off::dim, a) > 1) {
      throw Error(ErrorCode::format, "only 3D volumes are supported: " + path.string());
    }
  }
  if (dims.x <= 0 || dims.y <= 0 || dims.z <= 0) {
    throw Error(ErrorCode::format, "non-positive dims in " + path.string());
  }

  Vec3 spacing;
  for (int a = 0; a < 3; ++a) {
    const float p = a < ndim ? h.get<float>(off::pixdim, a + 1) : 1.0f;
    spacing[a] = (std::isfinite(p) && p != 0.0f) ? std::abs(static_cast<double>(p)) : 1.0;
  }

  const auto datatype = h.get<std::int16_t>(off::datatype);
  std::size_t bytes_per_voxel = 0;
  switch (datatype) {
    case kDtUint8: bytes_per_voxel = 1; break;
    case kDtInt16: bytes_per_voxel = 2; break;
    case kDtFloat32: bytes_per_voxel = 4; break;
    default:
      throw Error(ErrorCode::unsupported_datatype,
                  "unsupported NIfTI datatype " + std::to_string(datatype) + " in " + path.string());
  }

  const auto sform_code = h.get<std::int16_t>(off::sform_code);
  const auto qform_code = h.get<std::int16_t>(off::qform_code);
  AffineTransform v2w;
  if (sform_code > 0) {
    AffineTransform::Matrix m{};
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 4; ++c) {
        m[static_cast<std::size_t>(r * 4 + c)] = h.get<float>(off::srow_x + r * 16, c);
      }
    }
    m[15] = 1.0;
    v2w = AffineTransform(m);
  } else if (qform_code > 0) {
    const Vec3 offset{h.get<float>(off::qoffset_x, 0), h.get<float>(off::qoffset_x, 1),
                      h.get<float>(off::qoffset_x, 2)};
    v2w = quatern_to_affine(h.get<float>(off::quatern_b, 0), h.get<float>(off::quatern_b, 1),
                            h.get<float>(off::quatern_b, 2), offset, spacing, h.get<float>(off::pixdim, 0));
  } else {
    v2w = AffineTransform::scaling(spacing);
  }

  const float vox_offset = h.get<float>(off::vox_offset);
  if (!std::isfinite(vox_offset) || vox_offset < static_cast<float>(kHeaderSize)) {
    throw Error(ErrorCode::format, "bad vox_offset in " + path.string());
  }
  const auto skip = static_cast<std::size_t>(vox_offset) - kHeaderSize;
  std::vector<unsigned char> scratch(skip);
  if (read_exact(file.handle, scratch.data(), skip) != skip) {
    throw Error(ErrorCode::corrupt_file, "truncated NIfTI extension area in " + path.string());
  }

  const std::size_t n = dims.count();
  std::vector<unsigned char> raw(n * bytes_per_voxel);
  if (read_exact(file.handle, raw.data(), raw.size()) != raw.size()) {
    throw Error(ErrorCode::corrupt_file, "truncated NIfTI data section in " + path.string());
  }

  float slope = h.get<float>(off::scl_slope);
  float inter = h.get<float>(off::scl_inter);
  const bool scaled = std::isfinite(slope) && slope != 0.0f && !(slope == 1.0f && inter == 0.0f);
  if (!std::isfinite(inter)) inter = 0.0f;

  RawNifti out;
  out.grid = Grid{dims, spacing, v2w};
  out.grid.validate();
  out.datatype = datatype;
  out.label_intent = h.get<std::int16_t>(off::intent_code) == kIntentLabel;
  out.intent_p1 = h.get<float>(off::intent_p1);
  out.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double v = 0.0;
    const unsigned char* p = raw.data() + i * bytes_per_voxel;
    switch (datatype) {
      case kDtUint8: v = *p; break;
      case kDtInt16: {
        std::int16_t s;
        std::memcpy(&s, p, 2);
        v = swapped ? byteswap_value(s) : s;
        break;
      }
      default: {
        float f;
        std::memcpy(&f, p, 4);
        v = swapped ? byteswap_value(f) : f;
        break;
      }
    }
    out.values[i] = scaled ? static_cast<double>(slope) * v + static_cast<double>(inter) : v;
  }
  return out;
}

LabelVolume to_labels(RawNifti raw, std::optional<int> label_count, const std::filesystem::path& path) {
  double max_value = 0.0;
  std::vector<Label> data(raw.values.size());
  for (std::size_t i = 0; i < raw.values.size(); ++i) {
    const double v = raw.values[i];
    if (!std::isfinite(v) || v < 0.0 || v != std::floor(v) || v > 65535.0) {
      throw Error(ErrorCode::label_range, "non-label value " + std::to_string(v) + " in " + path.string());
    }
    max_value = std::max(max_value, v);
    data[i] = static_cast<Label>(v);
  }
  int count = static_cast<int>(max_value) + 1;
  if (label_count) {
    count = *label_count;
  } else if (raw.label_intent && raw.intent_p1 >= 1.0f) {
    count = static_cast<int>(raw.intent_p1);
  }
  return LabelVolume(raw.grid, std::move(data), count);
}

void write_bytes(const std::filesystem::path& path, const HeaderBytes& header,
                 const std::vector<unsigned char>& payload) {
  const std::array<unsigned char, 4> extension{};
  const auto ext = path.extension().string();
  if (ext == ".gz") {
    GzFile file;
    file.handle = gzopen(path.string().c_str(), "wb6");
    if (file.handle == nullptr) throw Error(ErrorCode::write_failure, "cannot open " + path.string());
    bool ok = gzwrite(file.handle, header.data(), kHeaderSize) == kHeaderSize &&
              gzwrite(file.handle, extension.data(), 4) == 4;
    std::size_t written = 0;
    while (ok && written < payload.size()) {
      const auto chunk = static_cast<unsigned>(std::min<std::size_t>(payload.size() - written, 1u << 30));
      ok = gzwrite(file.handle, payload.data() + written, chunk) == static_cast<int>(chunk);
      written += chunk;
    }
    const int rc = gzclose(file.handle);
    file.handle = nullptr;
    if (!ok || rc != Z_OK) throw Error(ErrorCode::write_failure, "failed writing " + path.string());
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::write_failure, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(header.data()), kHeaderSize);
  out.write(reinterpret_cast<const char*>(extension.data()), 4);
  out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  out.close();
  if (!out) throw Error(ErrorCode::write_failure, "failed writing " + path.string());
}

HeaderBytes make_header(const Grid& grid, std::int16_t datatype, std::int16_t bitpix) {
  HeaderBytes bytes{};
  HeaderView h(bytes, false);
  h.set<std::int32_t>(off::sizeof_hdr, kHeaderSize);
  for (int a = 0; a < 3; ++a) {
    if (grid.dims[a] > std::numeric_limits<std::int16_t>::max()) {
      throw Error(ErrorCode::write_failure, "dimension too large for NIfTI-1");
    }
  }
  h.set<std::int16_t>(off::dim, 3, 0);
  for (int a = 0; a < 3; ++a) h.set<std::int16_t>(off::dim, static_cast<std::int16_t>(grid.dims[a]), a + 1);
  for (int a = 4; a < 8; ++a) h.set<std::int16_t>(off::dim, 1, a);
  h.set<std::int16_t>(off::datatype, datatype);
  h.set<std::int16_t>(off::bitpix, bitpix);
  h.set<float>(off::pixdim, 1.0f, 0);
  for (int a = 0; a < 3; ++a) h.set<float>(off::pixdim, static_cast<float>(grid.spacing[a]), a + 1);
  for (int a = 4; a < 8; ++a) h.set<float>(off::pixdim, 1.0f, a);
  h.set<float>(off::vox_offset, static_cast<float>(kVoxOffset));
  h.set<float>(off::scl_slope, 1.0f);
  h.set<float>(off::scl_inter, 0.0f);
  h.set<unsigned char>(off::xyzt_units, 2);  // millimetres
  const char descrip[] = "tilefuse";
  std::memcpy(bytes.data() + off::descrip, descrip, sizeof(descrip));
  h.set<std::int16_t>(off::qform_code, 0);
  h.set<std::int16_t>(off::sform_code, 2);
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 4; ++c) {
      h.set<float>(off::srow_x + r * 16, static_cast<float>(grid.voxel_to_world(r, c)), c);
    }
  }
  std::memcpy(bytes.data() + off::magic, "n+1\0", 4);
  return bytes;
}

}  // namespace

std::variant<Volume, LabelVolume> load_nifti(const std::filesystem::path& path) {
  RawNifti raw = read_raw(path);
  if (raw.label_intent && raw.datatype != kDtFloat32) {
    return to_labels(std::move(raw), std::nullopt, path);
  }
  std::vector<float> data(raw.values.begin(), raw.values.end());
  return Volume(raw.grid, std::move(data));
}

Volume read_volume(const std::filesystem::path& path) {
  RawNifti raw = read_raw(path);
  std::vector<float> data(raw.values.begin(), raw.values.end());
  return Volume(raw.grid, std::move(data));
}

LabelVolume read_labels(const std::filesystem::path& path, std::optional<int> label_count) {
  return to_labels(read_raw(path), label_count, path);
}

void store_nifti(const Volume& volume, const std::filesystem::path& path) {
  HeaderBytes header = make_header(volume.grid(), kDtFloat32, 32);
  std::vector<unsigned char> payload(volume.size() * 4);
  std::memcpy(payload.data(), volume.data().data(), payload.size());
  write_bytes(path, header, payload);
}

void store_nifti(const LabelVolume& labels, const std::filesystem::path& path) {
  const bool narrow = labels.label_count() <= 256;
  if (!narrow && labels.label_count() > 32768) {
    throw Error(ErrorCode::write_failure, "label_count too large for int16 storage");
  }
  HeaderBytes header = make_header(labels.grid(), narrow ? kDtUint8 : kDtInt16, narrow ? 8 : 16);
  HeaderView h(header, false);
  h.set<std::int16_t>(off::intent_code, kIntentLabel);
  h.set<float>(off::intent_p1, static_cast<float>(labels.label_count()));
  std::vector<unsigned char> payload(labels.size() * (narrow ? 1 : 2));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (narrow) {
      payload[i] = static_cast<unsigned char>(labels[i]);
    } else {
      const auto v = static_cast<std::int16_t>(labels[i]);
      std::memcpy(payload.data() + 2 * i, &v, 2);
    }
  }
  write_bytes(path, header, payload);
}

}  // namespace tilefuse
