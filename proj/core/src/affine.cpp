#include "tilefuse/affine.hpp"

#include <fstream>
#include <iomanip>
#include <limits>
#include <ostream>
#include <sstream>

#include "tilefuse/error.hpp"

namespace tilefuse {
namespace {

constexpr double kSingularDet = 1e-12;

double det3(const AffineTransform::Matrix& m) {
  return m[0] * (m[5] * m[10] - m[6] * m[9]) -
         m[1] * (m[4] * m[10] - m[6] * m[8]) +
         m[2] * (m[4] * m[9] - m[5] * m[8]);
}

}  // namespace

AffineTransform::AffineTransform() : m_{} {
  m_[0] = m_[5] = m_[10] = m_[15] = 1.0;
}

AffineTransform::AffineTransform(const Matrix& row_major) : m_(row_major) {
  if (m_[12] != 0.0 || m_[13] != 0.0 || m_[14] != 0.0 || m_[15] != 1.0) {
    throw Error(ErrorCode::invalid_argument, "affine bottom row must be (0, 0, 0, 1)");
  }
  const double det = det3(m_);
  if (!std::isfinite(det) || std::abs(det) <= kSingularDet) {
    throw Error(ErrorCode::singular_transform, "affine linear part is singular");
  }
}

AffineTransform AffineTransform::translation(Vec3 t) {
  AffineTransform out;
  out.m_[3] = t.x;
  out.m_[7] = t.y;
  out.m_[11] = t.z;
  return out;
}

AffineTransform AffineTransform::scaling(Vec3 s) {
  Matrix m{};
  m[0] = s.x;
  m[5] = s.y;
  m[10] = s.z;
  m[15] = 1.0;
  return AffineTransform(m);
}

Vec3 AffineTransform::apply(Vec3 p) const {
  return {m_[0] * p.x + m_[1] * p.y + m_[2] * p.z + m_[3],
          m_[4] * p.x + m_[5] * p.y + m_[6] * p.z + m_[7],
          m_[8] * p.x + m_[9] * p.y + m_[10] * p.z + m_[11]};
}

Vec3 AffineTransform::apply_linear(Vec3 v) const {
  return {m_[0] * v.x + m_[1] * v.y + m_[2] * v.z,
          m_[4] * v.x + m_[5] * v.y + m_[6] * v.z,
          m_[8] * v.x + m_[9] * v.y + m_[10] * v.z};
}

double AffineTransform::linear_determinant() const { return det3(m_); }

bool AffineTransform::approx_equal(const AffineTransform& other, double tol) const {
  for (std::size_t i = 0; i < 16; ++i) {
    if (std::abs(m_[i] - other.m_[i]) > tol) return false;
  }
  return true;
}

AffineTransform compose(const AffineTransform& a, const AffineTransform& b) {
  AffineTransform::Matrix out{};
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 4; ++c) {
      double sum = 0.0;
      for (int k = 0; k < 4; ++k) sum += a(r, k) * b(k, c);
      out[static_cast<std::size_t>(r * 4 + c)] = sum;
    }
  }
  out[15] = 1.0;
  return AffineTransform(out);
}

AffineTransform invert(const AffineTransform& t) {
  const auto& m = t.matrix();
  const double det = det3(m);
  if (!std::isfinite(det) || std::abs(det) <= kSingularDet) {
    throw Error(ErrorCode::singular_transform, "cannot invert singular affine");
  }
  // Adjugate of the 3x3 linear part.
  AffineTransform::Matrix inv{};
  inv[0] = (m[5] * m[10] - m[6] * m[9]) / det;
  inv[1] = (m[2] * m[9] - m[1] * m[10]) / det;
  inv[2] = (m[1] * m[6] - m[2] * m[5]) / det;
  inv[4] = (m[6] * m[8] - m[4] * m[10]) / det;
  inv[5] = (m[0] * m[10] - m[2] * m[8]) / det;
  inv[6] = (m[2] * m[4] - m[0] * m[6]) / det;
  inv[8] = (m[4] * m[9] - m[5] * m[8]) / det;
  inv[9] = (m[1] * m[8] - m[0] * m[9]) / det;
  inv[10] = (m[0] * m[5] - m[1] * m[4]) / det;
  for (int r = 0; r < 3; ++r) {
    const auto row = static_cast<std::size_t>(r * 4);
    inv[row + 3] = -(inv[row] * m[3] + inv[row + 1] * m[7] + inv[row + 2] * m[11]);
  }
  inv[15] = 1.0;
  return AffineTransform(inv);
}

void write_transform(const AffineTransform& t, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::write_failure, "cannot open " + path.string() + " for writing");
  out << t;
  if (!out) throw Error(ErrorCode::write_failure, "failed writing " + path.string());
}

AffineTransform read_transform(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::format, "cannot open transform file " + path.string());
  AffineTransform::Matrix m{};
  for (auto& value : m) {
    if (!(in >> value)) {
      throw Error(ErrorCode::format, "transform file " + path.string() + " must hold 16 numbers");
    }
  }
  std::string extra;
  if (in >> extra) {
    throw Error(ErrorCode::format, "trailing data in transform file " + path.string());
  }
  return AffineTransform(m);
}

std::ostream& operator<<(std::ostream& os, const AffineTransform& t) {
  std::ostringstream ss;
  ss << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) {
      ss << t(r, c) << (c == 3 ? '\n' : ' ');
    }
  }
  return os << ss.str();
}

}  // namespace tilefuse
