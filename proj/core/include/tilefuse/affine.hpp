#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <iosfwd>

namespace tilefuse {

struct Vec3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  double operator[](int axis) const { return axis == 0 ? x : (axis == 1 ? y : z); }
  double& operator[](int axis) { return axis == 0 ? x : (axis == 1 ? y : z); }

  friend Vec3 operator+(Vec3 a, Vec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
  friend Vec3 operator-(Vec3 a, Vec3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
  friend Vec3 operator*(double s, Vec3 a) { return {s * a.x, s * a.y, s * a.z}; }
  friend bool operator==(const Vec3&, const Vec3&) = default;
};

inline double norm(Vec3 v) { return std::sqrt(v.x * v.x + v.y * v.y + v.z * v.z); }

/// Homogeneous 4x4 affine map in world millimetres. The bottom row is kept
/// at exactly (0, 0, 0, 1) by every constructor and operation.
class AffineTransform {
 public:
  using Matrix = std::array<double, 16>;  // row-major

  AffineTransform();  // identity
  /// Throws ErrorCode::singular_transform if the linear part is (near) singular
  /// and ErrorCode::invalid_argument if the bottom row is not (0, 0, 0, 1).
  explicit AffineTransform(const Matrix& row_major);

  static AffineTransform identity() { return {}; }
  static AffineTransform translation(Vec3 t);
  static AffineTransform scaling(Vec3 s);

  double operator()(int row, int col) const { return m_[static_cast<std::size_t>(row * 4 + col)]; }
  const Matrix& matrix() const { return m_; }

  Vec3 apply(Vec3 p) const;
  Vec3 apply_linear(Vec3 v) const;
  Vec3 translation_part() const { return {m_[3], m_[7], m_[11]}; }
  double linear_determinant() const;

  bool approx_equal(const AffineTransform& other, double tol) const;

 private:
  Matrix m_;
};

/// a∘b: applying the result equals applying b first, then a.
AffineTransform compose(const AffineTransform& a, const AffineTransform& b);

/// Exact inverse of the affine; throws ErrorCode::singular_transform when
/// |det| of the linear part is below 1e-12.
AffineTransform invert(const AffineTransform& t);

/// 16 numbers, row-major, whitespace separated, round-trip exact.
void write_transform(const AffineTransform& t, const std::filesystem::path& path);
AffineTransform read_transform(const std::filesystem::path& path);

std::ostream& operator<<(std::ostream& os, const AffineTransform& t);

}  // namespace tilefuse
