#pragma once

#include "tilefuse/volume.hpp"

namespace tilefuse {

/// Affine parameters about a fixed centre c:
///   p -> c + translation + R * S * H * (p - c)
/// with R = Rz * Ry * Rx (Euler XYZ, radians), S = diag(scale) and H the
/// upper-triangular shear (xy, xz, yz).
struct AffineParams {
  Vec3 translation;
  Vec3 rotation;
  Vec3 scale{1.0, 1.0, 1.0};
  Vec3 shear;
};

AffineTransform affine_from_params(const AffineParams& params, Vec3 center);

struct RegistrationConfig {
  int dof = 12;  // 9 (no shear) or 12
  int levels = 3;  // pyramid factors 2^(levels-1) ... 1
  int max_iters = 600;  // simplex iterations per level
  int jobs = 1;
};

struct RegistrationResult {
  AffineTransform transform;  // moving world -> fixed world
  double similarity = 0.0;  // NCC at full resolution
  double identity_similarity = 0.0;  // NCC with no transform at all
  int evaluations = 0;
};

/// Normalized cross-correlation over voxels of `fixed` whose mapped position
/// lies inside `moving`. `fixed_to_moving` maps fixed world to moving world.
double normalized_cross_correlation(const Volume& moving, const Volume& fixed,
                                    const AffineTransform& fixed_to_moving, int stride = 1, int jobs = 1);

/// Intensity-based affine registration maximising NCC: centre-of-mass
/// initialisation, then a Nelder-Mead simplex at each pyramid level.
/// Deterministic for identical inputs and config (including any `jobs`).
RegistrationResult estimate_affine(const Volume& moving, const Volume& fixed, const RegistrationConfig& config = {});

/// Mean distance between the images of the 8 grid corners under two maps.
double mean_corner_displacement(const AffineTransform& a, const AffineTransform& b, const Grid& grid);

}  // namespace tilefuse
