#pragma once

#include <cstdint>

#include "tilefuse/registration.hpp"
#include "tilefuse/volume.hpp"

namespace tilefuse {

struct PhantomSpec {
  Dims dims{96, 96, 96};
  Vec3 spacing{1.0, 1.0, 1.0};
  int label_count = 6;  // background + label_count - 1 nested regions
  std::uint64_t seed = 1;
  double noise_std = 0.0;  // relative to the intensity range
  double bias_amplitude = 0.0;  // peak relative deviation of the bias field
  AffineParams misalignment;  // content moved by this map about the grid centre
};

struct Phantom {
  Volume intensity;
  LabelVolume labels;
};

/// Nested concentric ellipsoid "brain": region l (1..L-1) lies between
/// boundary l and boundary l+1. Inner boundaries shrink, change elongation
/// and turn, and all carry a small lopsided bulge, so the phantom has no
/// affine self-symmetry. Each label has its own
/// base intensity. Throws ErrorCode::spec if any shell would be thinner
/// than two voxels along some ray.
Phantom make_phantom(const PhantomSpec& spec);

/// The content transform the phantom applied (canonical world -> scan world).
AffineTransform phantom_misalignment(const PhantomSpec& spec);

/// Base intensity of a label before noise and bias.
float phantom_label_intensity(int label, int label_count);

}  // namespace tilefuse
