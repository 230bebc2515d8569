#pragma once

#include "tilefuse/volume.hpp"

namespace tilefuse {

enum class Interp { trilinear, nearest };

/// Resamples `src` onto `target`. `transform` maps source world coordinates
/// to target world coordinates, so output voxel p takes the source value at
/// inverse(transform)(target.voxel_to_world(p)). Samples falling outside the
/// source volume are 0. Results do not depend on `jobs`.
Volume resample(const Volume& src, const AffineTransform& transform, const Grid& target, Interp interp,
                int jobs = 1);

/// Labels only support nearest; trilinear throws ErrorCode::invalid_interp.
LabelVolume resample(const LabelVolume& src, const AffineTransform& transform, const Grid& target,
                     Interp interp = Interp::nearest, int jobs = 1);

/// Box-filter downsampling by an integer factor per axis (partial blocks at
/// the far edge average what they contain). Geometry is updated so block
/// centres keep their world position.
Volume downsample(const Volume& src, int factor);

}  // namespace tilefuse
