#pragma once

#include <filesystem>
#include <optional>
#include <variant>

#include "tilefuse/volume.hpp"

namespace tilefuse {

/// Single-file NIfTI-1 subset: .nii or .nii.gz, datatypes uint8, int16 and
/// float32, 3D only (trailing dims of extent 1 are accepted).
///
/// Geometry comes from the sform when sform_code > 0, else the qform when
/// qform_code > 0, else diag(pixdim). Nonzero scl_slope is applied.
///
/// Label volumes are written with intent_code NIFTI_INTENT_LABEL and the
/// label count in intent_p1; load_nifti() uses that to pick the result kind.
std::variant<Volume, LabelVolume> load_nifti(const std::filesystem::path& path);

/// Loads any supported file as intensities.
Volume read_volume(const std::filesystem::path& path);

/// Loads integer-valued data as labels. label_count falls back to the
/// header's intent_p1 for label files, otherwise max value + 1.
LabelVolume read_labels(const std::filesystem::path& path, std::optional<int> label_count = std::nullopt);

/// float32 output.
void store_nifti(const Volume& volume, const std::filesystem::path& path);
/// uint8 when label_count <= 256, otherwise int16.
void store_nifti(const LabelVolume& labels, const std::filesystem::path& path);

}  // namespace tilefuse
