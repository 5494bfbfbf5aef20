#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <set>
#include <vector>

#include "fusenet/errors.hpp"

namespace fusenet::volgrid {

// Voxel counts per axis. Layout everywhere is z-slowest / x-fastest:
// index = (z * dims.y + y) * dims.x + x.
struct Dims {
  int x = 0, y = 0, z = 0;

  bool operator==(const Dims&) const = default;
  std::size_t count() const {
    return static_cast<std::size_t>(x) * static_cast<std::size_t>(y) * static_cast<std::size_t>(z);
  }
};

struct Spacing {
  double x = 1.0, y = 1.0, z = 1.0;
  bool operator==(const Spacing&) const = default;
};

inline std::size_t voxel_index(const Dims& d, int x, int y, int z) {
  return (static_cast<std::size_t>(z) * d.y + y) * d.x + x;
}

// Single-channel f32 grid with physical spacing. Values are validated at
// construction (finite, length matches dims) and treated as immutable after.
class ScalarVolume {
 public:
  ScalarVolume() = default;
  ScalarVolume(Dims dims, Spacing spacing_mm, std::vector<float> values);

  static ScalarVolume filled(Dims dims, Spacing spacing_mm, float value);

  const Dims& dims() const { return dims_; }
  const Spacing& spacing_mm() const { return spacing_; }
  const std::vector<float>& values() const { return values_; }

  float at(int x, int y, int z) const { return values_[voxel_index(dims_, x, y, z)]; }

 private:
  Dims dims_;
  Spacing spacing_;
  std::vector<float> values_;
};

// Multi-channel grid; channels share dims and spacing. Stored as one dense
// buffer [channel][z][y][x].
class MultiChannelVolume {
 public:
  MultiChannelVolume() = default;
  MultiChannelVolume(int channels, Dims dims, Spacing spacing_mm, std::vector<float> values);

  static MultiChannelVolume from_channels(const std::vector<ScalarVolume>& channels);
  static MultiChannelVolume from_scalar(const ScalarVolume& v);

  int channels() const { return channels_; }
  const Dims& dims() const { return dims_; }
  const Spacing& spacing_mm() const { return spacing_; }
  const std::vector<float>& values() const { return values_; }

  ScalarVolume channel(int c) const;
  const float* channel_data(int c) const { return values_.data() + static_cast<std::size_t>(c) * dims_.count(); }

  float at(int c, int x, int y, int z) const {
    return values_[static_cast<std::size_t>(c) * dims_.count() + voxel_index(dims_, x, y, z)];
  }

 private:
  int channels_ = 0;
  Dims dims_;
  Spacing spacing_;
  std::vector<float> values_;
};

// Label grid; 0 is background. label_count declares the valid label set
// [0, label_count).
class MaskVolume {
 public:
  MaskVolume() = default;
  MaskVolume(Dims dims, Spacing spacing_mm, std::vector<std::uint8_t> labels, int label_count);

  static MaskVolume zeros(Dims dims, Spacing spacing_mm, int label_count);

  const Dims& dims() const { return dims_; }
  const Spacing& spacing_mm() const { return spacing_; }
  const std::vector<std::uint8_t>& labels() const { return labels_; }
  int label_count() const { return label_count_; }

  std::uint8_t at(int x, int y, int z) const { return labels_[voxel_index(dims_, x, y, z)]; }

 private:
  Dims dims_;
  Spacing spacing_;
  std::vector<std::uint8_t> labels_;
  int label_count_ = 1;
};

// VGR container I/O. Bytes 0-3 magic "VGR1", bytes 4-7 u32 LE header length,
// then a UTF-8 JSON header {dims, spacing_mm, channels, dtype}, then the raw
// little-endian payload. Writes are byte-deterministic.
MultiChannelVolume read_volume(const std::filesystem::path& path);
void write_volume(const MultiChannelVolume& vol, const std::filesystem::path& path);

MaskVolume read_mask(const std::filesystem::path& path);
void write_mask(const MaskVolume& mask, const std::filesystem::path& path);

// Result channels = a's channels followed by b's; dims and spacing must match.
MultiChannelVolume concat_channels(const MultiChannelVolume& a, const MultiChannelVolume& b);

// Center content inside target_dims (low side gets the floor of the slack),
// new voxels take `fill`. Target must be >= dims per axis.
ScalarVolume pad_to(const ScalarVolume& vol, Dims target_dims, float fill);

// Inverse of pad_to's placement: cut a centered region of target_dims.
ScalarVolume crop_center(const ScalarVolume& vol, Dims target_dims);

// Voxel becomes 1 iff its label is in include_labels.
MaskVolume binarize_mask(const MaskVolume& mask, const std::set<int>& include_labels);

}  // namespace fusenet::volgrid
