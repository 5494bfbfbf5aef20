#pragma once

#include <cstdint>
#include <set>
#include <vector>

#include "fusenet/volgrid.hpp"

namespace fusenet::patcher {

struct Coord {
  int x = 0, y = 0, z = 0;
  bool operator==(const Coord&) const = default;
};

struct PatchSpec {
  volgrid::Dims patch_dims{112, 112, 112};
  int channels = 2;
  std::set<int> guide_labels{2, 3};  // lungs
};

// n coordinates drawn uniformly with replacement from voxels whose label is
// in guide_labels. Deterministic given the seed.
std::vector<Coord> sample_centers(const volgrid::MaskVolume& mask, const std::set<int>& guide_labels, int n,
                                  std::uint64_t seed);

// Axis-aligned box of patch_dims around center. The box is shifted to stay
// inside the volume where it fits; axes where the volume is smaller than the
// patch get symmetric zero borders instead. Total: never fails.
volgrid::MultiChannelVolume extract_patch(const volgrid::MultiChannelVolume& vol, Coord center,
                                          volgrid::Dims patch_dims);

// The box origin extract_patch would use, in volume coordinates (may be
// negative on axes that pad). Exposed so tensor-side slicing can take the
// same box.
Coord patch_box_origin(const volgrid::Dims& vol_dims, Coord center, const volgrid::Dims& patch_dims);

// sample_centers + extract_patch; the paper's inference setting is n=6.
std::vector<volgrid::MultiChannelVolume> inference_patches(const volgrid::MultiChannelVolume& vol,
                                                           const volgrid::MaskVolume& mask, const PatchSpec& spec,
                                                           int n, std::uint64_t seed);

// Stable per-scan seed so repeated inference reproduces its patches.
std::uint64_t scan_seed(const std::string& scan_id);

}  // namespace fusenet::patcher
