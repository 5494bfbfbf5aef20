#include "fusenet/patcher.hpp"

#include <algorithm>
#include <random>

#include "fusenet/util.hpp"

namespace fusenet::patcher {

std::vector<Coord> sample_centers(const volgrid::MaskVolume& mask, const std::set<int>& guide_labels, int n,
                                  std::uint64_t seed) {
  if (n < 1) raise(Errc::BadConfig, "sample_centers: n must be >= 1");
  const auto& d = mask.dims();
  std::vector<Coord> candidates;
  for (int z = 0; z < d.z; ++z)
    for (int y = 0; y < d.y; ++y)
      for (int x = 0; x < d.x; ++x)
        if (guide_labels.count(static_cast<int>(mask.at(x, y, z)))) candidates.push_back({x, y, z});
  if (candidates.empty()) raise(Errc::NoForeground, "sample_centers: no voxel matches the guide labels");

  std::mt19937_64 rng(seed);
  std::vector<Coord> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out.push_back(candidates[uniform_index(rng, candidates.size())]);
  return out;
}

namespace {

// Per-axis placement: source range in the volume and destination offset in
// the patch.
struct AxisBox {
  int src_lo;   // first voxel read from the volume
  int dst_lo;   // where it lands in the patch
  int len;      // voxels copied
  int origin;   // src_lo - dst_lo, the patch origin in volume coordinates
};

AxisBox axis_box(int vol, int center, int patch) {
  AxisBox b{};
  if (vol >= patch) {
    int start = center - patch / 2;
    start = std::clamp(start, 0, vol - patch);
    b = {start, 0, patch, start};
  } else {
    const int pad_lo = (patch - vol) / 2;
    b = {0, pad_lo, vol, -pad_lo};
  }
  return b;
}

}  // namespace

Coord patch_box_origin(const volgrid::Dims& vol_dims, Coord center, const volgrid::Dims& patch_dims) {
  return {axis_box(vol_dims.x, center.x, patch_dims.x).origin, axis_box(vol_dims.y, center.y, patch_dims.y).origin,
          axis_box(vol_dims.z, center.z, patch_dims.z).origin};
}

volgrid::MultiChannelVolume extract_patch(const volgrid::MultiChannelVolume& vol, Coord center,
                                          volgrid::Dims patch_dims) {
  const auto& d = vol.dims();
  if (patch_dims.x < 1 || patch_dims.y < 1 || patch_dims.z < 1)
    raise(Errc::BadConfig, "extract_patch: patch dims must be positive");
  const AxisBox bx = axis_box(d.x, center.x, patch_dims.x);
  const AxisBox by = axis_box(d.y, center.y, patch_dims.y);
  const AxisBox bz = axis_box(d.z, center.z, patch_dims.z);

  const std::size_t patch_n = patch_dims.count();
  std::vector<float> out(patch_n * static_cast<std::size_t>(vol.channels()), 0.0f);
  for (int c = 0; c < vol.channels(); ++c) {
    const float* src = vol.channel_data(c);
    float* dst = out.data() + static_cast<std::size_t>(c) * patch_n;
    for (int z = 0; z < bz.len; ++z)
      for (int y = 0; y < by.len; ++y) {
        const float* srow = src + volgrid::voxel_index(d, bx.src_lo, by.src_lo + y, bz.src_lo + z);
        float* drow = dst + volgrid::voxel_index(patch_dims, bx.dst_lo, by.dst_lo + y, bz.dst_lo + z);
        std::copy(srow, srow + bx.len, drow);
      }
  }
  return volgrid::MultiChannelVolume(vol.channels(), patch_dims, vol.spacing_mm(), std::move(out));
}

std::vector<volgrid::MultiChannelVolume> inference_patches(const volgrid::MultiChannelVolume& vol,
                                                           const volgrid::MaskVolume& mask, const PatchSpec& spec,
                                                           int n, std::uint64_t seed) {
  const auto centers = sample_centers(mask, spec.guide_labels, n, seed);
  std::vector<volgrid::MultiChannelVolume> patches;
  patches.reserve(centers.size());
  for (const auto& c : centers) patches.push_back(extract_patch(vol, c, spec.patch_dims));
  return patches;
}

std::uint64_t scan_seed(const std::string& scan_id) { return fnv1a64(scan_id); }

}  // namespace fusenet::patcher
