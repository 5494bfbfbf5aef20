#pragma once

#include <array>

#include "fusenet/volgrid.hpp"

namespace fusenet::preproc {

using volgrid::Dims;
using volgrid::ScalarVolume;
using volgrid::Spacing;

enum class Interpolation { trilinear, cubic_bspline };

struct HuWindow {
  double low = -1000.0;
  double high = 800.0;
};

struct PreprocConfig {
  Spacing target_spacing_mm{2.0, 2.0, 2.0};
  HuWindow hu_window{};
  Dims target_dims{112, 112, 112};
  Interpolation interpolation = Interpolation::cubic_bspline;
};

// Cubic uniform B-spline basis weights for fractional offset t in [0,1),
// covering grid points floor(u)-1 .. floor(u)+2. Weights sum to 1.
std::array<double, 4> bspline_kernel_weights(double t);

// Output dims_i = max(1, round(in_dims_i * in_spacing_i / target_i)),
// round-half-up. Samples at output voxel centers mapped into input physical
// space; out-of-bounds taps clamp to the nearest edge voxel.
ScalarVolume resample(const ScalarVolume& vol, Spacing target_spacing, Interpolation method);

// Clamp every value into [window.low, window.high].
ScalarVolume clip_hu(const ScalarVolume& vol, HuWindow window);

// Affine map of [low, high] onto [0, 1]. Input is expected to be clipped.
ScalarVolume normalize(const ScalarVolume& vol, HuWindow window);

// resample -> clip -> normalize -> pad, in that order. Padding grows each
// axis to at least target_dims; axes already larger are left alone.
ScalarVolume preprocess_scan(const ScalarVolume& vol, const PreprocConfig& cfg);

}  // namespace fusenet::preproc
