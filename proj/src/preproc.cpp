#include "fusenet/preproc.hpp"

#include <algorithm>
#include <cmath>

namespace fusenet::preproc {

std::array<double, 4> bspline_kernel_weights(double t) {
  const double t2 = t * t;
  const double t3 = t2 * t;
  const double omt = 1.0 - t;
  return {omt * omt * omt / 6.0,
          (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
          (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
          t3 / 6.0};
}

namespace {

inline int clampi(int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); }

struct AxisTap {
  int i0;      // floor of the continuous input coordinate
  double t;    // fractional part in [0,1)
};

// Continuous input coordinate of an output voxel center, voxel-center
// convention: physical position (i + 0.5) * spacing.
AxisTap axis_tap(int out_idx, double out_spacing, double in_spacing, int in_dim) {
  const double phys = (out_idx + 0.5) * out_spacing;
  double u = phys / in_spacing - 0.5;
  // Keep the fractional split stable at the edges; sampling still clamps.
  double fl = std::floor(u);
  double t = u - fl;
  int i0 = static_cast<int>(fl);
  if (i0 < -1) {
    i0 = -1;
    t = 0.0;
  }
  if (i0 > in_dim - 1) {
    i0 = in_dim - 1;
    t = 0.0;
  }
  return {i0, t};
}

}  // namespace

ScalarVolume resample(const ScalarVolume& vol, Spacing target, Interpolation method) {
  const Dims in = vol.dims();
  if (in.count() == 0) raise(Errc::EmptyVolume, "resample: empty volume");
  if (!(target.x > 0 && target.y > 0 && target.z > 0))
    raise(Errc::ShapeMismatch, "resample: target spacing must be positive");
  const Spacing s = vol.spacing_mm();
  const Dims out{std::max(1, static_cast<int>(std::floor(in.x * s.x / target.x + 0.5))),
                 std::max(1, static_cast<int>(std::floor(in.y * s.y / target.y + 0.5))),
                 std::max(1, static_cast<int>(std::floor(in.z * s.z / target.z + 0.5)))};

  std::vector<AxisTap> tx(out.x), ty(out.y), tz(out.z);
  for (int i = 0; i < out.x; ++i) tx[i] = axis_tap(i, target.x, s.x, in.x);
  for (int i = 0; i < out.y; ++i) ty[i] = axis_tap(i, target.y, s.y, in.y);
  for (int i = 0; i < out.z; ++i) tz[i] = axis_tap(i, target.z, s.z, in.z);

  const float* src = vol.values().data();
  std::vector<float> dst(out.count());

  if (method == Interpolation::trilinear) {
    for (int z = 0; z < out.z; ++z) {
      const int z0 = clampi(tz[z].i0, 0, in.z - 1), z1 = clampi(tz[z].i0 + 1, 0, in.z - 1);
      const double wz1 = tz[z].t, wz0 = 1.0 - wz1;
      for (int y = 0; y < out.y; ++y) {
        const int y0 = clampi(ty[y].i0, 0, in.y - 1), y1 = clampi(ty[y].i0 + 1, 0, in.y - 1);
        const double wy1 = ty[y].t, wy0 = 1.0 - wy1;
        float* row = dst.data() + volgrid::voxel_index(out, 0, y, z);
        for (int x = 0; x < out.x; ++x) {
          const int x0 = clampi(tx[x].i0, 0, in.x - 1), x1 = clampi(tx[x].i0 + 1, 0, in.x - 1);
          const double wx1 = tx[x].t, wx0 = 1.0 - wx1;
          const double v =
              wz0 * (wy0 * (wx0 * src[volgrid::voxel_index(in, x0, y0, z0)] +
                            wx1 * src[volgrid::voxel_index(in, x1, y0, z0)]) +
                     wy1 * (wx0 * src[volgrid::voxel_index(in, x0, y1, z0)] +
                            wx1 * src[volgrid::voxel_index(in, x1, y1, z0)])) +
              wz1 * (wy0 * (wx0 * src[volgrid::voxel_index(in, x0, y0, z1)] +
                            wx1 * src[volgrid::voxel_index(in, x1, y0, z1)]) +
                     wy1 * (wx0 * src[volgrid::voxel_index(in, x0, y1, z1)] +
                            wx1 * src[volgrid::voxel_index(in, x1, y1, z1)]));
          row[x] = static_cast<float>(v);
        }
      }
    }
  } else {
    // Smoothing cubic B-spline: basis-weighted combination of the 4^3
    // neighbouring voxels, edge-clamped.
    for (int z = 0; z < out.z; ++z) {
      const auto wz = bspline_kernel_weights(tz[z].t);
      int zi[4];
      for (int k = 0; k < 4; ++k) zi[k] = clampi(tz[z].i0 - 1 + k, 0, in.z - 1);
      for (int y = 0; y < out.y; ++y) {
        const auto wy = bspline_kernel_weights(ty[y].t);
        int yi[4];
        for (int k = 0; k < 4; ++k) yi[k] = clampi(ty[y].i0 - 1 + k, 0, in.y - 1);
        float* row = dst.data() + volgrid::voxel_index(out, 0, y, z);
        for (int x = 0; x < out.x; ++x) {
          const auto wx = bspline_kernel_weights(tx[x].t);
          int xi[4];
          for (int k = 0; k < 4; ++k) xi[k] = clampi(tx[x].i0 - 1 + k, 0, in.x - 1);
          double acc = 0.0;
          for (int kz = 0; kz < 4; ++kz)
            for (int ky = 0; ky < 4; ++ky) {
              const float* line = src + volgrid::voxel_index(in, 0, yi[ky], zi[kz]);
              const double wzy = wz[kz] * wy[ky];
              double part = 0.0;
              for (int kx = 0; kx < 4; ++kx) part += wx[kx] * line[xi[kx]];
              acc += wzy * part;
            }
          row[x] = static_cast<float>(acc);
        }
      }
    }
  }
  return ScalarVolume(out, target, std::move(dst));
}

ScalarVolume clip_hu(const ScalarVolume& vol, HuWindow w) {
  if (!(w.low < w.high)) raise(Errc::DegenerateWindow, "clip_hu: window low must be below high");
  std::vector<float> out(vol.values());
  const float lo = static_cast<float>(w.low), hi = static_cast<float>(w.high);
  for (float& v : out) v = std::min(std::max(v, lo), hi);
  return ScalarVolume(vol.dims(), vol.spacing_mm(), std::move(out));
}

ScalarVolume normalize(const ScalarVolume& vol, HuWindow w) {
  if (w.low == w.high) raise(Errc::DegenerateWindow, "normalize: window is a single point");
  std::vector<float> out(vol.values());
  const double span = w.high - w.low;
  for (float& v : out) v = static_cast<float>((v - w.low) / span);
  return ScalarVolume(vol.dims(), vol.spacing_mm(), std::move(out));
}

ScalarVolume preprocess_scan(const ScalarVolume& vol, const PreprocConfig& cfg) {
  if (!(cfg.hu_window.low < cfg.hu_window.high)) raise(Errc::DegenerateWindow, "preprocess_scan: bad HU window");
  ScalarVolume v = resample(vol, cfg.target_spacing_mm, cfg.interpolation);
  v = clip_hu(v, cfg.hu_window);
  v = normalize(v, cfg.hu_window);
  const Dims d = v.dims();
  const Dims padded{std::max(d.x, cfg.target_dims.x), std::max(d.y, cfg.target_dims.y),
                    std::max(d.z, cfg.target_dims.z)};
  return volgrid::pad_to(v, padded, 0.0f);
}

}  // namespace fusenet::preproc
