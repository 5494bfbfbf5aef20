#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "fusenet/preproc.hpp"

using namespace fusenet;
using namespace fusenet::preproc;
using volgrid::Dims;
using volgrid::ScalarVolume;

namespace {

// Input whose value at each voxel is an affine function of its physical
// center position; trilinear interpolation must reproduce it exactly away
// from the clamped border.
ScalarVolume affine_volume(Dims d, Spacing s, double ax, double ay, double az, double b) {
  std::vector<float> v(d.count());
  std::size_t i = 0;
  for (int z = 0; z < d.z; ++z)
    for (int y = 0; y < d.y; ++y)
      for (int x = 0; x < d.x; ++x, ++i)
        v[i] = static_cast<float>(ax * (x + 0.5) * s.x + ay * (y + 0.5) * s.y + az * (z + 0.5) * s.z + b);
  return ScalarVolume(d, s, std::move(v));
}

}  // namespace

TEST_CASE("bspline kernel weights") {
  SUBCASE("t=0 gives (1/6, 4/6, 1/6, 0)") {
    const auto w = bspline_kernel_weights(0.0);
    CHECK(w[0] == doctest::Approx(1.0 / 6.0).epsilon(1e-12));
    CHECK(w[1] == doctest::Approx(4.0 / 6.0).epsilon(1e-12));
    CHECK(w[2] == doctest::Approx(1.0 / 6.0).epsilon(1e-12));
    CHECK(w[3] == doctest::Approx(0.0).epsilon(1e-12));
  }
  SUBCASE("partition of unity and symmetry at t=0.5") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int i = 0; i < 100; ++i) {
      const auto w = bspline_kernel_weights(u(rng));
      CHECK(std::abs(w[0] + w[1] + w[2] + w[3] - 1.0) < 1e-12);
    }
    const auto w = bspline_kernel_weights(0.5);
    CHECK(w[0] == doctest::Approx(w[3]).epsilon(1e-12));
    CHECK(w[1] == doctest::Approx(w[2]).epsilon(1e-12));
  }
}

TEST_CASE("resample reproduces constants under both methods") {
  const auto vol = ScalarVolume::filled({9, 7, 5}, {1.0, 1.3, 0.7}, 7.0f);
  for (auto method : {Interpolation::trilinear, Interpolation::cubic_bspline}) {
    const auto out = resample(vol, {2.0, 2.0, 2.0}, method);
    for (float v : out.values()) CHECK(v == doctest::Approx(7.0f).epsilon(1e-6));
  }
}

TEST_CASE("resample output dims follow the rounding rule") {
  const auto vol = ScalarVolume::filled({64, 64, 64}, {1, 1, 1}, 1.0f);
  const auto out = resample(vol, {2, 2, 2}, Interpolation::trilinear);
  CHECK(out.dims() == Dims{32, 32, 32});

  // Same spacing keeps dims.
  const auto same = resample(vol, {1, 1, 1}, Interpolation::cubic_bspline);
  CHECK(same.dims() == vol.dims());

  // Round-half-up: 5 voxels at 1mm -> 2mm gives round(2.5) = 3.
  const auto odd = resample(ScalarVolume::filled({5, 5, 5}, {1, 1, 1}, 0.0f), {2, 2, 2}, Interpolation::trilinear);
  CHECK(odd.dims() == Dims{3, 3, 3});
}

TEST_CASE("trilinear resample matches the analytic ramp at interior samples") {
  const Spacing in_s{1, 1, 1};
  const auto vol = affine_volume({64, 8, 8}, in_s, 0.25, 0.0, 0.0, 2.0);
  const auto out = resample(vol, {2, 2, 2}, Interpolation::trilinear);
  REQUIRE(out.dims() == Dims{32, 4, 4});
  for (int z = 1; z < out.dims().z - 1; ++z)
    for (int y = 1; y < out.dims().y - 1; ++y)
      for (int x = 1; x < out.dims().x - 1; ++x) {
        const double expect = 0.25 * (x + 0.5) * 2.0 + 2.0;
        CHECK(std::abs(out.at(x, y, z) - expect) < 1e-5);
      }
}

TEST_CASE("trilinear reproduces 3-axis affine fields at interior points") {
  const auto vol = affine_volume({16, 16, 16}, {1.5, 1.5, 1.5}, 0.2, -0.1, 0.05, 1.0);
  const auto out = resample(vol, {2.2, 2.2, 2.2}, Interpolation::trilinear);
  const auto d = out.dims();
  for (int z = 1; z < d.z - 1; ++z)
    for (int y = 1; y < d.y - 1; ++y)
      for (int x = 1; x < d.x - 1; ++x) {
        const double expect = 0.2 * (x + 0.5) * 2.2 - 0.1 * (y + 0.5) * 2.2 + 0.05 * (z + 0.5) * 2.2 + 1.0;
        CHECK(std::abs(out.at(x, y, z) - expect) < 1e-5);
      }
}

TEST_CASE("clip_hu clamps to the window") {
  const ScalarVolume vol({3, 1, 1}, {1, 1, 1}, {1000.0f, -2000.0f, 0.0f});
  const auto out = clip_hu(vol, HuWindow{-1000, 800});
  CHECK(out.values()[0] == 800.0f);
  CHECK(out.values()[1] == -1000.0f);
  CHECK(out.values()[2] == 0.0f);
}

TEST_CASE("normalize maps the window onto [0,1]") {
  const ScalarVolume vol({3, 1, 1}, {1, 1, 1}, {-1000.0f, 800.0f, -100.0f});
  const auto out = normalize(vol, HuWindow{-1000, 800});
  CHECK(out.values()[0] == doctest::Approx(0.0));
  CHECK(out.values()[1] == doctest::Approx(1.0));
  CHECK(out.values()[2] == doctest::Approx(0.5));
  CHECK_THROWS_WITH_AS(normalize(vol, HuWindow{5, 5}), doctest::Contains("DegenerateWindow"), Error);

  // Idempotent under re-clipping to [0,1].
  const auto again = clip_hu(out, HuWindow{0, 1});
  CHECK(again.values() == out.values());
}

TEST_CASE("preprocess_scan composes the stages in order") {
  PreprocConfig cfg;
  cfg.target_dims = {112, 112, 112};

  SUBCASE("1mm 64^3 air scan becomes a 112^3 zero volume") {
    const auto vol = ScalarVolume::filled({64, 64, 64}, {1, 1, 1}, -1000.0f);
    const auto out = preprocess_scan(vol, cfg);
    CHECK(out.dims() == Dims{112, 112, 112});
    for (float v : out.values()) CHECK(v == 0.0f);
  }
  SUBCASE("2mm 112^3 scan passes through with clip+normalize only") {
    const auto vol = ScalarVolume::filled({112, 112, 112}, {2, 2, 2}, -100.0f);
    const auto out = preprocess_scan(vol, cfg);
    CHECK(out.dims() == Dims{112, 112, 112});
    CHECK(out.values()[0] == doctest::Approx(0.5));
  }
  SUBCASE("2mm 140^3 scan stays 140^3") {
    const auto vol = ScalarVolume::filled({140, 140, 140}, {2, 2, 2}, 0.0f);
    const auto out = preprocess_scan(vol, cfg);
    CHECK(out.dims() == Dims{140, 140, 140});
  }
  SUBCASE("output range is [0,1] and runs are bit-deterministic") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<float> u(-3000.0f, 3000.0f);
    std::vector<float> v(24 * 24 * 24);
    for (auto& x : v) x = u(rng);
    const ScalarVolume vol({24, 24, 24}, {1.3, 1.1, 0.9}, v);
    cfg.interpolation = Interpolation::cubic_bspline;
    cfg.target_dims = {16, 16, 16};
    const auto a = preprocess_scan(vol, cfg);
    const auto b = preprocess_scan(vol, cfg);
    CHECK(a.values() == b.values());
    for (float x : a.values()) {
      CHECK(x >= 0.0f);
      CHECK(x <= 1.0f);
    }
  }
}
