#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <set>

#include "fusenet/synthlab.hpp"
#include "fusenet/util.hpp"
#include "fusenet/volgrid.hpp"

using namespace fusenet;
using namespace fusenet::synthlab;

namespace {

std::filesystem::path fresh_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("fusenet_synth_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::size_t rasterized_count(const Ellipsoid& e, const volgrid::Dims& d, const volgrid::Spacing& sp) {
  std::size_t n = 0;
  for (int z = 0; z < d.z; ++z)
    for (int y = 0; y < d.y; ++y)
      for (int x = 0; x < d.x; ++x)
        if (e.contains((x + 0.5) * sp.x, (y + 0.5) * sp.y, (z + 0.5) * sp.z)) ++n;
  return n;
}

}  // namespace

TEST_CASE("noise-free phantom matches the region intensity model exactly") {
  auto spec = PhantomSpec::scaled_to({32, 32, 32}, {2, 2, 2});
  spec.noise_sigma_hu = 0.0;
  const auto ph = generate_phantom(spec, 1);
  const auto& d = spec.dims;
  for (int z = 0; z < d.z; ++z)
    for (int y = 0; y < d.y; ++y)
      for (int x = 0; x < d.x; ++x) {
        const int label = ph.truth.at(x, y, z);
        const float hu = ph.volume_hu.at(x, y, z);
        if (label == 0) CHECK(hu == -1000.0f);
        if (label == 1) CHECK(hu == 40.0f);
        if (label == 2 || label == 3) CHECK(hu == -850.0f);
      }
}

TEST_CASE("same seed gives identical phantom bytes") {
  const auto spec = PhantomSpec::scaled_to({32, 32, 32}, {2, 2, 2});
  const auto a = generate_phantom(spec, 42);
  const auto b = generate_phantom(spec, 42);
  CHECK(a.volume_hu.values() == b.volume_hu.values());
  CHECK(a.truth.labels() == b.truth.labels());
  const auto c = generate_phantom(spec, 43);
  CHECK(a.volume_hu.values() != c.volume_hu.values());
}

TEST_CASE("lung mask voxel count equals the analytic rasterization") {
  const auto spec = PhantomSpec::scaled_to({32, 32, 32}, {2, 2, 2});
  const auto ph = generate_phantom(spec, 7);
  std::size_t left = 0, right = 0;
  for (auto l : ph.truth.labels()) {
    left += l == 2;
    right += l == 3;
  }
  CHECK(left == rasterized_count(spec.lung_left, spec.dims, spec.spacing_mm));
  // Right-lung rasterization excludes any voxel the left lung already claimed.
  std::size_t right_expected = 0;
  const auto& d = spec.dims;
  for (int z = 0; z < d.z; ++z)
    for (int y = 0; y < d.y; ++y)
      for (int x = 0; x < d.x; ++x) {
        const double px = (x + 0.5) * spec.spacing_mm.x, py = (y + 0.5) * spec.spacing_mm.y,
                     pz = (z + 0.5) * spec.spacing_mm.z;
        if (!spec.lung_left.contains(px, py, pz) && spec.lung_right.contains(px, py, pz)) ++right_expected;
      }
  CHECK(right == right_expected);
  CHECK(left > 0);
  CHECK(right > 0);
}

TEST_CASE("bad geometry is rejected") {
  auto spec = PhantomSpec::scaled_to({32, 32, 32}, {2, 2, 2});
  spec.lung_left.center_mm[0] = 0.0;  // sticks out of the body
  CHECK_THROWS_WITH_AS(generate_phantom(spec, 1), doctest::Contains("BadGeometry"), Error);
}

TEST_CASE("lesions stay inside lungs and respect their style") {
  auto spec = PhantomSpec::scaled_to({32, 32, 32}, {2, 2, 2});
  spec.noise_sigma_hu = 0.0;
  for (auto kind : {DiseaseKind::pneumonia_atelectasis, DiseaseKind::mass, DiseaseKind::emphysema,
                    DiseaseKind::nodules}) {
    for (auto style : {LesionStyle::raw_visible, LesionStyle::feature_favored}) {
      const auto lesions = make_lesions(kind, style, spec, 1234 + static_cast<int>(kind), 120.0);
      const auto ph = generate_diseased_phantom(spec, lesions, 99);
      std::size_t lesioned = 0;
      for (std::size_t i = 0; i < ph.lesion_voxels.size(); ++i) {
        if (!ph.lesion_voxels[i]) continue;
        ++lesioned;
        CHECK((ph.truth.labels()[i] == 2 || ph.truth.labels()[i] == 3));
      }
      CHECK(lesioned > 0);
    }
  }
}

TEST_CASE("feature_favored lesions have low mean contrast but strong alternation") {
  auto spec = PhantomSpec::scaled_to({32, 32, 32}, {2, 2, 2});
  spec.noise_sigma_hu = 0.0;
  const auto lesions = make_lesions(DiseaseKind::emphysema, LesionStyle::feature_favored, spec, 5, 120.0);
  const auto ph = generate_diseased_phantom(spec, lesions, 5);
  double mean = 0.0, alt = 0.0;
  std::size_t n = 0;
  const auto& d = spec.dims;
  for (int z = 0; z < d.z; ++z)
    for (int y = 0; y < d.y; ++y)
      for (int x = 0; x < d.x; ++x) {
        const std::size_t i = volgrid::voxel_index(d, x, y, z);
        if (!ph.lesion_voxels[i]) continue;
        const double delta = ph.volume_hu.values()[i] - (-850.0);
        mean += delta;
        alt += ((x + y + z) % 2 == 0 ? 1.0 : -1.0) * delta;
        ++n;
      }
  REQUIRE(n > 0);
  mean /= static_cast<double>(n);
  alt /= static_cast<double>(n);
  CHECK(mean == doctest::Approx(80.0).epsilon(0.05));   // low raw contrast
  CHECK(alt == doctest::Approx(120.0).epsilon(0.05));   // but strong texture
}

TEST_CASE("generate_dataset bookkeeping") {
  const auto dir = fresh_dir("ds");
  DatasetSpec spec;
  spec.n_scans = 50;
  spec.diseased_fraction = 0.64;
  spec.phantom = PhantomSpec::scaled_to({16, 16, 16}, {2, 2, 2});
  const auto manifest = generate_dataset(spec, 21, dir);

  REQUIRE(manifest.records.size() == 50);
  int diseased = 0;
  std::set<int> kinds_seen;
  for (const auto& r : manifest.records) {
    if (!r.normal()) {
      ++diseased;
      for (int d = 0; d < 4; ++d)
        if (r.flags[static_cast<std::size_t>(d)]) kinds_seen.insert(d);
    }
    CHECK(std::filesystem::exists(r.volume_path));
    CHECK(std::filesystem::exists(r.mask_path));
  }
  CHECK(diseased == 32);  // round(50 * 0.64)
  CHECK(kinds_seen.size() == 4);

  SUBCASE("volumes and truth masks really match the flags") {
    for (const auto& r : manifest.records) {
      const auto truth = volgrid::read_mask(r.mask_path);
      bool has_lung = false;
      for (auto l : truth.labels()) has_lung = has_lung || l == 2 || l == 3;
      CHECK(has_lung);
    }
  }
  SUBCASE("manifest csv matches the returned manifest") {
    const auto back = evalkit::read_manifest_csv(dir / "manifest.csv");
    REQUIRE(back.records.size() == manifest.records.size());
    for (std::size_t i = 0; i < back.records.size(); ++i) {
      CHECK(back.records[i].scan_id == manifest.records[i].scan_id);
      CHECK(back.records[i].flags == manifest.records[i].flags);
    }
  }
  SUBCASE("regeneration with the same seed is file-identical") {
    const auto dir2 = fresh_dir("ds2");
    generate_dataset(spec, 21, dir2);
    const auto a = read_file_bytes(dir / "s10003_vol.vgr");
    const auto b = read_file_bytes(dir2 / "s10003_vol.vgr");
    CHECK(a == b);
  }
}

TEST_CASE("multi_disease_rate zero means single flags; positive rate can add a second") {
  const auto dir = fresh_dir("md");
  DatasetSpec spec;
  spec.n_scans = 40;
  spec.multi_disease_rate = 0.0;
  spec.phantom = PhantomSpec::scaled_to({16, 16, 16}, {2, 2, 2});
  const auto manifest = generate_dataset(spec, 3, dir);
  for (const auto& r : manifest.records) {
    int flags = 0;
    for (int d = 0; d < 4; ++d) flags += r.flags[static_cast<std::size_t>(d)];
    CHECK(flags <= 1);
  }

  DatasetSpec multi = spec;
  multi.multi_disease_rate = 1.0;
  const auto dir2 = fresh_dir("md2");
  const auto m2 = generate_dataset(multi, 3, dir2);
  bool saw_multi = false;
  for (const auto& r : m2.records) {
    int flags = 0;
    for (int d = 0; d < 4; ++d) flags += r.flags[static_cast<std::size_t>(d)];
    saw_multi = saw_multi || flags == 2;
  }
  CHECK(saw_multi);
}

TEST_CASE("normal scans carry zero lesions in either style") {
  for (auto style : {LesionStyle::raw_visible, LesionStyle::feature_favored}) {
    auto spec = PhantomSpec::scaled_to({24, 24, 24}, {2, 2, 2});
    spec.noise_sigma_hu = 0.0;
    (void)style;  // normal phantom generation takes no lesions regardless of style
    const auto ph = generate_phantom(spec, 9);
    for (auto v : ph.lesion_voxels) CHECK(v == 0);
  }
}
