#include "fusenet/synthlab.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "fusenet/util.hpp"

namespace fusenet::synthlab {

PhantomSpec PhantomSpec::scaled_to(volgrid::Dims dims, volgrid::Spacing spacing_mm) {
  PhantomSpec s;
  s.dims = dims;
  s.spacing_mm = spacing_mm;
  const double ex = dims.x * spacing_mm.x;
  const double ey = dims.y * spacing_mm.y;
  const double ez = dims.z * spacing_mm.z;
  const std::array<double, 3> c{ex / 2.0, ey / 2.0, ez / 2.0};
  s.body = {c, {0.40 * ex, 0.37 * ey, 0.44 * ez}};
  s.lung_left = {{c[0] - 0.18 * ex, c[1], c[2]}, {0.155 * ex, 0.20 * ey, 0.28 * ez}};
  s.lung_right = {{c[0] + 0.18 * ex, c[1], c[2]}, {0.155 * ex, 0.20 * ey, 0.28 * ez}};
  return s;
}

namespace {

// Surface probe: the scaled lung ellipsoid must sit strictly inside the body.
bool strictly_inside(const Ellipsoid& inner, const Ellipsoid& outer) {
  for (int iz = -2; iz <= 2; ++iz)
    for (int iy = -2; iy <= 2; ++iy)
      for (int ix = -2; ix <= 2; ++ix) {
        const double n = std::sqrt(static_cast<double>(ix * ix + iy * iy + iz * iz));
        if (n == 0.0) continue;
        const double px = inner.center_mm[0] + inner.semi_mm[0] * ix / n;
        const double py = inner.center_mm[1] + inner.semi_mm[1] * iy / n;
        const double pz = inner.center_mm[2] + inner.semi_mm[2] * iz / n;
        const double dx = (px - outer.center_mm[0]) / outer.semi_mm[0];
        const double dy = (py - outer.center_mm[1]) / outer.semi_mm[1];
        const double dz = (pz - outer.center_mm[2]) / outer.semi_mm[2];
        if (dx * dx + dy * dy + dz * dz >= 1.0) return false;
      }
  return true;
}

inline double voxel_center(int i, double spacing) { return (i + 0.5) * spacing; }

}  // namespace

PhantomResult generate_phantom(const PhantomSpec& spec, std::uint64_t seed) {
  return generate_diseased_phantom(spec, {}, seed);
}

PhantomResult generate_diseased_phantom(const PhantomSpec& spec, const std::vector<Lesion>& lesions,
                                        std::uint64_t seed) {
  if (!strictly_inside(spec.lung_left, spec.body) || !strictly_inside(spec.lung_right, spec.body))
    raise(Errc::BadGeometry, "generate_phantom: lungs not strictly inside the body");

  const auto& d = spec.dims;
  const auto& sp = spec.spacing_mm;
  const std::size_t n = d.count();
  std::vector<std::uint8_t> labels(n, 0);
  std::vector<float> hu(n, static_cast<float>(spec.hu_air));
  std::vector<std::uint8_t> lesioned(n, 0);

  std::size_t idx = 0;
  for (int z = 0; z < d.z; ++z) {
    const double pz = voxel_center(z, sp.z);
    for (int y = 0; y < d.y; ++y) {
      const double py = voxel_center(y, sp.y);
      for (int x = 0; x < d.x; ++x, ++idx) {
        const double px = voxel_center(x, sp.x);
        std::uint8_t label = 0;
        double base = spec.hu_air;
        if (spec.lung_left.contains(px, py, pz)) {
          label = 2;
          base = spec.hu_lung;
        } else if (spec.lung_right.contains(px, py, pz)) {
          label = 3;
          base = spec.hu_lung;
        } else if (spec.body.contains(px, py, pz)) {
          label = 1;
          base = spec.hu_body;
        }
        labels[idx] = label;

        if (label == 2 || label == 3) {
          for (const auto& les : lesions) {
            bool in_region = les.whole_lung;
            if (!in_region)
              for (const auto& r : les.regions)
                if (r.contains(px, py, pz)) {
                  in_region = true;
                  break;
                }
            if (in_region) {
              base += les.delta_hu;
              if (les.texture_amplitude_hu != 0.0)
                base += ((x + y + z) % 2 == 0 ? 1.0 : -1.0) * les.texture_amplitude_hu;
              lesioned[idx] = 1;
            }
          }
        }
        hu[idx] = static_cast<float>(base);
      }
    }
  }

  if (spec.noise_sigma_hu > 0.0) {
    std::mt19937_64 rng(derive_seed(seed, "phantom-noise"));
    std::normal_distribution<double> noise(0.0, spec.noise_sigma_hu);
    for (std::size_t i = 0; i < n; ++i) hu[i] = static_cast<float>(hu[i] + noise(rng));
  }

  PhantomResult out{volgrid::ScalarVolume(d, sp, std::move(hu)),
                    volgrid::MaskVolume(d, sp, std::move(labels), 4), std::move(lesioned)};
  return out;
}

namespace {

double jittered(std::mt19937_64& rng, double value, double rel) {
  std::uniform_real_distribution<double> u(-rel, rel);
  return value * (1.0 + u(rng));
}

Ellipsoid jitter_ellipsoid(std::mt19937_64& rng, const Ellipsoid& e, double rel) {
  Ellipsoid out = e;
  for (int i = 0; i < 3; ++i) {
    out.center_mm[static_cast<std::size_t>(i)] += e.semi_mm[static_cast<std::size_t>(i)] *
                                                  std::uniform_real_distribution<double>(-rel, rel)(rng);
    out.semi_mm[static_cast<std::size_t>(i)] = jittered(rng, e.semi_mm[static_cast<std::size_t>(i)], rel);
  }
  return out;
}

// A sphere that fits inside the lung around a jittered interior point.
Ellipsoid place_sphere(std::mt19937_64& rng, const Ellipsoid& lung, double r_lo, double r_hi) {
  const double min_semi = std::min({lung.semi_mm[0], lung.semi_mm[1], lung.semi_mm[2]});
  double r = std::uniform_real_distribution<double>(r_lo, r_hi)(rng);
  r = std::min(r, 0.85 * min_semi);
  Ellipsoid s;
  for (int i = 0; i < 3; ++i) {
    const double slack = std::max(0.0, lung.semi_mm[static_cast<std::size_t>(i)] * 0.5 - r * 0.25);
    s.center_mm[static_cast<std::size_t>(i)] =
        lung.center_mm[static_cast<std::size_t>(i)] + std::uniform_real_distribution<double>(-slack, slack)(rng);
  }
  s.semi_mm = {r, r, r};
  return s;
}

}  // namespace

std::vector<Lesion> make_lesions(DiseaseKind kind, LesionStyle style, const PhantomSpec& spec, std::uint64_t seed,
                                 double texture_amplitude_hu) {
  std::mt19937_64 rng(seed);
  const bool featfav = style == LesionStyle::feature_favored;
  const double delta = featfav ? 80.0 : 0.0;  // feature-favored lesions keep raw contrast low
  const double amp = featfav ? texture_amplitude_hu : 0.0;
  const Ellipsoid& lung = (rng() & 1) ? spec.lung_right : spec.lung_left;

  std::vector<Lesion> out;
  switch (kind) {
    case DiseaseKind::pneumonia_atelectasis: {
      // Consolidation: a half-lung-scale patch, dense in the raw style.
      Lesion l;
      l.kind = kind;
      Ellipsoid region = lung;
      for (int i = 0; i < 3; ++i) region.semi_mm[static_cast<std::size_t>(i)] *= 0.55;
      region.center_mm[2] -= lung.semi_mm[2] * 0.35;  // sits low in the lung
      l.regions.push_back(region);
      l.delta_hu = featfav ? delta : 600.0;
      l.texture_amplitude_hu = amp;
      out.push_back(std::move(l));
      break;
    }
    case DiseaseKind::mass: {
      Lesion l;
      l.kind = kind;
      l.regions.push_back(place_sphere(rng, lung, 8.0, 12.0));
      l.delta_hu = featfav ? delta : 700.0;
      l.texture_amplitude_hu = amp;
      out.push_back(std::move(l));
      break;
    }
    case DiseaseKind::emphysema: {
      Lesion l;
      l.kind = kind;
      l.whole_lung = true;  // diffuse attenuation change over both lungs
      l.delta_hu = featfav ? delta : -100.0;
      l.texture_amplitude_hu = amp;
      out.push_back(std::move(l));
      break;
    }
    case DiseaseKind::nodules: {
      const int count = 3 + static_cast<int>(uniform_index(rng, 6));  // 3..8
      Lesion l;
      l.kind = kind;
      for (int i = 0; i < count; ++i) {
        const Ellipsoid& host = (rng() & 1) ? spec.lung_right : spec.lung_left;
        l.regions.push_back(place_sphere(rng, host, 2.0, 4.0));
      }
      l.delta_hu = featfav ? delta : 700.0;
      l.texture_amplitude_hu = amp;
      out.push_back(std::move(l));
      break;
    }
  }
  return out;
}

LesionStyle lesion_style_from_name(const std::string& name) {
  if (name == "raw_visible") return LesionStyle::raw_visible;
  if (name == "feature_favored") return LesionStyle::feature_favored;
  raise(Errc::BadConfig, "unknown lesion style '" + name + "'");
}

const char* lesion_style_name(LesionStyle s) {
  return s == LesionStyle::raw_visible ? "raw_visible" : "feature_favored";
}

evalkit::DatasetManifest generate_dataset(const DatasetSpec& spec, std::uint64_t seed,
                                          const std::filesystem::path& out_dir) {
  if (spec.n_scans < 2) raise(Errc::BadConfig, "generate_dataset: need at least 2 scans");
  std::filesystem::create_directories(out_dir);

  const int n_diseased = static_cast<int>(std::floor(spec.n_scans * spec.diseased_fraction + 0.5));
  std::mt19937_64 rng(derive_seed(seed, "dataset-layout"));

  // Disease kinds are dealt round-robin so the four classes stay balanced,
  // then the scan order is shuffled.
  struct Plan {
    bool diseased = false;
    std::vector<DiseaseKind> kinds;
  };
  std::vector<Plan> plans(static_cast<std::size_t>(spec.n_scans));
  for (int i = 0; i < n_diseased; ++i) {
    plans[static_cast<std::size_t>(i)].diseased = true;
    plans[static_cast<std::size_t>(i)].kinds.push_back(static_cast<DiseaseKind>(i % 4));
  }
  std::shuffle(plans.begin(), plans.end(), rng);
  for (auto& p : plans) {
    if (p.diseased && spec.multi_disease_rate > 0.0 &&
        std::uniform_real_distribution<double>(0.0, 1.0)(rng) < spec.multi_disease_rate) {
      DiseaseKind second;
      do {
        second = static_cast<DiseaseKind>(uniform_index(rng, 4));
      } while (second == p.kinds.front());
      p.kinds.push_back(second);
    }
  }

  // Patient ids: consecutive scans share a patient according to the
  // scans-per-patient weights, which is what exercises split exclusivity.
  std::vector<std::string> patient_of(plans.size());
  {
    int patient = 0;
    std::size_t i = 0;
    std::discrete_distribution<int> scans_per_patient(spec.scans_per_patient_weights.begin(),
                                                      spec.scans_per_patient_weights.end());
    while (i < plans.size()) {
      const int k = scans_per_patient(rng) + 1;
      const std::string pid = "p" + std::to_string(1000 + patient);
      for (int j = 0; j < k && i < plans.size(); ++j, ++i) patient_of[i] = pid;
      ++patient;
    }
  }

  evalkit::DatasetManifest manifest;
  for (std::size_t i = 0; i < plans.size(); ++i) {
    const std::string scan_id = "s" + std::to_string(10000 + i);
    const std::uint64_t scan_master = derive_seed(seed, scan_id);
    std::mt19937_64 geo_rng(derive_seed(scan_master, "geometry"));

    // Jitter the base geometry until it is valid; bounded retries keep the
    // generator total.
    PhantomSpec ps = spec.phantom;
    bool ok = false;
    for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
      ps.body = jitter_ellipsoid(geo_rng, spec.phantom.body, spec.geometry_jitter);
      ps.lung_left = jitter_ellipsoid(geo_rng, spec.phantom.lung_left, spec.geometry_jitter);
      ps.lung_right = jitter_ellipsoid(geo_rng, spec.phantom.lung_right, spec.geometry_jitter);
      ok = strictly_inside(ps.lung_left, ps.body) && strictly_inside(ps.lung_right, ps.body);
    }
    if (!ok) raise(Errc::BadGeometry, "generate_dataset: could not place lungs inside body for " + scan_id);

    std::vector<Lesion> lesions;
    for (std::size_t ki = 0; ki < plans[i].kinds.size(); ++ki) {
      auto ls = make_lesions(plans[i].kinds[ki], spec.style, ps,
                             derive_seed(scan_master, "lesion-" + std::to_string(ki)), spec.texture_amplitude_hu);
      lesions.insert(lesions.end(), ls.begin(), ls.end());
    }

    const PhantomResult ph = generate_diseased_phantom(ps, lesions, scan_master);

    const std::string vol_name = scan_id + "_vol.vgr";
    const std::string mask_name = scan_id + "_mask.vgr";
    volgrid::write_volume(volgrid::MultiChannelVolume::from_scalar(ph.volume_hu), out_dir / vol_name);
    volgrid::write_mask(ph.truth, out_dir / mask_name);
    if (spec.write_lesion_masks) {
      volgrid::MaskVolume lm(ph.truth.dims(), ph.truth.spacing_mm(), ph.lesion_voxels, 2);
      volgrid::write_mask(lm, out_dir / (scan_id + "_lesions.vgr"));
    }

    evalkit::ScanRecord rec;
    rec.scan_id = scan_id;
    rec.patient_id = patient_of[i];
    rec.volume_path = (out_dir / vol_name).string();
    rec.mask_path = (out_dir / mask_name).string();
    for (DiseaseKind kind : plans[i].kinds) rec.flags[static_cast<std::size_t>(kind)] = true;
    manifest.records.push_back(std::move(rec));
  }

  evalkit::write_manifest_csv(manifest, out_dir / "manifest.csv");
  return manifest;
}

}  // namespace fusenet::synthlab
