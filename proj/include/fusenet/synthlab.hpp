#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "fusenet/evalkit.hpp"
#include "fusenet/volgrid.hpp"

namespace fusenet::synthlab {

struct Ellipsoid {
  std::array<double, 3> center_mm{};
  std::array<double, 3> semi_mm{};

  bool contains(double px, double py, double pz) const {
    const double dx = (px - center_mm[0]) / semi_mm[0];
    const double dy = (py - center_mm[1]) / semi_mm[1];
    const double dz = (pz - center_mm[2]) / semi_mm[2];
    return dx * dx + dy * dy + dz * dz <= 1.0;
  }
};

// Torso stand-in: one body ellipsoid holding two lung ellipsoids, flat HU
// levels per region plus Gaussian noise. Truth labels: 0 background, 1 body,
// 2 left lung, 3 right lung.
struct PhantomSpec {
  volgrid::Dims dims{32, 32, 32};
  volgrid::Spacing spacing_mm{2.0, 2.0, 2.0};
  Ellipsoid body;
  Ellipsoid lung_left;
  Ellipsoid lung_right;
  double hu_air = -1000.0;
  double hu_body = 40.0;
  double hu_lung = -850.0;
  double noise_sigma_hu = 20.0;

  // Geometry proportional to the physical extent; holds for 32^3 and 112^3.
  static PhantomSpec scaled_to(volgrid::Dims dims, volgrid::Spacing spacing_mm);
};

enum class DiseaseKind { pneumonia_atelectasis = 0, mass = 1, emphysema = 2, nodules = 3 };
enum class LesionStyle { raw_visible, feature_favored };

LesionStyle lesion_style_from_name(const std::string& name);
const char* lesion_style_name(LesionStyle s);

// A placed lesion: regions are intersected with the lung masks when painted,
// so lesions never leak outside the lungs.
struct Lesion {
  DiseaseKind kind{};
  std::vector<Ellipsoid> regions;
  bool whole_lung = false;         // diffuse change across both lungs
  double delta_hu = 0.0;           // mean intensity shift inside the region
  double texture_amplitude_hu = 0; // voxel-alternating component on top
};

// Draw lesion geometry for one disease inside the spec's lungs.
std::vector<Lesion> make_lesions(DiseaseKind kind, LesionStyle style, const PhantomSpec& spec, std::uint64_t seed,
                                 double texture_amplitude_hu);

struct PhantomResult {
  volgrid::ScalarVolume volume_hu;
  volgrid::MaskVolume truth;
  std::vector<std::uint8_t> lesion_voxels;  // 1 where a lesion changed the voxel
};

PhantomResult generate_phantom(const PhantomSpec& spec, std::uint64_t seed);
PhantomResult generate_diseased_phantom(const PhantomSpec& spec, const std::vector<Lesion>& lesions,
                                        std::uint64_t seed);

struct DatasetSpec {
  int n_scans = 100;
  double diseased_fraction = 0.636;  // the paper's 1:1.75 normal:diseased ratio
  double multi_disease_rate = 0.0;
  LesionStyle style = LesionStyle::raw_visible;
  PhantomSpec phantom = PhantomSpec::scaled_to({32, 32, 32}, {2.0, 2.0, 2.0});
  double geometry_jitter = 0.06;     // relative perturbation of centers/axes per scan
  double texture_amplitude_hu = 120.0;
  std::vector<double> scans_per_patient_weights{0.70, 0.20, 0.10};  // P(1), P(2), P(3)
  bool write_lesion_masks = false;
};

// Writes volumes, truth masks and manifest.csv under out_dir. Deterministic
// given (spec, seed). Disease kinds are balanced across the four classes.
evalkit::DatasetManifest generate_dataset(const DatasetSpec& spec, std::uint64_t seed,
                                          const std::filesystem::path& out_dir);

}  // namespace fusenet::synthlab
