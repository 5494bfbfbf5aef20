#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "fusenet/errors.hpp"
#include "fusenet/predictions.hpp"

namespace fusenet::evalkit {

// Table 1 disease categories, in manifest column order.
inline constexpr int kNumDiseases = 4;
inline constexpr std::array<const char*, kNumDiseases> kDiseaseNames = {"pneumonia_atelectasis", "mass", "emphysema",
                                                                        "nodules"};

struct ScanRecord {
  std::string scan_id;
  std::string patient_id;
  std::string volume_path;
  std::string mask_path;  // empty when no ground-truth mask exists
  std::array<bool, kNumDiseases> flags{};

  bool normal() const {
    for (bool f : flags)
      if (f) return false;
    return true;
  }
  int label_bits() const {
    int b = 0;
    for (int i = 0; i < kNumDiseases; ++i)
      if (flags[i]) b |= 1 << i;
    return b;
  }
};

struct DatasetManifest {
  std::vector<ScanRecord> records;

  const ScanRecord& by_id(const std::string& scan_id) const;
};

// CSV columns: scan_id, patient_id, volume_path, mask_path, then one 0/1
// column per disease and the derived normal flag.
void write_manifest_csv(const DatasetManifest& manifest, const std::filesystem::path& path);
DatasetManifest read_manifest_csv(const std::filesystem::path& path);

enum class Subset { train = 0, val = 1, test = 2 };

inline const char* subset_name(Subset s) {
  switch (s) {
    case Subset::train: return "train";
    case Subset::val: return "val";
    case Subset::test: return "test";
  }
  return "?";
}

struct SplitAssignment {
  std::map<std::string, Subset> subset_of;  // scan id -> subset
};

struct SplitFractions {
  double train = 0.675;
  double val = 0.225;
  double test = 0.10;
};

// Patient-exclusive stratified split: scans are grouped by patient, patients
// stratified by their combined label bits, and groups dealt greedily (largest
// first, seeded shuffle as tiebreak) to whichever subset is furthest below
// its target. No patient ever lands in two subsets.
SplitAssignment split(const DatasetManifest& manifest, SplitFractions fractions, std::uint64_t seed);

DatasetManifest manifest_subset(const DatasetManifest& manifest, const SplitAssignment& split, Subset subset);

// Trapezoidal AUC over the threshold sweep. The sum is carried as an exact
// integer numerator over 2*P*N, which makes it equal to the Mann-Whitney
// pair-counting statistic (ties get half credit) not just in the limit but
// bit-for-bit.
double auc(const std::vector<double>& scores, const std::vector<int>& labels);

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
};

// Thresholds at distinct scores, descending; endpoints (0,0) and (1,1)
// included.
std::vector<RocPoint> roc_points(const std::vector<double>& scores, const std::vector<int>& labels);

struct RocEntry {
  std::string name;           // disease name or "pooled"
  std::vector<double> scores;
  std::vector<int> labels;
  std::vector<RocPoint> points;
  double auc_value = 0.0;
  bool degenerate = false;    // no positives or no negatives in this comparison
};

struct RocReport {
  std::vector<RocEntry> entries;  // 4 per-disease entries then the pooled one
};

// Each disease's positive scans against all normal scans (scans positive
// only for other diseases sit out), plus pooled diseased-vs-normal.
RocReport evaluate(const std::vector<clf3d::ScanPrediction>& predictions, const DatasetManifest& manifest);

void write_roc_csv(const RocReport& report, const std::filesystem::path& path);
void write_auc_json(const RocReport& report, const std::filesystem::path& path);

}  // namespace fusenet::evalkit
