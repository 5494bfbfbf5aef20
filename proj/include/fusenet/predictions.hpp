#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace fusenet::clf3d {

// Per-scan inference outcome: the patch probabilities behind the scan-level
// score, which is their arithmetic mean.
struct ScanPrediction {
  std::string scan_id;
  std::vector<double> patch_probabilities;
  double scan_probability = 0.0;
  int predicted_class = 0;  // 1 = diseased
};

void write_predictions_csv(const std::vector<ScanPrediction>& preds, const std::filesystem::path& path);
std::vector<ScanPrediction> read_predictions_csv(const std::filesystem::path& path);

}  // namespace fusenet::clf3d
