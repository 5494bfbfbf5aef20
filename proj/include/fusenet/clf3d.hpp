#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "fusenet/evalkit.hpp"
#include "fusenet/fusion.hpp"
#include "fusenet/gradnet.hpp"
#include "fusenet/patcher.hpp"
#include "fusenet/predictions.hpp"
#include "fusenet/preproc.hpp"
#include "fusenet/segnet.hpp"

namespace fusenet::clf3d {

using gradnet::BatchNormState;
using gradnet::Parameter;
using gradnet::Tensor;

enum class Mode { baseline, stfa, dyfa };

inline const char* mode_name(Mode m) {
  switch (m) {
    case Mode::baseline: return "baseline";
    case Mode::stfa: return "stfa";
    case Mode::dyfa: return "dyfa";
  }
  return "?";
}

Mode mode_from_name(const std::string& name);

// 3D ResNet: stem conv, then 5 stages of 2 residual blocks (first block of
// stages 2-5 strides down), global average pool, fully connected head.
struct ClassifierConfig {
  int blocks_per_resolution = 2;
  int resolutions = 5;
  int base_channels = 16;
  int max_channels = 128;
  int input_channels = 2;  // 1 in baseline mode
  int num_classes = 2;
  int stem_stride = 2;
  patcher::PatchSpec patch;

  int channels_at(int stage) const { return std::min(base_channels << stage, max_channels); }
  int total_blocks() const { return blocks_per_resolution * resolutions; }
};

struct ResidualBlock {
  segnet::ConvBn conv1, conv2;
  bool has_projection = false;
  segnet::ConvBn projection;  // 1x1x1, used when stride or width changes
  int stride = 1;
};

class ClassifierModel {
 public:
  ClassifierModel(const ClassifierConfig& cfg, std::uint64_t init_seed);

  const ClassifierConfig& config() const { return cfg_; }
  std::vector<Parameter<float>*> parameters();

  Tensor<float> forward(const Tensor<float>& x, bool training);

  void save(const std::filesystem::path& path, long long optimizer_step = 0) const;
  void load(const std::filesystem::path& path);

  segnet::ConvBn stem_;
  std::vector<std::vector<ResidualBlock>> stages_;
  Parameter<float> fc_w_, fc_b_;

 private:
  ClassifierConfig cfg_;
};

ClassifierModel build_classifier(const ClassifierConfig& cfg, std::uint64_t init_seed);

// Softmax over the two logits; probability of the diseased class.
double forward_probability(ClassifierModel& model, const Tensor<float>& patch);

struct TrainConfig {
  int epochs = 60;
  int batch_size = 16;
  std::uint64_t seed = 0;
  Mode mode = Mode::dyfa;
  gradnet::CyclicLrSchedule lr;       // cycle_len_steps 0 = one epoch
  int patches_per_scan_per_epoch = 1;
  preproc::PreprocConfig preproc;
  patcher::PatchSpec patch;
  std::filesystem::path cache_dir;    // per-scan feature cache location
};

struct TrainLogRow {
  int step = 0;
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
};

void write_train_log_csv(const std::vector<TrainLogRow>& log, const std::filesystem::path& path);

// One classifier training run. The segnet must be frozen; the selection is
// fixed up front. StFA channels come from the per-scan cache (they are
// constant under a frozen backbone); DyFA re-aggregates in-graph each step so
// the classification loss reaches the aggregator weights. Baseline ignores
// the backbone and trains on single-channel CT patches.
std::vector<TrainLogRow> train(ClassifierModel& model, const evalkit::DatasetManifest& dataset,
                               segnet::SegNetModel& backbone, const fusion::SelectionReport& selection,
                               const TrainConfig& cfg, fusion::DyFAAggregator* aggregator);

// Six seeded patches -> mean diseased probability -> class call at 0.5.
ScanPrediction infer_scan(ClassifierModel& model, const evalkit::ScanRecord& scan, segnet::SegNetModel& backbone,
                          const fusion::SelectionReport& selection, Mode mode, fusion::DyFAAggregator* aggregator,
                          const preproc::PreprocConfig& preproc_cfg, const patcher::PatchSpec& patch_spec,
                          const std::filesystem::path& cache_dir, int n_patches = 6);

// ---- Per-scan cache -------------------------------------------------------
// Everything the frozen backbone derives from a scan is immutable, so it is
// computed once and reused across epochs, modes and seeds.
struct CachedScan {
  volgrid::ScalarVolume ct;                 // preprocessed
  volgrid::MaskVolume predicted_mask;
  volgrid::MultiChannelVolume selected;     // k muted feature channels at reference grid
  volgrid::ScalarVolume stfa_channel;
};

CachedScan load_or_compute_cached_scan(const evalkit::ScanRecord& scan, segnet::SegNetModel& backbone,
                                       const fusion::SelectionReport& selection,
                                       const preproc::PreprocConfig& preproc_cfg,
                                       const std::filesystem::path& cache_dir);

}  // namespace fusenet::clf3d
