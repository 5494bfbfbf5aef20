#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fusenet/evalkit.hpp"
#include "fusenet/gradnet.hpp"
#include "fusenet/preproc.hpp"
#include "fusenet/volgrid.hpp"

namespace fusenet::segnet {

using gradnet::BatchNormState;
using gradnet::Parameter;
using gradnet::Tensor;

// Simplified DenseVNet: strided stem, three dense feature stacks whose
// concatenated layer outputs are the exported taps, stride-2 transitions,
// 1x1x1 skip convs merged at half resolution, a learnable coarse spatial
// prior added on top, and a final conv upsampled to full resolution.
struct SegNetConfig {
  std::array<int, 3> stack_channels{12, 24, 24};  // taps at scales 1/2, 1/4, 1/8
  int dense_layers_per_stack = 4;
  int num_classes = 4;  // background, body, left lung, right lung
  bool spatial_prior = true;
  int prior_grid = 12;
  int kernel = 3;
  int stem_channels = 12;
  int skip_channels = 12;

  int growth(int stack) const { return stack_channels[static_cast<std::size_t>(stack)] / dense_layers_per_stack; }
  int tap_total() const { return stack_channels[0] + stack_channels[1] + stack_channels[2]; }
};

struct FeatureTaps {
  std::array<Tensor<float>, 3> taps;   // channel counts per config, scales 1/2, 1/4, 1/8
  static constexpr std::array<int, 3> kScaleFactors{2, 4, 8};
};

struct ConvBn {
  Parameter<float> w, b, bn_scale, bn_shift;
  BatchNormState<float> bn;
};

class SegNetModel {
 public:
  explicit SegNetModel(const SegNetConfig& cfg, std::uint64_t init_seed);

  const SegNetConfig& config() const { return cfg_; }
  bool frozen() const { return frozen_; }

  std::vector<Parameter<float>*> parameters();
  std::vector<const Parameter<float>*> parameters() const;

  // Logits at full input resolution plus the three stack taps.
  std::pair<Tensor<float>, FeatureTaps> forward_with_taps(const Tensor<float>& x, bool training);

  void save(const std::filesystem::path& path, long long optimizer_step = 0) const;
  void load(const std::filesystem::path& path);

  ConvBn stem_;
  std::vector<std::vector<ConvBn>> stacks_;  // [stack][layer]
  std::vector<ConvBn> transitions_;          // between stacks
  std::vector<Parameter<float>> skips_w_, skips_b_;
  Parameter<float> prior_;
  Parameter<float> final_w_, final_b_;

 private:
  SegNetConfig cfg_;
  bool frozen_ = false;
  friend void freeze(SegNetModel&);
};

// Flags every parameter frozen; later optimizer steps skip them and forward
// passes stop allocating gradients for them. Idempotent.
void freeze(SegNetModel& model);

// Per-voxel argmax over class logits; ties go to the lower class index.
volgrid::MaskVolume predict_mask(SegNetModel& model, const volgrid::ScalarVolume& vol);

struct PretrainConfig {
  int epochs = 30;
  double lr = 1e-3;
  preproc::PreprocConfig preproc{};
};

struct PretrainLogRow {
  int epoch = 0;
  int step = 0;
  double loss = 0.0;
};

// Voxelwise softmax cross-entropy against the manifest's truth masks, Adam,
// batch size 1. Deterministic given the seed. Phantom grids must already
// match the preprocessing target grid (synthlab generates them that way).
std::vector<PretrainLogRow> pretrain(SegNetModel& model, const evalkit::DatasetManifest& phantoms,
                                     const PretrainConfig& cfg, std::uint64_t seed);

// 2|A∩B| / (|A|+|B|) for one label; 1.0 when both sets are empty.
double dice(const volgrid::MaskVolume& pred, const volgrid::MaskVolume& truth, int label);

// Bridge helpers between volume data and tensors (N=1).
Tensor<float> to_tensor(const volgrid::ScalarVolume& v);
Tensor<float> to_tensor(const volgrid::MultiChannelVolume& v);
volgrid::MultiChannelVolume to_volume(const Tensor<float>& t, const volgrid::Spacing& spacing);

}  // namespace fusenet::segnet
