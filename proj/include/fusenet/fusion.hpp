#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fusenet/gradnet.hpp"
#include "fusenet/segnet.hpp"
#include "fusenet/volgrid.hpp"

namespace fusenet::fusion {

using gradnet::Parameter;
using gradnet::Tensor;

// Which maps made the cut, and why. Persisted before classifier training so
// the selection stays fixed.
struct SelectedMap {
  int channel = 0;           // global index in tap order (scale 1/2, then 1/4, then 1/8)
  int scale_index = 0;       // 0,1,2
  int channel_in_scale = 0;
};

struct SelectionReport {
  int k = 13;
  std::vector<double> scores;        // one lung-affinity ratio per map
  std::vector<SelectedMap> selected; // descending score, ties to lower channel

  void save_json(const std::filesystem::path& path) const;
  static SelectionReport load_json(const std::filesystem::path& path);
};

// Each tap upsampled by its scale factor, then center-cropped/padded to the
// reference grid. Channel order: scale 1/2 maps, then 1/4, then 1/8.
volgrid::MultiChannelVolume upsample_taps_to_reference(const segnet::FeatureTaps& taps, volgrid::Dims reference_dims,
                                                       const volgrid::Spacing& spacing);

// Zero every channel wherever body_mask == 0; inside-body voxels untouched.
volgrid::MultiChannelVolume mute_outside_body(const volgrid::MultiChannelVolume& features,
                                              const volgrid::MaskVolume& body_mask);

// score(map) = mean |activation| inside lungs / (mean |activation| inside
// body but outside lungs + 1e-8); top-k wins. Masks are binary (1 = in).
SelectionReport select_maps(const volgrid::MultiChannelVolume& features, const volgrid::MaskVolume& lung_mask,
                            const volgrid::MaskVolume& body_mask, int k = 13,
                            std::array<int, 3> stack_channels = {12, 24, 24});

// Same ranking, but scores averaged over several scans' feature volumes.
SelectionReport select_maps_averaged(const std::vector<std::vector<double>>& per_scan_scores, int k,
                                     std::array<int, 3> stack_channels = {12, 24, 24});

// Raw per-map scores for one scan (the quantity select_maps ranks).
std::vector<double> map_scores(const volgrid::MultiChannelVolume& features, const volgrid::MaskVolume& lung_mask,
                               const volgrid::MaskVolume& body_mask);

// Gather the report's channels, in report order.
volgrid::MultiChannelVolume extract_selected(const volgrid::MultiChannelVolume& features,
                                             const SelectionReport& report);

// Voxelwise arithmetic mean across channels.
volgrid::ScalarVolume stfa(const volgrid::MultiChannelVolume& selected);

// Trainable 1x1x1 aggregation. Initialized at the StFA point: every weight
// 1/k, bias 0, so DyFA and StFA coincide at step zero.
struct DyFAAggregator {
  Parameter<float> weight;
  Parameter<float> bias;

  explicit DyFAAggregator(int k);
  int k() const { return weight.tensor.shape().c; }

  void save(const std::filesystem::path& path, long long optimizer_step = 0) const;
  void load(const std::filesystem::path& path);
};

// conv1x1x1 with the aggregator's parameters; stays on the tape so the
// classification loss reaches the weights.
Tensor<float> dyfa_forward(DyFAAggregator& agg, const Tensor<float>& selected);

}  // namespace fusenet::fusion
