#include "fusenet/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "fusenet/checkpoint.hpp"
#include "fusenet/util.hpp"

namespace fusenet::fusion {

using gradnet::Shape;

void SelectionReport::save_json(const std::filesystem::path& path) const {
  nlohmann::json j;
  j["k"] = k;
  j["scores"] = scores;
  nlohmann::json sel = nlohmann::json::array();
  for (const auto& m : selected)
    sel.push_back({{"channel", m.channel}, {"scale_index", m.scale_index}, {"channel_in_scale", m.channel_in_scale}});
  j["selected"] = sel;
  write_file_bytes(path, j.dump(2) + "\n");
}

SelectionReport SelectionReport::load_json(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file_bytes(path));
  } catch (const nlohmann::json::exception& e) {
    raise(Errc::HeaderMismatch, path.string() + ": bad selection report: " + e.what());
  }
  SelectionReport r;
  r.k = j.at("k").get<int>();
  r.scores = j.at("scores").get<std::vector<double>>();
  for (const auto& m : j.at("selected"))
    r.selected.push_back({m.at("channel").get<int>(), m.at("scale_index").get<int>(),
                          m.at("channel_in_scale").get<int>()});
  if (static_cast<int>(r.selected.size()) != r.k)
    raise(Errc::HeaderMismatch, path.string() + ": selection count disagrees with k");
  return r;
}

volgrid::MultiChannelVolume upsample_taps_to_reference(const segnet::FeatureTaps& taps, volgrid::Dims ref,
                                                       const volgrid::Spacing& spacing) {
  std::vector<float> values;
  int total_c = 0;
  for (std::size_t s = 0; s < taps.taps.size(); ++s) {
    const auto& tap = taps.taps[s];
    if (!tap.defined()) raise(Errc::ShapeMismatch, "upsample_taps_to_reference: undefined tap");
    const int factor = segnet::FeatureTaps::kScaleFactors[s];
    Tensor<float> up = gradnet::upsample_trilinear(tap, factor);
    const Shape us = up.shape();
    if (us.d < ref.z || us.h < ref.y || us.w < ref.x)
      raise(Errc::ShapeMismatch, "upsample_taps_to_reference: upsampled tap smaller than reference grid");
    const std::array<int, 3> start{(us.d - ref.z) / 2, (us.h - ref.y) / 2, (us.w - ref.x) / 2};
    Tensor<float> cropped = gradnet::slice_dhw(up, start, {ref.z, ref.y, ref.x});
    values.insert(values.end(), cropped.values().begin(), cropped.values().end());
    total_c += us.c;
  }
  return volgrid::MultiChannelVolume(total_c, ref, spacing, std::move(values));
}

volgrid::MultiChannelVolume mute_outside_body(const volgrid::MultiChannelVolume& features,
                                              const volgrid::MaskVolume& body_mask) {
  if (!(features.dims() == body_mask.dims())) raise(Errc::ShapeMismatch, "mute_outside_body: dims differ");
  std::vector<float> out(features.values());
  const std::size_t n = features.dims().count();
  const auto& mask = body_mask.labels();
  for (int c = 0; c < features.channels(); ++c) {
    float* ch = out.data() + static_cast<std::size_t>(c) * n;
    for (std::size_t i = 0; i < n; ++i)
      if (mask[i] == 0) ch[i] = 0.0f;
  }
  return volgrid::MultiChannelVolume(features.channels(), features.dims(), features.spacing_mm(), std::move(out));
}

std::vector<double> map_scores(const volgrid::MultiChannelVolume& features, const volgrid::MaskVolume& lung_mask,
                               const volgrid::MaskVolume& body_mask) {
  if (!(features.dims() == lung_mask.dims()) || !(features.dims() == body_mask.dims()))
    raise(Errc::ShapeMismatch, "map_scores: dims differ");
  const std::size_t n = features.dims().count();
  std::size_t lung_n = 0, shell_n = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const bool in_lung = lung_mask.labels()[i] != 0;
    const bool in_body = body_mask.labels()[i] != 0;
    lung_n += in_lung;
    shell_n += (in_body && !in_lung);
  }
  if (lung_n == 0) raise(Errc::EmptyMask, "map_scores: lung mask is empty");
  if (shell_n == 0) raise(Errc::EmptyMask, "map_scores: body mask adds nothing outside the lungs");

  std::vector<double> scores(static_cast<std::size_t>(features.channels()));
  for (int c = 0; c < features.channels(); ++c) {
    const float* ch = features.channel_data(c);
    double lung_sum = 0.0, shell_sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const bool in_lung = lung_mask.labels()[i] != 0;
      const bool in_body = body_mask.labels()[i] != 0;
      if (in_lung)
        lung_sum += std::abs(static_cast<double>(ch[i]));
      else if (in_body)
        shell_sum += std::abs(static_cast<double>(ch[i]));
    }
    const double lung_mean = lung_sum / static_cast<double>(lung_n);
    const double shell_mean = shell_sum / static_cast<double>(shell_n);
    scores[static_cast<std::size_t>(c)] = lung_mean / (shell_mean + 1e-8);
  }
  return scores;
}

namespace {

SelectionReport rank_scores(std::vector<double> scores, int k, std::array<int, 3> stack_channels) {
  const int n_maps = static_cast<int>(scores.size());
  if (k < 1 || k > n_maps) raise(Errc::BadConfig, "select_maps: k must be in [1, channel count]");
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (scores[static_cast<std::size_t>(a)] != scores[static_cast<std::size_t>(b)])
      return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
    return a < b;
  });
  SelectionReport report;
  report.k = k;
  report.scores = std::move(scores);
  for (int i = 0; i < k; ++i) {
    const int c = order[static_cast<std::size_t>(i)];
    SelectedMap m;
    m.channel = c;
    int offset = 0;
    for (int s = 0; s < 3; ++s) {
      if (c < offset + stack_channels[static_cast<std::size_t>(s)]) {
        m.scale_index = s;
        m.channel_in_scale = c - offset;
        break;
      }
      offset += stack_channels[static_cast<std::size_t>(s)];
    }
    report.selected.push_back(m);
  }
  return report;
}

}  // namespace

SelectionReport select_maps(const volgrid::MultiChannelVolume& features, const volgrid::MaskVolume& lung_mask,
                            const volgrid::MaskVolume& body_mask, int k, std::array<int, 3> stack_channels) {
  return rank_scores(map_scores(features, lung_mask, body_mask), k, stack_channels);
}

SelectionReport select_maps_averaged(const std::vector<std::vector<double>>& per_scan_scores, int k,
                                     std::array<int, 3> stack_channels) {
  if (per_scan_scores.empty()) raise(Errc::EmptyDataset, "select_maps_averaged: no scans");
  std::vector<double> mean(per_scan_scores.front().size(), 0.0);
  for (const auto& s : per_scan_scores) {
    if (s.size() != mean.size()) raise(Errc::ShapeMismatch, "select_maps_averaged: score lengths differ");
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += s[i];
  }
  for (double& m : mean) m /= static_cast<double>(per_scan_scores.size());
  return rank_scores(std::move(mean), k, stack_channels);
}

volgrid::MultiChannelVolume extract_selected(const volgrid::MultiChannelVolume& features,
                                             const SelectionReport& report) {
  const std::size_t n = features.dims().count();
  std::vector<float> out;
  out.reserve(n * report.selected.size());
  for (const auto& m : report.selected) {
    if (m.channel < 0 || m.channel >= features.channels())
      raise(Errc::ShapeMismatch, "extract_selected: channel out of range");
    const float* ch = features.channel_data(m.channel);
    out.insert(out.end(), ch, ch + n);
  }
  return volgrid::MultiChannelVolume(static_cast<int>(report.selected.size()), features.dims(),
                                     features.spacing_mm(), std::move(out));
}

volgrid::ScalarVolume stfa(const volgrid::MultiChannelVolume& selected) {
  const std::size_t n = selected.dims().count();
  const int k = selected.channels();
  std::vector<float> out(n, 0.0f);
  for (int c = 0; c < k; ++c) {
    const float* ch = selected.channel_data(c);
    for (std::size_t i = 0; i < n; ++i) out[i] += ch[i];
  }
  const float inv = 1.0f / static_cast<float>(k);
  for (float& v : out) v *= inv;
  return volgrid::ScalarVolume(selected.dims(), selected.spacing_mm(), std::move(out));
}

DyFAAggregator::DyFAAggregator(int k) {
  if (k < 1) raise(Errc::BadConfig, "DyFAAggregator: k must be >= 1");
  weight.name = "dyfa.weight";
  weight.tensor = Tensor<float>::full(Shape{1, k, 1, 1, 1}, 1.0f / static_cast<float>(k), true);
  bias.name = "dyfa.bias";
  bias.tensor = Tensor<float>::zeros(Shape{1, 1, 1, 1, 1}, true);
}

void DyFAAggregator::save(const std::filesystem::path& path, long long optimizer_step) const {
  auto* self = const_cast<DyFAAggregator*>(this);
  nlohmann::json meta;
  meta["arch"] = "dyfa";
  meta["k"] = k();
  meta["optimizer_step"] = optimizer_step;
  std::vector<checkpoint::TensorRef> refs{
      {"dyfa.weight", self->weight.tensor.shape(), self->weight.frozen, false, &self->weight.tensor.values()},
      {"dyfa.bias", self->bias.tensor.shape(), self->bias.frozen, false, &self->bias.tensor.values()}};
  checkpoint::save(path, meta, refs);
}

void DyFAAggregator::load(const std::filesystem::path& path) {
  std::vector<checkpoint::TensorRef> refs{
      {"dyfa.weight", weight.tensor.shape(), weight.frozen, false, &weight.tensor.values()},
      {"dyfa.bias", bias.tensor.shape(), bias.frozen, false, &bias.tensor.values()}};
  const nlohmann::json meta = checkpoint::load(path, refs);
  if (meta.value("arch", "") != "dyfa") raise(Errc::HeaderMismatch, path.string() + ": not a DyFA checkpoint");
}

Tensor<float> dyfa_forward(DyFAAggregator& agg, const Tensor<float>& selected) {
  if (selected.shape().c != agg.k())
    raise(Errc::ShapeMismatch, "dyfa_forward: input has " + std::to_string(selected.shape().c) +
                                   " channels, aggregator expects " + std::to_string(agg.k()));
  return gradnet::conv1x1x1(selected, agg.weight.tensor, agg.bias.tensor);
}

}  // namespace fusenet::fusion
