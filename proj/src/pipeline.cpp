#include <algorithm>
#include <numeric>
#include <random>
#include <set>

#include "fusenet/clf3d.hpp"
#include "fusenet/util.hpp"

namespace fusenet::clf3d {

using gradnet::Shape;

namespace {

std::set<int> body_labels(int num_classes) {
  std::set<int> s;
  for (int c = 1; c < num_classes; ++c) s.insert(c);
  return s;
}

struct CachePaths {
  std::filesystem::path ct, mask, selected, stfa;
};

CachePaths cache_paths(const std::filesystem::path& dir, const std::string& scan_id) {
  return {dir / (scan_id + ".pre.vgr"), dir / (scan_id + ".msk.vgr"), dir / (scan_id + ".sel.vgr"),
          dir / (scan_id + ".stfa.vgr")};
}

}  // namespace

CachedScan load_or_compute_cached_scan(const evalkit::ScanRecord& scan, segnet::SegNetModel& backbone,
                                       const fusion::SelectionReport& selection,
                                       const preproc::PreprocConfig& preproc_cfg,
                                       const std::filesystem::path& cache_dir) {
  const CachePaths paths = cache_paths(cache_dir, scan.scan_id);
  namespace fs = std::filesystem;
  if (fs::exists(paths.ct) && fs::exists(paths.mask) && fs::exists(paths.selected) && fs::exists(paths.stfa)) {
    CachedScan c{volgrid::read_volume(paths.ct).channel(0), volgrid::read_mask(paths.mask),
                 volgrid::read_volume(paths.selected), volgrid::read_volume(paths.stfa).channel(0)};
    return c;
  }

  const auto raw = volgrid::read_volume(scan.volume_path);
  const auto ct = preproc::preprocess_scan(raw.channel(0), preproc_cfg);

  auto x = segnet::to_tensor(ct);
  auto [logits, taps] = backbone.forward_with_taps(x, /*training=*/false);

  // Argmax mask at full resolution, ties to the lower class index.
  const Shape ls = logits.shape();
  const std::size_t spatial = ls.spatial();
  std::vector<std::uint8_t> labels(spatial);
  const float* lv = logits.values().data();
  for (std::size_t i = 0; i < spatial; ++i) {
    int best = 0;
    float best_v = lv[i];
    for (int c = 1; c < ls.c; ++c) {
      const float v = lv[static_cast<std::size_t>(c) * spatial + i];
      if (v > best_v) {
        best_v = v;
        best = c;
      }
    }
    labels[i] = static_cast<std::uint8_t>(best);
  }
  volgrid::MaskVolume predicted(ct.dims(), ct.spacing_mm(), std::move(labels), backbone.config().num_classes);

  const auto feats = fusion::upsample_taps_to_reference(taps, ct.dims(), ct.spacing_mm());
  const auto body = volgrid::binarize_mask(predicted, body_labels(backbone.config().num_classes));
  const auto muted = fusion::mute_outside_body(feats, body);
  const auto selected = fusion::extract_selected(muted, selection);
  const auto agg = fusion::stfa(selected);

  std::filesystem::create_directories(cache_dir);
  volgrid::write_volume(volgrid::MultiChannelVolume::from_scalar(ct), paths.ct);
  volgrid::write_mask(predicted, paths.mask);
  volgrid::write_volume(selected, paths.selected);
  volgrid::write_volume(volgrid::MultiChannelVolume::from_scalar(agg), paths.stfa);

  return CachedScan{ct, predicted, selected, agg};
}

namespace {

// Sample = one patch of one scan inside a batch.
struct SampleRef {
  std::size_t scan_index;
  std::uint64_t center_seed;
};

Tensor<float> sample_input(const CachedScan& cached, Mode mode, fusion::DyFAAggregator* aggregator,
                           const patcher::PatchSpec& patch_spec, std::uint64_t center_seed) {
  const auto center = patcher::sample_centers(cached.predicted_mask, patch_spec.guide_labels, 1, center_seed)[0];
  const auto origin = patcher::patch_box_origin(cached.ct.dims(), center, patch_spec.patch_dims);
  const auto ct_mcv = volgrid::MultiChannelVolume::from_scalar(cached.ct);
  const auto ct_patch = patcher::extract_patch(ct_mcv, center, patch_spec.patch_dims);

  switch (mode) {
    case Mode::baseline:
      return segnet::to_tensor(ct_patch);
    case Mode::stfa: {
      const auto both = volgrid::concat_channels(ct_mcv, volgrid::MultiChannelVolume::from_scalar(cached.stfa_channel));
      return segnet::to_tensor(patcher::extract_patch(both, center, patch_spec.patch_dims));
    }
    case Mode::dyfa: {
      if (!aggregator) raise(Errc::BadConfig, "dyfa mode needs an aggregator");
      auto selected_t = segnet::to_tensor(cached.selected);
      auto agg_full = fusion::dyfa_forward(*aggregator, selected_t);
      auto agg_patch = gradnet::slice_dhw(
          agg_full, {origin.z, origin.y, origin.x},
          {patch_spec.patch_dims.z, patch_spec.patch_dims.y, patch_spec.patch_dims.x});
      std::vector<Tensor<float>> channels{segnet::to_tensor(ct_patch), agg_patch};
      return gradnet::concat_c(channels);
    }
  }
  raise(Errc::BadConfig, "unknown mode");
}

void assert_backbone_clean(segnet::SegNetModel& backbone) {
  for (auto* p : backbone.parameters())
    if (p->tensor.has_grad())
      raise(Errc::FrozenViolation, "backbone parameter " + p->name + " accumulated a gradient");
}

}  // namespace

std::vector<TrainLogRow> train(ClassifierModel& model, const evalkit::DatasetManifest& dataset,
                               segnet::SegNetModel& backbone, const fusion::SelectionReport& selection,
                               const TrainConfig& cfg, fusion::DyFAAggregator* aggregator) {
  if (dataset.records.empty()) raise(Errc::EmptyDataset, "train: empty dataset");
  if (!backbone.frozen()) raise(Errc::FrozenViolation, "train: backbone must be frozen before classifier training");
  if (cfg.mode == Mode::dyfa && !aggregator) raise(Errc::BadConfig, "train: dyfa mode needs an aggregator");
  if (cfg.batch_size < 1) raise(Errc::BadConfig, "train: batch size must be >= 1");
  const int expected_channels = cfg.mode == Mode::baseline ? 1 : 2;
  if (model.config().input_channels != expected_channels)
    raise(Errc::BadConfig, std::string("train: ") + mode_name(cfg.mode) + " mode needs a " +
                               std::to_string(expected_channels) + "-channel classifier");

  std::vector<TrainLogRow> log;
  if (cfg.epochs <= 0) return log;

  // The frozen backbone makes every derived per-scan artifact constant, so
  // they are materialized once up front.
  std::vector<CachedScan> cached;
  cached.reserve(dataset.records.size());
  for (const auto& rec : dataset.records)
    cached.push_back(load_or_compute_cached_scan(rec, backbone, selection, cfg.preproc, cfg.cache_dir));

  const std::size_t samples_per_epoch =
      dataset.records.size() * static_cast<std::size_t>(std::max(1, cfg.patches_per_scan_per_epoch));
  std::size_t steps_per_epoch = (samples_per_epoch + cfg.batch_size - 1) / cfg.batch_size;
  const bool merge_last = samples_per_epoch % cfg.batch_size == 1 && steps_per_epoch > 1;
  if (merge_last) steps_per_epoch -= 1;

  gradnet::CyclicLrSchedule schedule = cfg.lr;
  if (schedule.cycle_len_steps <= 0) schedule.cycle_len_steps = static_cast<long long>(steps_per_epoch);

  std::vector<Parameter<float>*> trainable = model.parameters();
  if (cfg.mode == Mode::dyfa) {
    trainable.push_back(&aggregator->weight);
    trainable.push_back(&aggregator->bias);
  }
  auto adam = gradnet::AdamState<float>::init(trainable);

  std::mt19937_64 order_rng(derive_seed(cfg.seed, "train-order"));
  int global_step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<SampleRef> samples;
    samples.reserve(samples_per_epoch);
    for (std::size_t si = 0; si < dataset.records.size(); ++si)
      for (int pi = 0; pi < std::max(1, cfg.patches_per_scan_per_epoch); ++pi)
        samples.push_back({si, derive_seed(derive_seed(cfg.seed, dataset.records[si].scan_id),
                                           "epoch-" + std::to_string(epoch) + "-patch-" + std::to_string(pi))});
    std::shuffle(samples.begin(), samples.end(), order_rng);

    std::size_t cursor = 0;
    for (std::size_t b = 0; b < steps_per_epoch; ++b) {
      std::size_t take = std::min<std::size_t>(cfg.batch_size, samples.size() - cursor);
      if (b + 1 == steps_per_epoch) take = samples.size() - cursor;  // absorbs a trailing singleton
      std::vector<Tensor<float>> inputs;
      std::vector<int> labels;
      inputs.reserve(take);
      for (std::size_t i = 0; i < take; ++i) {
        const SampleRef& ref = samples[cursor + i];
        const auto& rec = dataset.records[ref.scan_index];
        inputs.push_back(sample_input(cached[ref.scan_index], cfg.mode, aggregator, cfg.patch, ref.center_seed));
        labels.push_back(rec.normal() ? 0 : 1);
      }
      cursor += take;

      auto batch = gradnet::stack_n(inputs);
      auto logits = model.forward(batch, /*training=*/true);
      auto loss = gradnet::softmax_cross_entropy(logits, labels);
      loss.backward();
      assert_backbone_clean(backbone);

      const double lr = gradnet::lr_at(schedule, global_step);
      gradnet::adam_step(trainable, adam, static_cast<float>(lr));
      gradnet::zero_grads(trainable);

      log.push_back({global_step, epoch, lr, static_cast<double>(loss.values()[0])});
      ++global_step;
    }
  }
  return log;
}

ScanPrediction infer_scan(ClassifierModel& model, const evalkit::ScanRecord& scan, segnet::SegNetModel& backbone,
                          const fusion::SelectionReport& selection, Mode mode, fusion::DyFAAggregator* aggregator,
                          const preproc::PreprocConfig& preproc_cfg, const patcher::PatchSpec& patch_spec,
                          const std::filesystem::path& cache_dir, int n_patches) {
  const CachedScan cached = load_or_compute_cached_scan(scan, backbone, selection, preproc_cfg, cache_dir);

  volgrid::MultiChannelVolume input_vol = volgrid::MultiChannelVolume::from_scalar(cached.ct);
  if (mode == Mode::stfa) {
    input_vol = volgrid::concat_channels(input_vol, volgrid::MultiChannelVolume::from_scalar(cached.stfa_channel));
  } else if (mode == Mode::dyfa) {
    if (!aggregator) raise(Errc::BadConfig, "infer_scan: dyfa mode needs an aggregator");
    auto agg_full = fusion::dyfa_forward(*aggregator, segnet::to_tensor(cached.selected));
    input_vol = volgrid::concat_channels(input_vol, segnet::to_volume(agg_full, cached.ct.spacing_mm()));
  }

  const auto patches = patcher::inference_patches(input_vol, cached.predicted_mask, patch_spec, n_patches,
                                                  patcher::scan_seed(scan.scan_id));

  std::vector<Tensor<float>> inputs;
  inputs.reserve(patches.size());
  for (const auto& p : patches) inputs.push_back(segnet::to_tensor(p));
  auto batch = gradnet::stack_n(inputs);
  auto logits = model.forward(batch, /*training=*/false);

  ScanPrediction pred;
  pred.scan_id = scan.scan_id;
  const Shape ls = logits.shape();
  double sum = 0.0;
  for (int i = 0; i < ls.n; ++i) {
    const double a = logits.values()[static_cast<std::size_t>(i) * ls.c + 0];
    const double b = logits.values()[static_cast<std::size_t>(i) * ls.c + 1];
    const double m = std::max(a, b);
    const double prob = std::exp(b - m) / (std::exp(a - m) + std::exp(b - m));
    pred.patch_probabilities.push_back(prob);
    sum += prob;
  }
  pred.scan_probability = sum / static_cast<double>(pred.patch_probabilities.size());
  pred.predicted_class = pred.scan_probability >= 0.5 ? 1 : 0;
  return pred;
}

}  // namespace fusenet::clf3d
