#include "fusenet/segnet.hpp"

#include <algorithm>
#include <random>

#include <json.hpp>

#include "fusenet/checkpoint.hpp"
#include "fusenet/util.hpp"

namespace fusenet::segnet {

using gradnet::Shape;

namespace {

ConvBn make_conv_bn(const std::string& name, int c_in, int c_out, int k, std::uint64_t seed) {
  ConvBn cb;
  cb.w.name = name + ".w";
  cb.w.tensor = Tensor<float>::zeros(Shape{c_out, c_in, k, k, k}, true);
  gradnet::he_normal_fill(cb.w.tensor.values(), static_cast<std::size_t>(c_in) * k * k * k,
                          derive_seed(seed, cb.w.name));
  cb.b.name = name + ".b";
  cb.b.tensor = Tensor<float>::zeros(Shape{c_out, 1, 1, 1, 1}, true);
  cb.bn_scale.name = name + ".bn.scale";
  cb.bn_scale.tensor = Tensor<float>::full(Shape{1, c_out, 1, 1, 1}, 1.0f, true);
  cb.bn_shift.name = name + ".bn.shift";
  cb.bn_shift.tensor = Tensor<float>::zeros(Shape{1, c_out, 1, 1, 1}, true);
  cb.bn = gradnet::BatchNormState<float>::init(c_out);
  return cb;
}

Tensor<float> conv_bn_relu(ConvBn& cb, const Tensor<float>& x, int stride, int padding, bool training) {
  auto y = gradnet::conv3d(x, cb.w.tensor, cb.b.tensor, stride, padding);
  y = gradnet::batch_norm(y, cb.bn_scale.tensor, cb.bn_shift.tensor, cb.bn, training);
  return gradnet::relu(y);
}

void collect(std::vector<Parameter<float>*>& out, ConvBn& cb) {
  out.push_back(&cb.w);
  out.push_back(&cb.b);
  out.push_back(&cb.bn_scale);
  out.push_back(&cb.bn_shift);
}

}  // namespace

SegNetModel::SegNetModel(const SegNetConfig& cfg, std::uint64_t init_seed) : cfg_(cfg) {
  if (cfg.num_classes < 2) raise(Errc::BadConfig, "SegNetConfig: num_classes must be >= 2");
  for (int s = 0; s < 3; ++s)
    if (cfg.stack_channels[static_cast<std::size_t>(s)] % cfg.dense_layers_per_stack != 0)
      raise(Errc::BadConfig, "SegNetConfig: stack channels must divide evenly into dense layers");

  const int k = cfg.kernel;
  stem_ = make_conv_bn("stem", 1, cfg.stem_channels, k, init_seed);

  int in_ch = cfg.stem_channels;
  for (int s = 0; s < 3; ++s) {
    std::vector<ConvBn> layers;
    int cur = in_ch;
    for (int l = 0; l < cfg.dense_layers_per_stack; ++l) {
      layers.push_back(
          make_conv_bn("stack" + std::to_string(s) + ".layer" + std::to_string(l), cur, cfg.growth(s), k, init_seed));
      cur += cfg.growth(s);
    }
    stacks_.push_back(std::move(layers));
    const int tap_ch = cfg.stack_channels[static_cast<std::size_t>(s)];
    if (s < 2) {
      const int next_in = cfg.stack_channels[static_cast<std::size_t>(s) + 1];
      transitions_.push_back(make_conv_bn("transition" + std::to_string(s), tap_ch, next_in, k, init_seed));
      in_ch = next_in;
    }
  }

  for (int s = 0; s < 3; ++s) {
    Parameter<float> sw, sb;
    sw.name = "skip" + std::to_string(s) + ".w";
    sw.tensor = Tensor<float>::zeros(Shape{cfg.skip_channels, cfg.stack_channels[static_cast<std::size_t>(s)], 1, 1, 1},
                                     true);
    gradnet::he_normal_fill(sw.tensor.values(),
                            static_cast<std::size_t>(cfg.stack_channels[static_cast<std::size_t>(s)]),
                            derive_seed(init_seed, sw.name));
    sb.name = "skip" + std::to_string(s) + ".b";
    sb.tensor = Tensor<float>::zeros(Shape{cfg.skip_channels, 1, 1, 1, 1}, true);
    skips_w_.push_back(std::move(sw));
    skips_b_.push_back(std::move(sb));
  }

  const int merged = cfg.skip_channels * 3;
  prior_.name = "prior";
  prior_.tensor = Tensor<float>::zeros(Shape{1, merged, cfg.prior_grid, cfg.prior_grid, cfg.prior_grid}, true);

  final_w_.name = "final.w";
  final_w_.tensor = Tensor<float>::zeros(Shape{cfg.num_classes, merged, k, k, k}, true);
  gradnet::he_normal_fill(final_w_.tensor.values(), static_cast<std::size_t>(merged) * k * k * k,
                          derive_seed(init_seed, final_w_.name));
  final_b_.name = "final.b";
  final_b_.tensor = Tensor<float>::zeros(Shape{cfg.num_classes, 1, 1, 1, 1}, true);
}

std::vector<Parameter<float>*> SegNetModel::parameters() {
  std::vector<Parameter<float>*> out;
  collect(out, stem_);
  for (auto& stack : stacks_)
    for (auto& layer : stack) collect(out, layer);
  for (auto& t : transitions_) collect(out, t);
  for (std::size_t s = 0; s < skips_w_.size(); ++s) {
    out.push_back(&skips_w_[s]);
    out.push_back(&skips_b_[s]);
  }
  if (cfg_.spatial_prior) out.push_back(&prior_);
  out.push_back(&final_w_);
  out.push_back(&final_b_);
  return out;
}

std::vector<const Parameter<float>*> SegNetModel::parameters() const {
  auto* self = const_cast<SegNetModel*>(this);
  std::vector<Parameter<float>*> mut = self->parameters();
  return {mut.begin(), mut.end()};
}

std::pair<Tensor<float>, FeatureTaps> SegNetModel::forward_with_taps(const Tensor<float>& x, bool training) {
  const Shape xs = x.shape();
  if (xs.c != 1) raise(Errc::ShapeMismatch, "segnet expects a single-channel input, got " + xs.str());
  const int pad = cfg_.kernel / 2;

  FeatureTaps taps;
  Tensor<float> cur = conv_bn_relu(stem_, x, 2, pad, training);
  for (int s = 0; s < 3; ++s) {
    std::vector<Tensor<float>> grown;
    Tensor<float> dense_in = cur;
    for (auto& layer : stacks_[static_cast<std::size_t>(s)]) {
      Tensor<float> out = conv_bn_relu(layer, dense_in, 1, pad, training);
      grown.push_back(out);
      if (grown.size() < stacks_[static_cast<std::size_t>(s)].size()) {
        std::vector<Tensor<float>> cat{dense_in, out};
        dense_in = gradnet::concat_c(cat);
      }
    }
    taps.taps[static_cast<std::size_t>(s)] = gradnet::concat_c(grown);
    if (s < 2) cur = conv_bn_relu(transitions_[static_cast<std::size_t>(s)], taps.taps[static_cast<std::size_t>(s)],
                                  2, pad, training);
  }

  // Merge the three skips at 1/2 scale, add the coarse prior, classify.
  const Shape half = taps.taps[0].shape();
  std::vector<Tensor<float>> skips;
  for (int s = 0; s < 3; ++s) {
    Tensor<float> sk = gradnet::conv1x1x1(taps.taps[static_cast<std::size_t>(s)], skips_w_[static_cast<std::size_t>(s)].tensor,
                                          skips_b_[static_cast<std::size_t>(s)].tensor);
    if (s > 0) sk = gradnet::resize_trilinear(sk, {half.d, half.h, half.w});
    skips.push_back(sk);
  }
  Tensor<float> merged = gradnet::concat_c(skips);
  if (cfg_.spatial_prior) {
    Tensor<float> prior_up = gradnet::resize_trilinear(prior_.tensor, {half.d, half.h, half.w});
    merged = gradnet::add(merged, prior_up);
  }
  Tensor<float> logits = gradnet::conv3d(merged, final_w_.tensor, final_b_.tensor, 1, pad);
  logits = gradnet::resize_trilinear(logits, {xs.d, xs.h, xs.w});
  return {logits, taps};
}

void freeze(SegNetModel& model) {
  model.frozen_ = true;
  for (auto* p : model.parameters()) gradnet::set_frozen(*p, true);
}

namespace {

std::vector<checkpoint::TensorRef> tensor_refs(SegNetModel& m) {
  std::vector<checkpoint::TensorRef> refs;
  for (auto* p : m.parameters())
    refs.push_back({p->name, p->tensor.shape(), p->frozen, false, &p->tensor.values()});
  auto add_bn = [&refs](const std::string& name, ConvBn& cb) {
    const int c = static_cast<int>(cb.bn.running_mean.size());
    refs.push_back({name + ".bn.running_mean", Shape{1, c, 1, 1, 1}, false, true, &cb.bn.running_mean});
    refs.push_back({name + ".bn.running_var", Shape{1, c, 1, 1, 1}, false, true, &cb.bn.running_var});
  };
  add_bn("stem", m.stem_);
  for (std::size_t s = 0; s < m.stacks_.size(); ++s)
    for (std::size_t l = 0; l < m.stacks_[s].size(); ++l)
      add_bn("stack" + std::to_string(s) + ".layer" + std::to_string(l), m.stacks_[s][l]);
  for (std::size_t t = 0; t < m.transitions_.size(); ++t) add_bn("transition" + std::to_string(t), m.transitions_[t]);
  return refs;
}

nlohmann::json config_json(const SegNetConfig& c) {
  return {{"stack_channels", {c.stack_channels[0], c.stack_channels[1], c.stack_channels[2]}},
          {"dense_layers_per_stack", c.dense_layers_per_stack},
          {"num_classes", c.num_classes},
          {"spatial_prior", c.spatial_prior},
          {"prior_grid", c.prior_grid},
          {"kernel", c.kernel},
          {"stem_channels", c.stem_channels},
          {"skip_channels", c.skip_channels}};
}

}  // namespace

void SegNetModel::save(const std::filesystem::path& path, long long optimizer_step) const {
  auto* self = const_cast<SegNetModel*>(this);
  nlohmann::json meta;
  meta["arch"] = "segnet";
  meta["config"] = config_json(cfg_);
  meta["optimizer_step"] = optimizer_step;
  meta["frozen"] = frozen_;
  checkpoint::save(path, meta, tensor_refs(*self));
}

void SegNetModel::load(const std::filesystem::path& path) {
  const nlohmann::json meta = checkpoint::load(path, tensor_refs(*this));
  if (meta.value("arch", "") != "segnet") raise(Errc::HeaderMismatch, path.string() + ": not a segnet checkpoint");
  if (meta.value("frozen", false)) freeze(*this);
}

Tensor<float> to_tensor(const volgrid::ScalarVolume& v) {
  const auto& d = v.dims();
  return Tensor<float>::from_values(Shape{1, 1, d.z, d.y, d.x}, v.values());
}

Tensor<float> to_tensor(const volgrid::MultiChannelVolume& v) {
  const auto& d = v.dims();
  return Tensor<float>::from_values(Shape{1, v.channels(), d.z, d.y, d.x}, v.values());
}

volgrid::MultiChannelVolume to_volume(const Tensor<float>& t, const volgrid::Spacing& spacing) {
  const Shape s = t.shape();
  if (s.n != 1) raise(Errc::ShapeMismatch, "to_volume: expected batch of 1, got " + s.str());
  return volgrid::MultiChannelVolume(s.c, volgrid::Dims{s.w, s.h, s.d}, spacing, t.values());
}

volgrid::MaskVolume predict_mask(SegNetModel& model, const volgrid::ScalarVolume& vol) {
  Tensor<float> x = to_tensor(vol);
  auto [logits, taps] = model.forward_with_taps(x, /*training=*/false);
  const Shape ls = logits.shape();
  const std::size_t spatial = ls.spatial();
  const float* lv = logits.values().data();
  std::vector<std::uint8_t> labels(spatial);
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
  return volgrid::MaskVolume(vol.dims(), vol.spacing_mm(), std::move(labels), model.config().num_classes);
}

std::vector<PretrainLogRow> pretrain(SegNetModel& model, const evalkit::DatasetManifest& phantoms,
                                     const PretrainConfig& cfg, std::uint64_t seed) {
  if (phantoms.records.empty()) raise(Errc::EmptyDataset, "pretrain: no phantoms");
  if (model.frozen()) raise(Errc::FrozenViolation, "pretrain: model is frozen");

  std::vector<PretrainLogRow> log;
  if (cfg.epochs <= 0) return log;

  struct Sample {
    Tensor<float> x;
    std::vector<int> labels;
  };
  std::vector<Sample> samples;
  for (const auto& rec : phantoms.records) {
    if (rec.mask_path.empty()) raise(Errc::EmptyDataset, "pretrain: scan " + rec.scan_id + " has no truth mask");
    const auto raw = volgrid::read_volume(rec.volume_path);
    const auto prepped = preproc::preprocess_scan(raw.channel(0), cfg.preproc);
    const auto truth = volgrid::read_mask(rec.mask_path);
    if (!(truth.dims() == prepped.dims()))
      raise(Errc::ShapeMismatch, "pretrain: mask grid differs from preprocessed grid for " + rec.scan_id);
    Sample s;
    s.x = to_tensor(prepped);
    s.labels.assign(truth.labels().begin(), truth.labels().end());
    samples.push_back(std::move(s));
  }

  auto params = model.parameters();
  auto adam = gradnet::AdamState<float>::init(params);
  std::mt19937_64 order_rng(derive_seed(seed, "pretrain-order"));
  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), order_rng);
    for (std::size_t oi : order) {
      Sample& s = samples[oi];
      auto [logits, taps] = model.forward_with_taps(s.x, /*training=*/true);
      auto loss = gradnet::softmax_cross_entropy(logits, s.labels);
      loss.backward();
      gradnet::adam_step(params, adam, static_cast<float>(cfg.lr));
      gradnet::zero_grads(params);
      log.push_back({epoch, step, static_cast<double>(loss.values()[0])});
      ++step;
    }
  }
  return log;
}

double dice(const volgrid::MaskVolume& pred, const volgrid::MaskVolume& truth, int label) {
  if (!(pred.dims() == truth.dims())) raise(Errc::ShapeMismatch, "dice: dims differ");
  std::size_t a = 0, b = 0, inter = 0;
  const auto& pv = pred.labels();
  const auto& tv = truth.labels();
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const bool in_a = pv[i] == label;
    const bool in_b = tv[i] == label;
    a += in_a;
    b += in_b;
    inter += in_a && in_b;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

}  // namespace fusenet::segnet
