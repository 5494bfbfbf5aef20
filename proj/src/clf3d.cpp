#include "fusenet/clf3d.hpp"

#include <cmath>
#include <sstream>

#include <json.hpp>

#include "fusenet/checkpoint.hpp"
#include "fusenet/util.hpp"

namespace fusenet::clf3d {

using gradnet::Shape;

Mode mode_from_name(const std::string& name) {
  if (name == "baseline") return Mode::baseline;
  if (name == "stfa") return Mode::stfa;
  if (name == "dyfa") return Mode::dyfa;
  raise(Errc::BadConfig, "unknown mode '" + name + "'");
}

namespace {

segnet::ConvBn make_conv_bn(const std::string& name, int c_in, int c_out, int k, std::uint64_t seed) {
  segnet::ConvBn cb;
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

void collect(std::vector<Parameter<float>*>& out, segnet::ConvBn& cb) {
  out.push_back(&cb.w);
  out.push_back(&cb.b);
  out.push_back(&cb.bn_scale);
  out.push_back(&cb.bn_shift);
}

}  // namespace

ClassifierModel::ClassifierModel(const ClassifierConfig& cfg, std::uint64_t init_seed) : cfg_(cfg) {
  if (cfg.resolutions < 1 || cfg.blocks_per_resolution < 1 || cfg.base_channels < 1 || cfg.input_channels < 1 ||
      cfg.num_classes < 2)
    raise(Errc::BadConfig, "ClassifierConfig: counts must be positive and num_classes >= 2");
  if (cfg.stem_stride != 1 && cfg.stem_stride != 2) raise(Errc::BadConfig, "ClassifierConfig: stem stride 1 or 2");

  stem_ = make_conv_bn("stem", cfg.input_channels, cfg.channels_at(0), 3, init_seed);

  int in_ch = cfg.channels_at(0);
  for (int s = 0; s < cfg.resolutions; ++s) {
    const int out_ch = cfg.channels_at(s);
    std::vector<ResidualBlock> blocks;
    for (int b = 0; b < cfg.blocks_per_resolution; ++b) {
      const std::string base = "stage" + std::to_string(s) + ".block" + std::to_string(b);
      ResidualBlock blk;
      blk.stride = (s > 0 && b == 0) ? 2 : 1;
      blk.conv1 = make_conv_bn(base + ".conv1", in_ch, out_ch, 3, init_seed);
      blk.conv2 = make_conv_bn(base + ".conv2", out_ch, out_ch, 3, init_seed);
      blk.has_projection = blk.stride != 1 || in_ch != out_ch;
      if (blk.has_projection) blk.projection = make_conv_bn(base + ".proj", in_ch, out_ch, 1, init_seed);
      blocks.push_back(std::move(blk));
      in_ch = out_ch;
    }
    stages_.push_back(std::move(blocks));
  }

  fc_w_.name = "fc.w";
  fc_w_.tensor = Tensor<float>::zeros(Shape{cfg.num_classes, in_ch, 1, 1, 1}, true);
  gradnet::he_normal_fill(fc_w_.tensor.values(), static_cast<std::size_t>(in_ch), derive_seed(init_seed, fc_w_.name));
  fc_b_.name = "fc.b";
  fc_b_.tensor = Tensor<float>::zeros(Shape{cfg.num_classes, 1, 1, 1, 1}, true);
}

ClassifierModel build_classifier(const ClassifierConfig& cfg, std::uint64_t init_seed) {
  return ClassifierModel(cfg, init_seed);
}

std::vector<Parameter<float>*> ClassifierModel::parameters() {
  std::vector<Parameter<float>*> out;
  collect(out, stem_);
  for (auto& stage : stages_)
    for (auto& blk : stage) {
      collect(out, blk.conv1);
      collect(out, blk.conv2);
      if (blk.has_projection) collect(out, blk.projection);
    }
  out.push_back(&fc_w_);
  out.push_back(&fc_b_);
  return out;
}

Tensor<float> ClassifierModel::forward(const Tensor<float>& x, bool training) {
  if (x.shape().c != cfg_.input_channels)
    raise(Errc::ShapeMismatch, "classifier expects " + std::to_string(cfg_.input_channels) + " channels, got " +
                                   x.shape().str());
  Tensor<float> cur = gradnet::conv3d(x, stem_.w.tensor, stem_.b.tensor, cfg_.stem_stride, 1);
  cur = gradnet::batch_norm(cur, stem_.bn_scale.tensor, stem_.bn_shift.tensor, stem_.bn, training);
  cur = gradnet::relu(cur);

  for (auto& stage : stages_)
    for (auto& blk : stage) {
      Tensor<float> y = gradnet::conv3d(cur, blk.conv1.w.tensor, blk.conv1.b.tensor, blk.stride, 1);
      y = gradnet::batch_norm(y, blk.conv1.bn_scale.tensor, blk.conv1.bn_shift.tensor, blk.conv1.bn, training);
      y = gradnet::relu(y);
      y = gradnet::conv3d(y, blk.conv2.w.tensor, blk.conv2.b.tensor, 1, 1);
      y = gradnet::batch_norm(y, blk.conv2.bn_scale.tensor, blk.conv2.bn_shift.tensor, blk.conv2.bn, training);
      Tensor<float> skip = cur;
      if (blk.has_projection) {
        skip = gradnet::conv3d(cur, blk.projection.w.tensor, blk.projection.b.tensor, blk.stride, 0);
        skip = gradnet::batch_norm(skip, blk.projection.bn_scale.tensor, blk.projection.bn_shift.tensor,
                                   blk.projection.bn, training);
      }
      cur = gradnet::relu(gradnet::add(y, skip));
    }

  cur = gradnet::global_avg_pool(cur);
  return gradnet::fully_connected(cur, fc_w_.tensor, fc_b_.tensor);
}

double forward_probability(ClassifierModel& model, const Tensor<float>& patch) {
  Tensor<float> logits = model.forward(patch, /*training=*/false);
  if (logits.shape().n != 1 || logits.shape().c != 2)
    raise(Errc::ShapeMismatch, "forward_probability: expected (1,2) logits");
  const double a = logits.values()[0];
  const double b = logits.values()[1];
  const double m = std::max(a, b);
  const double ea = std::exp(a - m), eb = std::exp(b - m);
  return eb / (ea + eb);
}

namespace {

std::vector<checkpoint::TensorRef> tensor_refs(ClassifierModel& m) {
  std::vector<checkpoint::TensorRef> refs;
  for (auto* p : m.parameters())
    refs.push_back({p->name, p->tensor.shape(), p->frozen, false, &p->tensor.values()});
  auto add_bn = [&refs](const std::string& name, segnet::ConvBn& cb) {
    const int c = static_cast<int>(cb.bn.running_mean.size());
    refs.push_back({name + ".bn.running_mean", Shape{1, c, 1, 1, 1}, false, true, &cb.bn.running_mean});
    refs.push_back({name + ".bn.running_var", Shape{1, c, 1, 1, 1}, false, true, &cb.bn.running_var});
  };
  add_bn("stem", m.stem_);
  for (std::size_t s = 0; s < m.stages_.size(); ++s)
    for (std::size_t b = 0; b < m.stages_[s].size(); ++b) {
      const std::string base = "stage" + std::to_string(s) + ".block" + std::to_string(b);
      add_bn(base + ".conv1", m.stages_[s][b].conv1);
      add_bn(base + ".conv2", m.stages_[s][b].conv2);
      if (m.stages_[s][b].has_projection) add_bn(base + ".proj", m.stages_[s][b].projection);
    }
  return refs;
}

}  // namespace

void ClassifierModel::save(const std::filesystem::path& path, long long optimizer_step) const {
  auto* self = const_cast<ClassifierModel*>(this);
  nlohmann::json meta;
  meta["arch"] = "clf3d";
  meta["config"] = {{"blocks_per_resolution", cfg_.blocks_per_resolution},
                    {"resolutions", cfg_.resolutions},
                    {"base_channels", cfg_.base_channels},
                    {"max_channels", cfg_.max_channels},
                    {"input_channels", cfg_.input_channels},
                    {"num_classes", cfg_.num_classes},
                    {"stem_stride", cfg_.stem_stride}};
  meta["optimizer_step"] = optimizer_step;
  checkpoint::save(path, meta, tensor_refs(*self));
}

void ClassifierModel::load(const std::filesystem::path& path) {
  const nlohmann::json meta = checkpoint::load(path, tensor_refs(*this));
  if (meta.value("arch", "") != "clf3d") raise(Errc::HeaderMismatch, path.string() + ": not a classifier checkpoint");
}

void write_train_log_csv(const std::vector<TrainLogRow>& log, const std::filesystem::path& path) {
  std::ostringstream out;
  out << "step,epoch,lr,loss\n";
  out.precision(12);
  for (const auto& row : log) out << row.step << "," << row.epoch << "," << row.lr << "," << row.loss << "\n";
  write_file_bytes(path, out.str());
}

void write_predictions_csv(const std::vector<ScanPrediction>& preds, const std::filesystem::path& path) {
  std::ostringstream out;
  out << "scan_id,scan_probability,predicted_class,patch_probabilities\n";
  out.precision(12);
  for (const auto& p : preds) {
    out << p.scan_id << "," << p.scan_probability << "," << p.predicted_class << ",";
    for (std::size_t i = 0; i < p.patch_probabilities.size(); ++i) {
      if (i) out << ";";
      out << p.patch_probabilities[i];
    }
    out << "\n";
  }
  write_file_bytes(path, out.str());
}

std::vector<ScanPrediction> read_predictions_csv(const std::filesystem::path& path) {
  const std::string bytes = read_file_bytes(path);
  std::istringstream in(bytes);
  std::string line;
  if (!std::getline(in, line)) raise(Errc::MissingArtifacts, path.string() + ": empty predictions file");
  std::vector<ScanPrediction> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cols = split_csv_line(line);
    if (cols.size() != 4) raise(Errc::HeaderMismatch, path.string() + ": bad prediction row");
    ScanPrediction p;
    p.scan_id = cols[0];
    p.scan_probability = std::stod(cols[1]);
    p.predicted_class = std::stoi(cols[2]);
    std::istringstream probs(cols[3]);
    std::string tok;
    while (std::getline(probs, tok, ';'))
      if (!tok.empty()) p.patch_probabilities.push_back(std::stod(tok));
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace fusenet::clf3d
