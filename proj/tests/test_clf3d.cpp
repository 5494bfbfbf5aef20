#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "fusenet/clf3d.hpp"
#include "fusenet/synthlab.hpp"
#include "fusenet/util.hpp"

using namespace fusenet;
using namespace fusenet::clf3d;
using gradnet::Shape;

namespace {

std::filesystem::path fresh_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("fusenet_clf_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// Tiny 16^3 pipeline shared by the integration-style cases.
struct TinyPipeline {
  std::filesystem::path dir;
  evalkit::DatasetManifest manifest;
  segnet::SegNetModel backbone{segnet::SegNetConfig{}, 1};
  fusion::SelectionReport selection;
  preproc::PreprocConfig preproc;
  patcher::PatchSpec patch;
  std::filesystem::path backbone_ckpt;

  explicit TinyPipeline(const std::string& name, int n_scans = 8) : dir(fresh_dir(name)) {
    synthlab::DatasetSpec dspec;
    dspec.n_scans = n_scans;
    dspec.diseased_fraction = 0.5;
    dspec.style = synthlab::LesionStyle::feature_favored;
    dspec.phantom = synthlab::PhantomSpec::scaled_to({16, 16, 16}, {2, 2, 2});
    manifest = synthlab::generate_dataset(dspec, 77, dir / "data");

    preproc.target_dims = {16, 16, 16};
    patch.patch_dims = {16, 16, 16};

    segnet::PretrainConfig pc;
    pc.epochs = 3;
    pc.preproc = preproc;
    segnet::pretrain(backbone, manifest, pc, 5);
    segnet::freeze(backbone);
    backbone_ckpt = dir / "segnet.ckpt";
    backbone.save(backbone_ckpt);

    // Selection from the first scan's muted features.
    const auto cached0 =
        load_or_compute_cached_scan(manifest.records[0], backbone, full_selection(), preproc, dir / "seed_cache");
    selection = full_selection();
    selection.k = 13;
    const auto raw = volgrid::read_volume(manifest.records[0].volume_path);
    const auto ct = preproc::preprocess_scan(raw.channel(0), preproc);
    auto [logits, taps] = backbone.forward_with_taps(segnet::to_tensor(ct), false);
    const auto feats = fusion::upsample_taps_to_reference(taps, ct.dims(), ct.spacing_mm());
    const auto truth = volgrid::read_mask(manifest.records[0].mask_path);
    const auto lungs = volgrid::binarize_mask(truth, {2, 3});
    const auto body = volgrid::binarize_mask(truth, {1, 2, 3});
    const auto muted = fusion::mute_outside_body(feats, body);
    selection = fusion::select_maps(muted, lungs, body, 13);
  }

  static fusion::SelectionReport full_selection() {
    fusion::SelectionReport r;
    r.k = 13;
    r.scores.assign(60, 0.0);
    for (int c = 0; c < 13; ++c) r.selected.push_back({c, 0, c});
    return r;
  }

  TrainConfig train_config(Mode mode, int epochs, std::uint64_t seed) const {
    TrainConfig cfg;
    cfg.epochs = epochs;
    cfg.batch_size = 4;
    cfg.seed = seed;
    cfg.mode = mode;
    cfg.preproc = preproc;
    cfg.patch = patch;
    cfg.cache_dir = dir / "cache";
    return cfg;
  }

  ClassifierConfig clf_config(Mode mode) const {
    ClassifierConfig cfg;
    cfg.base_channels = 4;
    cfg.max_channels = 32;
    cfg.input_channels = mode == Mode::baseline ? 1 : 2;
    cfg.patch = patch;
    return cfg;
  }
};

}  // namespace

TEST_CASE("classifier structure") {
  ClassifierConfig cfg;
  SUBCASE("default config builds exactly 10 residual blocks across 5 resolutions") {
    ClassifierModel model(cfg, 3);
    int blocks = 0;
    for (const auto& stage : model.stages_) blocks += static_cast<int>(stage.size());
    CHECK(blocks == 10);
    CHECK(model.stages_.size() == 5);
    CHECK(cfg.total_blocks() == 10);
  }
  SUBCASE("logit shape is (N,2) for a 32^3 dual-channel patch") {
    cfg.base_channels = 4;
    ClassifierModel model(cfg, 3);
    auto x = gradnet::Tensor<float>::full(Shape{1, 2, 32, 32, 32}, 0.1f);
    CHECK(model.forward(x, false).shape() == Shape{1, 2, 1, 1, 1});
  }
  SUBCASE("baseline configuration accepts single-channel patches") {
    cfg.base_channels = 4;
    cfg.input_channels = 1;
    ClassifierModel model(cfg, 3);
    auto x = gradnet::Tensor<float>::full(Shape{2, 1, 16, 16, 16}, 0.1f);
    CHECK(model.forward(x, false).shape() == Shape{2, 2, 1, 1, 1});
    auto wrong = gradnet::Tensor<float>::full(Shape{2, 2, 16, 16, 16}, 0.1f);
    CHECK_THROWS_AS(model.forward(wrong, false), Error);
  }
  SUBCASE("parameter count is deterministic from the config") {
    ClassifierModel a(cfg, 3), b(cfg, 4);
    auto pa = a.parameters();
    auto pb = b.parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
      CHECK(pa[i]->name == pb[i]->name);
      CHECK(pa[i]->tensor.shape() == pb[i]->tensor.shape());
    }
  }
  SUBCASE("bad config rejected") {
    cfg.num_classes = 1;
    CHECK_THROWS_WITH_AS(ClassifierModel(cfg, 1), doctest::Contains("BadConfig"), Error);
  }
}

TEST_CASE("forward_probability") {
  ClassifierConfig cfg;
  cfg.base_channels = 4;
  cfg.input_channels = 1;
  ClassifierModel model(cfg, 9);
  // Zeroed head makes the logits equal.
  std::fill(model.fc_w_.tensor.values().begin(), model.fc_w_.tensor.values().end(), 0.0f);
  auto x = gradnet::Tensor<float>::full(Shape{1, 1, 16, 16, 16}, 0.3f);
  CHECK(forward_probability(model, x) == doctest::Approx(0.5));

  // Raising the diseased-class bias strictly raises the probability,
  // and the two class probabilities always sum to one.
  double prev = 0.0;
  for (float t : {-2.0f, -0.5f, 0.0f, 0.5f, 2.0f}) {
    model.fc_b_.tensor.values()[1] = t;
    const double p = forward_probability(model, x);
    CHECK(p > prev);
    prev = p;
    const double q = 1.0 / (1.0 + std::exp(t));  // class-0 probability for logits (0, t)
    CHECK(p + q == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("training pipeline on a tiny synthetic task") {
  TinyPipeline pipe("train");

  SUBCASE("zero epochs leaves the checkpoint at initialization") {
    auto cfg = pipe.train_config(Mode::stfa, 0, 3);
    ClassifierModel model(pipe.clf_config(Mode::stfa), 3);
    const auto before = model.stem_.w.tensor.values();
    auto log = train(model, pipe.manifest, pipe.backbone, pipe.selection, cfg, nullptr);
    CHECK(log.empty());
    CHECK(model.stem_.w.tensor.values() == before);
  }

  SUBCASE("segnet checkpoint is bit-identical after a full training run") {
    auto cfg = pipe.train_config(Mode::dyfa, 2, 3);
    ClassifierModel model(pipe.clf_config(Mode::dyfa), 3);
    fusion::DyFAAggregator agg(13);
    auto log = train(model, pipe.manifest, pipe.backbone, pipe.selection, cfg, &agg);
    CHECK_FALSE(log.empty());
    const auto after = pipe.dir / "segnet_after.ckpt";
    pipe.backbone.save(after);
    CHECK(read_file_bytes(pipe.backbone_ckpt) == read_file_bytes(after));
  }

  SUBCASE("dyfa training moves the aggregator off 1/k") {
    auto cfg = pipe.train_config(Mode::dyfa, 2, 4);
    ClassifierModel model(pipe.clf_config(Mode::dyfa), 4);
    fusion::DyFAAggregator agg(13);
    train(model, pipe.manifest, pipe.backbone, pipe.selection, cfg, &agg);
    bool moved = false;
    for (float w : agg.weight.tensor.values()) moved = moved || std::abs(w - 1.0f / 13.0f) > 1e-5f;
    CHECK(moved);
  }

  SUBCASE("identical seeds give identical checkpoints; different seeds differ") {
    auto cfg = pipe.train_config(Mode::stfa, 2, 11);
    ClassifierModel m1(pipe.clf_config(Mode::stfa), 5);
    ClassifierModel m2(pipe.clf_config(Mode::stfa), 5);
    train(m1, pipe.manifest, pipe.backbone, pipe.selection, cfg, nullptr);
    train(m2, pipe.manifest, pipe.backbone, pipe.selection, cfg, nullptr);
    m1.save(pipe.dir / "m1.ckpt");
    m2.save(pipe.dir / "m2.ckpt");
    CHECK(read_file_bytes(pipe.dir / "m1.ckpt") == read_file_bytes(pipe.dir / "m2.ckpt"));
  }

  SUBCASE("training rejects mismatched mode/channels and unfrozen backbones") {
    auto cfg = pipe.train_config(Mode::baseline, 1, 1);
    ClassifierModel two_ch(pipe.clf_config(Mode::stfa), 3);
    CHECK_THROWS_WITH_AS(train(two_ch, pipe.manifest, pipe.backbone, pipe.selection, cfg, nullptr),
                         doctest::Contains("BadConfig"), Error);

    segnet::SegNetModel fresh(segnet::SegNetConfig{}, 2);  // not frozen
    ClassifierModel model(pipe.clf_config(Mode::baseline), 3);
    CHECK_THROWS_WITH_AS(train(model, pipe.manifest, fresh, pipe.selection, cfg, nullptr),
                         doctest::Contains("FrozenViolation"), Error);

    evalkit::DatasetManifest empty;
    CHECK_THROWS_WITH_AS(train(model, empty, pipe.backbone, pipe.selection, cfg, nullptr),
                         doctest::Contains("EmptyDataset"), Error);
  }
}

TEST_CASE("loss decreases over the first steps of a learnable task") {
  TinyPipeline pipe("loss", 12);
  auto cfg = pipe.train_config(Mode::stfa, 5, 21);
  cfg.batch_size = 12;  // full-batch: the same batch every step
  ClassifierModel model(pipe.clf_config(Mode::stfa), 21);
  const auto log = train(model, pipe.manifest, pipe.backbone, pipe.selection, cfg, nullptr);
  REQUIRE(log.size() == 5);
  CHECK(log.back().loss < log.front().loss);
}

TEST_CASE("dyfa end-to-end gradient flow matches finite differences") {
  TinyPipeline pipe("fd", 4);
  // Stages with spatial size 1 normalize over batch variance alone, which is
  // far too curved for float finite differences; three resolutions keep every
  // stage at >= 2^3 while exercising the identical dyfa route.
  ClassifierConfig probe_cfg = pipe.clf_config(Mode::dyfa);
  probe_cfg.resolutions = 3;
  ClassifierModel model(probe_cfg, 8);
  fusion::DyFAAggregator agg(13);

  // Assemble one fixed batch through the dyfa path.
  std::vector<CachedScan> cached;
  for (const auto& rec : pipe.manifest.records)
    cached.push_back(load_or_compute_cached_scan(rec, pipe.backbone, pipe.selection, pipe.preproc, pipe.dir / "fd_cache"));

  auto batch_loss = [&](bool want_grad) {
    std::vector<gradnet::Tensor<float>> inputs;
    std::vector<int> labels;
    for (std::size_t i = 0; i < cached.size(); ++i) {
      const auto center = patcher::sample_centers(cached[i].predicted_mask, pipe.patch.guide_labels, 1, 42 + i)[0];
      const auto origin = patcher::patch_box_origin(cached[i].ct.dims(), center, pipe.patch.patch_dims);
      auto selected_t = segnet::to_tensor(cached[i].selected);
      auto agg_full = fusion::dyfa_forward(agg, selected_t);
      auto agg_patch = gradnet::slice_dhw(agg_full, {origin.z, origin.y, origin.x},
                                          {pipe.patch.patch_dims.z, pipe.patch.patch_dims.y, pipe.patch.patch_dims.x});
      auto ct_patch = patcher::extract_patch(volgrid::MultiChannelVolume::from_scalar(cached[i].ct), center,
                                             pipe.patch.patch_dims);
      std::vector<gradnet::Tensor<float>> chans{segnet::to_tensor(ct_patch), agg_patch};
      inputs.push_back(gradnet::concat_c(chans));
      labels.push_back(pipe.manifest.records[i].normal() ? 0 : 1);
    }
    auto x = gradnet::stack_n(inputs);
    auto logits = model.forward(x, true);
    auto loss = gradnet::softmax_cross_entropy(logits, labels);
    if (want_grad) loss.backward();
    return static_cast<double>(loss.values()[0]);
  };

  batch_loss(true);
  REQUIRE(agg.weight.tensor.has_grad());
  const int probe = 4;
  const double analytic = agg.weight.tensor.grad()[probe];
  agg.weight.tensor.zero_grad();

  // Batch-norm stages with spatial size 1 have tiny batch variance, which
  // makes the loss sharply curved in any weight; the step must stay small.
  const float h = 1e-3f;
  agg.weight.tensor.values()[probe] += h;
  const double up = batch_loss(false);
  agg.weight.tensor.values()[probe] -= 2 * h;
  const double down = batch_loss(false);
  agg.weight.tensor.values()[probe] += h;
  const double numeric = (up - down) / (2.0 * h);
  const double rel = std::abs(analytic - numeric) / std::max(std::abs(analytic) + std::abs(numeric), 1e-3);
  INFO("analytic " << analytic << " numeric " << numeric);
  CHECK(rel < 1e-2);
}

TEST_CASE("dyfa chain passes 64-bit finite differences end to end") {
  // selected -> 1x1x1 aggregation -> slice -> concat with CT -> conv/bn/relu
  // -> pool -> fc -> cross-entropy, all in double, aggregator weight probed.
  using DTensor = gradnet::Tensor<double>;
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  auto fill = [&](std::size_t n) {
    std::vector<double> v(n);
    for (auto& x : v) x = u(rng);
    return v;
  };
  const auto sel_vals = fill(2 * 3 * 6 * 6 * 6);
  const auto ct_vals = fill(2 * 1 * 4 * 4 * 4);
  const auto conv_w = fill(4 * 2 * 3 * 3 * 3);
  const auto fc_w = fill(2 * 4);

  auto agg_w = DTensor::from_values(gradnet::Shape{1, 3, 1, 1, 1}, {0.4, 0.3, 0.3}, true);
  auto agg_b = DTensor::zeros(gradnet::Shape{1, 1, 1, 1, 1}, true);

  auto loss_fn = [&](bool grad) {
    auto sel = DTensor::from_values(gradnet::Shape{2, 3, 6, 6, 6}, sel_vals);
    auto agg_full = gradnet::conv1x1x1(sel, agg_w, agg_b);
    auto agg_patch = gradnet::slice_dhw(agg_full, {1, 1, 1}, {4, 4, 4});
    auto ct = DTensor::from_values(gradnet::Shape{2, 1, 4, 4, 4}, ct_vals);
    std::vector<DTensor> chans{ct, agg_patch};
    auto x = gradnet::concat_c(chans);
    auto w = DTensor::from_values(gradnet::Shape{4, 2, 3, 3, 3}, conv_w);
    auto b = DTensor::zeros(gradnet::Shape{4, 1, 1, 1, 1});
    auto scale = DTensor::full(gradnet::Shape{1, 4, 1, 1, 1}, 1.0);
    auto shift = DTensor::zeros(gradnet::Shape{1, 4, 1, 1, 1});
    auto st = gradnet::BatchNormState<double>::init(4);
    auto y = gradnet::relu(gradnet::batch_norm(gradnet::conv3d(x, w, b, 2, 1), scale, shift, st, true));
    auto pooled = gradnet::global_avg_pool(y);
    auto fw = DTensor::from_values(gradnet::Shape{2, 4, 1, 1, 1}, fc_w);
    auto fb = DTensor::zeros(gradnet::Shape{2, 1, 1, 1, 1});
    auto logits = gradnet::fully_connected(pooled, fw, fb);
    auto loss = gradnet::softmax_cross_entropy(logits, {0, 1});
    if (grad) loss.backward();
    return loss.values()[0];
  };

  loss_fn(true);
  REQUIRE(agg_w.has_grad());
  for (int probe = 0; probe < 3; ++probe) {
    const double analytic = agg_w.grad()[probe];
    const double h = 1e-4;
    agg_w.values()[static_cast<std::size_t>(probe)] += h;
    const double up = loss_fn(false);
    agg_w.values()[static_cast<std::size_t>(probe)] -= 2 * h;
    const double down = loss_fn(false);
    agg_w.values()[static_cast<std::size_t>(probe)] += h;
    const double numeric = (up - down) / (2.0 * h);
    const double rel = std::abs(analytic - numeric) / std::max(std::abs(analytic) + std::abs(numeric), 1e-3);
    INFO("probe " << probe << ": analytic " << analytic << " numeric " << numeric);
    CHECK(rel < 1e-4);
  }
}

TEST_CASE("infer_scan: mean probability, class call, reproducibility") {
  TinyPipeline pipe("infer", 6);
  ClassifierModel model(pipe.clf_config(Mode::stfa), 13);
  auto cfg = pipe.train_config(Mode::stfa, 1, 2);
  train(model, pipe.manifest, pipe.backbone, pipe.selection, cfg, nullptr);

  const auto& rec = pipe.manifest.records[0];
  const auto a = infer_scan(model, rec, pipe.backbone, pipe.selection, Mode::stfa, nullptr, pipe.preproc, pipe.patch,
                            cfg.cache_dir);
  const auto b = infer_scan(model, rec, pipe.backbone, pipe.selection, Mode::stfa, nullptr, pipe.preproc, pipe.patch,
                            cfg.cache_dir);
  REQUIRE(a.patch_probabilities.size() == 6);
  double mean = 0.0;
  for (double p : a.patch_probabilities) {
    CHECK(p >= 0.0);
    CHECK(p <= 1.0);
    mean += p;
  }
  mean /= 6.0;
  CHECK(std::abs(a.scan_probability - mean) <= 1e-6);
  CHECK(a.predicted_class == (a.scan_probability >= 0.5 ? 1 : 0));
  CHECK(a.scan_probability == b.scan_probability);
  CHECK(a.patch_probabilities == b.patch_probabilities);

  SUBCASE("predictions csv roundtrip") {
    write_predictions_csv({a, b}, pipe.dir / "preds.csv");
    const auto back = read_predictions_csv(pipe.dir / "preds.csv");
    REQUIRE(back.size() == 2);
    CHECK(back[0].scan_id == a.scan_id);
    CHECK(back[0].scan_probability == doctest::Approx(a.scan_probability).epsilon(1e-9));
    CHECK(back[0].patch_probabilities.size() == 6);
  }
}
