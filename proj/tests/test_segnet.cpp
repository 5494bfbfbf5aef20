#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "fusenet/segnet.hpp"
#include "fusenet/synthlab.hpp"
#include "fusenet/util.hpp"

using namespace fusenet;
using namespace fusenet::segnet;
using gradnet::Shape;

namespace {

std::filesystem::path fresh_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("fusenet_segnet_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("tap shapes follow the scale arithmetic") {
  SegNetConfig cfg;
  SegNetModel model(cfg, 5);

  SUBCASE("64^3 input gives taps at 32/16/8 with 12/24/24 channels") {
    auto x = Tensor<float>::zeros(Shape{1, 1, 64, 64, 64});
    auto [logits, taps] = model.forward_with_taps(x, false);
    CHECK(taps.taps[0].shape() == Shape{1, 12, 32, 32, 32});
    CHECK(taps.taps[1].shape() == Shape{1, 24, 16, 16, 16});
    CHECK(taps.taps[2].shape() == Shape{1, 24, 8, 8, 8});
    CHECK(logits.shape() == Shape{1, 4, 64, 64, 64});
    CHECK(cfg.tap_total() == 60);
  }
  SUBCASE("odd dims use ceil division") {
    auto x = Tensor<float>::zeros(Shape{1, 1, 18, 20, 22});
    auto [logits, taps] = model.forward_with_taps(x, false);
    CHECK(taps.taps[0].shape() == Shape{1, 12, 9, 10, 11});
    CHECK(taps.taps[1].shape() == Shape{1, 24, 5, 5, 6});
    CHECK(taps.taps[2].shape() == Shape{1, 24, 3, 3, 3});
    CHECK(logits.shape() == Shape{1, 4, 18, 20, 22});
  }
}

TEST_CASE("frozen eval forward is deterministic and grad-free") {
  SegNetModel model(SegNetConfig{}, 5);
  freeze(model);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::vector<float> v(16 * 16 * 16);
  for (auto& x : v) x = u(rng);
  auto x1 = Tensor<float>::from_values(Shape{1, 1, 16, 16, 16}, v);
  auto x2 = Tensor<float>::from_values(Shape{1, 1, 16, 16, 16}, v);
  auto [l1, t1] = model.forward_with_taps(x1, false);
  auto [l2, t2] = model.forward_with_taps(x2, false);
  CHECK(l1.values() == l2.values());
  for (int s = 0; s < 3; ++s) CHECK(t1.taps[static_cast<std::size_t>(s)].values() == t2.taps[static_cast<std::size_t>(s)].values());
  CHECK_FALSE(l1.requires_grad());
}

TEST_CASE("freeze is idempotent and survives the save/load cycle") {
  SegNetModel model(SegNetConfig{}, 5);
  freeze(model);
  freeze(model);
  for (auto* p : model.parameters()) {
    CHECK(p->frozen);
    CHECK_FALSE(p->tensor.requires_grad());
  }
  const auto dir = fresh_dir("freeze");
  model.save(dir / "m.ckpt");
  SegNetModel other(SegNetConfig{}, 99);
  other.load(dir / "m.ckpt");
  CHECK(other.frozen());
  // Bitwise identical parameters after load.
  auto pa = model.parameters();
  auto pb = other.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->tensor.values() == pb[i]->tensor.values());
}

TEST_CASE("checkpoint save is byte-deterministic") {
  SegNetModel model(SegNetConfig{}, 5);
  const auto dir = fresh_dir("ckpt");
  model.save(dir / "a.ckpt");
  model.save(dir / "b.ckpt");
  CHECK(read_file_bytes(dir / "a.ckpt") == read_file_bytes(dir / "b.ckpt"));
}

TEST_CASE("dice") {
  // |A| = 100 (voxels 0..99), |B| = 100 (voxels 20..119), overlap 80.
  const volgrid::Dims d{10, 10, 2};
  std::vector<std::uint8_t> a(d.count(), 0), b(d.count(), 0);
  for (int i = 0; i < 100; ++i) a[static_cast<std::size_t>(i)] = 1;
  for (int i = 20; i < 120; ++i) b[static_cast<std::size_t>(i)] = 1;

  const volgrid::MaskVolume ma(d, {1, 1, 1}, a, 2);
  const volgrid::MaskVolume mb(d, {1, 1, 1}, b, 2);
  CHECK(dice(ma, ma, 1) == 1.0);
  CHECK(dice(ma, mb, 1) == doctest::Approx(0.8));

  std::vector<std::uint8_t> c(d.count(), 0);
  c[0] = 1;
  std::vector<std::uint8_t> e(d.count(), 0);
  e[5] = 1;
  CHECK(dice(volgrid::MaskVolume(d, {1, 1, 1}, c, 2), volgrid::MaskVolume(d, {1, 1, 1}, e, 2), 1) == 0.0);
  // Both empty for a label: defined as 1.
  CHECK(dice(volgrid::MaskVolume(d, {1, 1, 1}, c, 3), volgrid::MaskVolume(d, {1, 1, 1}, e, 3), 2) == 1.0);
}

TEST_CASE("predict_mask breaks ties toward the lower class index") {
  // A model with all-zero final conv produces identical logits everywhere.
  SegNetConfig cfg;
  SegNetModel model(cfg, 5);
  std::fill(model.final_w_.tensor.values().begin(), model.final_w_.tensor.values().end(), 0.0f);
  std::fill(model.final_b_.tensor.values().begin(), model.final_b_.tensor.values().end(), 0.0f);
  const auto vol = volgrid::ScalarVolume::filled({8, 8, 8}, {2, 2, 2}, 0.5f);
  const auto mask = predict_mask(model, vol);
  for (auto l : mask.labels()) CHECK(l == 0);
}

TEST_CASE("pretrain: zero epochs is a no-op; loss falls on a tiny run; rerun is bit-identical") {
  const auto dir = fresh_dir("pretrain");
  synthlab::DatasetSpec dspec;
  dspec.n_scans = 4;
  dspec.diseased_fraction = 0.0;
  dspec.phantom = synthlab::PhantomSpec::scaled_to({16, 16, 16}, {2, 2, 2});
  const auto manifest = synthlab::generate_dataset(dspec, 5, dir);

  PretrainConfig pc;
  pc.preproc.target_dims = {16, 16, 16};
  pc.epochs = 0;

  SegNetModel model(SegNetConfig{}, 5);
  const auto before = model.stem_.w.tensor.values();
  auto log0 = pretrain(model, manifest, pc, 1);
  CHECK(log0.empty());
  CHECK(model.stem_.w.tensor.values() == before);

  pc.epochs = 4;
  auto log1 = pretrain(model, manifest, pc, 1);
  REQUIRE(log1.size() == 16);
  double first = 0.0, last = 0.0;
  for (int i = 0; i < 4; ++i) {
    first += log1[static_cast<std::size_t>(i)].loss;
    last += log1[log1.size() - 1 - static_cast<std::size_t>(i)].loss;
  }
  CHECK(last < first);

  // Same seed, same data -> identical checkpoint bytes.
  SegNetModel m1(SegNetConfig{}, 5), m2(SegNetConfig{}, 5);
  PretrainConfig pc2 = pc;
  pc2.epochs = 2;
  pretrain(m1, manifest, pc2, 7);
  pretrain(m2, manifest, pc2, 7);
  m1.save(dir / "m1.ckpt");
  m2.save(dir / "m2.ckpt");
  CHECK(read_file_bytes(dir / "m1.ckpt") == read_file_bytes(dir / "m2.ckpt"));
}
