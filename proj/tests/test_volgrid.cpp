#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <random>

#include "fusenet/util.hpp"
#include "fusenet/volgrid.hpp"

using namespace fusenet;
using namespace fusenet::volgrid;

namespace {

std::filesystem::path temp_dir() {
  auto dir = std::filesystem::temp_directory_path() / "fusenet_volgrid_test";
  std::filesystem::create_directories(dir);
  return dir;
}

MultiChannelVolume random_volume(int channels, Dims d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  std::vector<float> v(d.count() * static_cast<std::size_t>(channels));
  for (auto& x : v) x = u(rng);
  return MultiChannelVolume(channels, d, Spacing{2, 2, 2}, std::move(v));
}

}  // namespace

TEST_CASE("write/read roundtrip is bitwise for several channel counts") {
  const auto dir = temp_dir();
  for (int channels : {1, 2, 13, 60}) {
    const Dims d{5, 4, 3};
    const auto vol = random_volume(channels, d, 100 + static_cast<std::uint64_t>(channels));
    const auto path = dir / ("rt_" + std::to_string(channels) + ".vgr");
    write_volume(vol, path);
    const auto back = read_volume(path);
    CHECK(back.channels() == channels);
    CHECK(back.dims() == d);
    CHECK(back.spacing_mm() == vol.spacing_mm());
    CHECK(back.values() == vol.values());  // exact bytes
  }
}

TEST_CASE("constant 3x3x3 volume roundtrips identically") {
  const auto dir = temp_dir();
  const auto vol = MultiChannelVolume::from_scalar(ScalarVolume::filled({3, 3, 3}, {1, 1, 1}, 0.5f));
  write_volume(vol, dir / "const.vgr");
  const auto back = read_volume(dir / "const.vgr");
  CHECK(back.values() == vol.values());
}

TEST_CASE("writes are byte-deterministic") {
  const auto dir = temp_dir();
  const auto vol = random_volume(2, {4, 4, 4}, 7);
  write_volume(vol, dir / "a.vgr");
  write_volume(vol, dir / "b.vgr");
  CHECK(read_file_bytes(dir / "a.vgr") == read_file_bytes(dir / "b.vgr"));
}

TEST_CASE("payload size and channel order follow the container spec") {
  const auto dir = temp_dir();
  SUBCASE("single channel 112^3 payload is dims * 4 bytes after the header") {
    // Values all zero keep this fast; only the byte budget matters here.
    const Dims d{112, 112, 112};
    const auto vol = MultiChannelVolume(1, d, {2, 2, 2}, std::vector<float>(d.count(), 0.0f));
    const auto path = dir / "sz.vgr";
    write_volume(vol, path);
    const std::string bytes = read_file_bytes(path);
    std::uint32_t hlen = 0;
    std::memcpy(&hlen, bytes.data() + 4, 4);
    CHECK(bytes.size() - 8 - hlen == d.count() * 4);
  }
  SUBCASE("channel 0 payload precedes channel 1") {
    const Dims d{2, 2, 2};
    std::vector<float> v(d.count() * 2);
    for (std::size_t i = 0; i < d.count(); ++i) v[i] = 1.0f;
    for (std::size_t i = d.count(); i < v.size(); ++i) v[i] = 2.0f;
    const auto path = dir / "order.vgr";
    write_volume(MultiChannelVolume(2, d, {1, 1, 1}, v), path);
    const auto back = read_volume(path);
    CHECK(back.at(0, 0, 0, 0) == 1.0f);
    CHECK(back.at(1, 0, 0, 0) == 2.0f);
  }
}

TEST_CASE("container errors") {
  const auto dir = temp_dir();
  SUBCASE("wrong magic") {
    write_file_bytes(dir / "bad.vgr", "XXXX garbage");
    CHECK_THROWS_WITH_AS(read_volume(dir / "bad.vgr"), doctest::Contains("BadMagic"), Error);
  }
  SUBCASE("payload shorter than header promises") {
    const auto vol = random_volume(2, {3, 3, 3}, 1);
    const auto path = dir / "short.vgr";
    write_volume(vol, path);
    std::string bytes = read_file_bytes(path);
    bytes.resize(bytes.size() - 3 * 3 * 3 * 4);  // drop one channel
    write_file_bytes(path, bytes);
    CHECK_THROWS_WITH_AS(read_volume(path), doctest::Contains("HeaderMismatch"), Error);
  }
  SUBCASE("unknown dtype") {
    // Hand-build a container with dtype f64.
    std::string header = R"({"channels":1,"dims":[1,1,1],"dtype":"f64","spacing_mm":[1.0,1.0,1.0]})";
    std::string bytes = "VGR1";
    const std::uint32_t hlen = static_cast<std::uint32_t>(header.size());
    bytes.push_back(static_cast<char>(hlen & 0xff));
    bytes.push_back(static_cast<char>((hlen >> 8) & 0xff));
    bytes.push_back(static_cast<char>((hlen >> 16) & 0xff));
    bytes.push_back(static_cast<char>((hlen >> 24) & 0xff));
    bytes += header;
    bytes += std::string(8, '\0');
    write_file_bytes(dir / "dtype.vgr", bytes);
    CHECK_THROWS_WITH_AS(read_volume(dir / "dtype.vgr"), doctest::Contains("UnsupportedDtype"), Error);
  }
}

TEST_CASE("concat_channels keeps order and validates shape") {
  const auto a = random_volume(1, {4, 4, 4}, 2);
  const auto b = random_volume(1, {4, 4, 4}, 3);
  const auto ab = concat_channels(a, b);
  CHECK(ab.channels() == 2);
  CHECK(ab.channel(0).values() == a.channel(0).values());
  CHECK(ab.channel(1).values() == b.channel(0).values());

  const auto c = random_volume(1, {4, 4, 4}, 4);
  // Associativity over channel lists.
  const auto left = concat_channels(concat_channels(a, b), c);
  const auto right = concat_channels(a, concat_channels(b, c));
  CHECK(left.values() == right.values());

  const auto small = random_volume(1, {2, 2, 2}, 5);
  CHECK_THROWS_AS(concat_channels(a, small), Error);
}

TEST_CASE("pad_to centers content, fills, and round-trips with crop_center") {
  SUBCASE("100x90x112 to 112^3 splits slack (6,6)/(11,11)/(0,0)") {
    const Dims d{100, 90, 112};
    std::vector<float> v(d.count());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(i % 97);
    const ScalarVolume vol(d, {2, 2, 2}, v);
    const auto padded = pad_to(vol, {112, 112, 112}, 0.0f);
    CHECK(padded.dims() == Dims{112, 112, 112});
    CHECK(padded.at(5, 11, 0) == 0.0f);     // just outside the low corner
    CHECK(padded.at(6, 11, 0) == vol.at(0, 0, 0));
    CHECK(padded.at(6 + 99, 11 + 89, 111) == vol.at(99, 89, 111));
    CHECK(padded.at(106, 101, 111) == 0.0f);
    const auto back = crop_center(padded, d);
    CHECK(back.values() == vol.values());
  }
  SUBCASE("identity when target equals dims") {
    const auto vol = ScalarVolume::filled({7, 7, 7}, {1, 1, 1}, 3.0f);
    CHECK(pad_to(vol, {7, 7, 7}, 0.0f).values() == vol.values());
  }
  SUBCASE("smaller target rejected") {
    const auto vol = ScalarVolume::filled({112, 112, 112}, {1, 1, 1}, 0.0f);
    CHECK_THROWS_WITH_AS(pad_to(vol, {64, 64, 64}, 0.0f), doctest::Contains("TargetSmaller"), Error);
  }
  SUBCASE("pad then center-crop is identity for random shapes") {
    std::mt19937_64 rng(11);
    for (int rep = 0; rep < 20; ++rep) {
      const Dims d{static_cast<int>(2 + uniform_index(rng, 6)), static_cast<int>(2 + uniform_index(rng, 6)),
                   static_cast<int>(2 + uniform_index(rng, 6))};
      const Dims t{d.x + static_cast<int>(uniform_index(rng, 5)), d.y + static_cast<int>(uniform_index(rng, 5)),
                   d.z + static_cast<int>(uniform_index(rng, 5))};
      const auto vol = random_volume(1, d, rng()).channel(0);
      const auto round = crop_center(pad_to(vol, t, -1.0f), d);
      CHECK(round.values() == vol.values());
    }
  }
}

TEST_CASE("binarize_mask unions the requested labels") {
  const Dims d{3, 3, 3};
  std::vector<std::uint8_t> labels(d.count(), 0);
  labels[0] = 1;
  labels[1] = 2;
  labels[2] = 3;
  const MaskVolume mask(d, {1, 1, 1}, labels, 4);

  const auto all = binarize_mask(mask, {1, 2, 3});
  CHECK(static_cast<int>(all.labels()[0]) == 1);
  CHECK(static_cast<int>(all.labels()[1]) == 1);
  CHECK(static_cast<int>(all.labels()[2]) == 1);
  CHECK(static_cast<int>(all.labels()[3]) == 0);

  const auto none = binarize_mask(mask, {99});
  for (auto l : none.labels()) CHECK(l == 0);

  const auto lungs = binarize_mask(mask, {2, 3});
  CHECK(static_cast<int>(lungs.labels()[0]) == 0);
  CHECK(static_cast<int>(lungs.labels()[1]) == 1);
  CHECK(static_cast<int>(lungs.labels()[2]) == 1);
}

TEST_CASE("volume constructors reject NaN and shape mismatches") {
  std::vector<float> v(8, 0.0f);
  v[3] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(ScalarVolume({2, 2, 2}, {1, 1, 1}, v), Error);
  CHECK_THROWS_AS(ScalarVolume({2, 2, 2}, {1, 1, 1}, std::vector<float>(7, 0.0f)), Error);
  CHECK_THROWS_AS(MaskVolume({2, 2, 2}, {1, 1, 1}, std::vector<std::uint8_t>(8, 9), 4), Error);
}
