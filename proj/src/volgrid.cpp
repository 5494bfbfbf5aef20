#include "fusenet/volgrid.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "fusenet/util.hpp"

namespace fusenet::volgrid {

namespace {

void check_dims(const Dims& d, const char* what) {
  if (d.x <= 0 || d.y <= 0 || d.z <= 0) raise(Errc::ShapeMismatch, std::string(what) + ": dims must be positive");
}

void check_spacing(const Spacing& s, const char* what) {
  if (!(s.x > 0.0 && s.y > 0.0 && s.z > 0.0))
    raise(Errc::ShapeMismatch, std::string(what) + ": spacing must be positive");
}

void check_finite(const std::vector<float>& v, const char* what) {
  for (float x : v) {
    if (std::isnan(x)) raise(Errc::ShapeMismatch, std::string(what) + ": NaN voxel value");
  }
}

}  // namespace

ScalarVolume::ScalarVolume(Dims dims, Spacing spacing_mm, std::vector<float> values)
    : dims_(dims), spacing_(spacing_mm), values_(std::move(values)) {
  check_dims(dims_, "ScalarVolume");
  check_spacing(spacing_, "ScalarVolume");
  if (values_.size() != dims_.count())
    raise(Errc::ShapeMismatch, "ScalarVolume: value count " + std::to_string(values_.size()) +
                                   " does not match dims product " + std::to_string(dims_.count()));
  check_finite(values_, "ScalarVolume");
}

ScalarVolume ScalarVolume::filled(Dims dims, Spacing spacing_mm, float value) {
  return ScalarVolume(dims, spacing_mm, std::vector<float>(dims.count(), value));
}

MultiChannelVolume::MultiChannelVolume(int channels, Dims dims, Spacing spacing_mm, std::vector<float> values)
    : channels_(channels), dims_(dims), spacing_(spacing_mm), values_(std::move(values)) {
  check_dims(dims_, "MultiChannelVolume");
  check_spacing(spacing_, "MultiChannelVolume");
  if (channels_ < 1) raise(Errc::ShapeMismatch, "MultiChannelVolume: channel count must be >= 1");
  if (values_.size() != dims_.count() * static_cast<std::size_t>(channels_))
    raise(Errc::ShapeMismatch, "MultiChannelVolume: value count does not match channels * dims");
  check_finite(values_, "MultiChannelVolume");
}

MultiChannelVolume MultiChannelVolume::from_channels(const std::vector<ScalarVolume>& channels) {
  if (channels.empty()) raise(Errc::ShapeMismatch, "from_channels: need at least one channel");
  const Dims d = channels.front().dims();
  const Spacing s = channels.front().spacing_mm();
  std::vector<float> values;
  values.reserve(d.count() * channels.size());
  for (const auto& ch : channels) {
    if (!(ch.dims() == d) || !(ch.spacing_mm() == s))
      raise(Errc::ShapeMismatch, "from_channels: channels disagree on dims or spacing");
    values.insert(values.end(), ch.values().begin(), ch.values().end());
  }
  return MultiChannelVolume(static_cast<int>(channels.size()), d, s, std::move(values));
}

MultiChannelVolume MultiChannelVolume::from_scalar(const ScalarVolume& v) {
  return MultiChannelVolume(1, v.dims(), v.spacing_mm(), v.values());
}

ScalarVolume MultiChannelVolume::channel(int c) const {
  if (c < 0 || c >= channels_) raise(Errc::ShapeMismatch, "channel index out of range");
  const std::size_t n = dims_.count();
  std::vector<float> v(values_.begin() + static_cast<std::ptrdiff_t>(c * n),
                       values_.begin() + static_cast<std::ptrdiff_t>((c + 1) * n));
  return ScalarVolume(dims_, spacing_, std::move(v));
}

MaskVolume::MaskVolume(Dims dims, Spacing spacing_mm, std::vector<std::uint8_t> labels, int label_count)
    : dims_(dims), spacing_(spacing_mm), labels_(std::move(labels)), label_count_(label_count) {
  check_dims(dims_, "MaskVolume");
  check_spacing(spacing_, "MaskVolume");
  if (label_count_ < 1) raise(Errc::BadLabel, "MaskVolume: label_count must be >= 1");
  if (labels_.size() != dims_.count()) raise(Errc::ShapeMismatch, "MaskVolume: label count does not match dims");
  for (std::uint8_t l : labels_) {
    if (l >= label_count_) raise(Errc::BadLabel, "MaskVolume: label " + std::to_string(l) + " outside declared set");
  }
}

MaskVolume MaskVolume::zeros(Dims dims, Spacing spacing_mm, int label_count) {
  return MaskVolume(dims, spacing_mm, std::vector<std::uint8_t>(dims.count(), 0), label_count);
}

namespace {

constexpr char kMagic[4] = {'V', 'G', 'R', '1'};

struct VgrHeader {
  Dims dims;
  Spacing spacing;
  int channels = 1;
  std::string dtype;
};

std::string encode_header(const VgrHeader& h) {
  nlohmann::json j;
  j["dims"] = {h.dims.x, h.dims.y, h.dims.z};
  j["spacing_mm"] = {h.spacing.x, h.spacing.y, h.spacing.z};
  j["channels"] = h.channels;
  j["dtype"] = h.dtype;
  return j.dump();
}

void append_u32le(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

// Reads magic + header, returns the JSON header and the payload offset.
VgrHeader parse_container(const std::string& bytes, const std::filesystem::path& path, std::size_t& payload_off) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    raise(Errc::BadMagic, path.string() + ": not a VGR1 container");
  std::uint32_t hlen = 0;
  std::memcpy(&hlen, bytes.data() + 4, 4);  // container is little-endian by definition
  if (bytes.size() < 8 + static_cast<std::size_t>(hlen))
    raise(Errc::HeaderMismatch, path.string() + ": truncated header");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.substr(8, hlen));
  } catch (const nlohmann::json::exception& e) {
    raise(Errc::HeaderMismatch, path.string() + ": bad JSON header: " + e.what());
  }
  VgrHeader h;
  try {
    h.dims = Dims{j.at("dims").at(0).get<int>(), j.at("dims").at(1).get<int>(), j.at("dims").at(2).get<int>()};
    h.spacing = Spacing{j.at("spacing_mm").at(0).get<double>(), j.at("spacing_mm").at(1).get<double>(),
                        j.at("spacing_mm").at(2).get<double>()};
    h.channels = j.at("channels").get<int>();
    h.dtype = j.at("dtype").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    raise(Errc::HeaderMismatch, path.string() + ": header missing fields: " + e.what());
  }
  payload_off = 8 + hlen;
  return h;
}

}  // namespace

MultiChannelVolume read_volume(const std::filesystem::path& path) {
  const std::string bytes = read_file_bytes(path);
  std::size_t off = 0;
  const VgrHeader h = parse_container(bytes, path, off);
  if (h.dtype != "f32") raise(Errc::UnsupportedDtype, path.string() + ": dtype '" + h.dtype + "', expected f32");
  const std::size_t expected = h.dims.count() * static_cast<std::size_t>(h.channels) * sizeof(float);
  if (bytes.size() - off != expected)
    raise(Errc::HeaderMismatch, path.string() + ": payload is " + std::to_string(bytes.size() - off) +
                                    " bytes, header implies " + std::to_string(expected));
  std::vector<float> values(h.dims.count() * static_cast<std::size_t>(h.channels));
  std::memcpy(values.data(), bytes.data() + off, expected);
  return MultiChannelVolume(h.channels, h.dims, h.spacing, std::move(values));
}

void write_volume(const MultiChannelVolume& vol, const std::filesystem::path& path) {
  VgrHeader h{vol.dims(), vol.spacing_mm(), vol.channels(), "f32"};
  const std::string header = encode_header(h);
  std::string out;
  out.reserve(8 + header.size() + vol.values().size() * sizeof(float));
  out.append(kMagic, 4);
  append_u32le(out, static_cast<std::uint32_t>(header.size()));
  out += header;
  out.append(reinterpret_cast<const char*>(vol.values().data()), vol.values().size() * sizeof(float));
  write_file_bytes(path, out);
}

MaskVolume read_mask(const std::filesystem::path& path) {
  const std::string bytes = read_file_bytes(path);
  std::size_t off = 0;
  const VgrHeader h = parse_container(bytes, path, off);
  if (h.dtype != "u8") raise(Errc::UnsupportedDtype, path.string() + ": dtype '" + h.dtype + "', expected u8");
  if (h.channels != 1) raise(Errc::HeaderMismatch, path.string() + ": masks are single-channel");
  const std::size_t expected = h.dims.count();
  if (bytes.size() - off != expected) raise(Errc::HeaderMismatch, path.string() + ": mask payload length mismatch");
  std::vector<std::uint8_t> labels(expected);
  std::memcpy(labels.data(), bytes.data() + off, expected);
  int max_label = 0;
  for (std::uint8_t l : labels) max_label = std::max(max_label, static_cast<int>(l));
  return MaskVolume(h.dims, h.spacing, std::move(labels), max_label + 1);
}

void write_mask(const MaskVolume& mask, const std::filesystem::path& path) {
  VgrHeader h{mask.dims(), mask.spacing_mm(), 1, "u8"};
  const std::string header = encode_header(h);
  std::string out;
  out.reserve(8 + header.size() + mask.labels().size());
  out.append(kMagic, 4);
  append_u32le(out, static_cast<std::uint32_t>(header.size()));
  out += header;
  out.append(reinterpret_cast<const char*>(mask.labels().data()), mask.labels().size());
  write_file_bytes(path, out);
}

MultiChannelVolume concat_channels(const MultiChannelVolume& a, const MultiChannelVolume& b) {
  if (b.channels() == 0) return a;
  if (!(a.dims() == b.dims()) || !(a.spacing_mm() == b.spacing_mm()))
    raise(Errc::ShapeMismatch, "concat_channels: dims/spacing disagree");
  std::vector<float> values;
  values.reserve(a.values().size() + b.values().size());
  values.insert(values.end(), a.values().begin(), a.values().end());
  values.insert(values.end(), b.values().begin(), b.values().end());
  return MultiChannelVolume(a.channels() + b.channels(), a.dims(), a.spacing_mm(), std::move(values));
}

ScalarVolume pad_to(const ScalarVolume& vol, Dims target, float fill) {
  const Dims d = vol.dims();
  if (target.x < d.x || target.y < d.y || target.z < d.z)
    raise(Errc::TargetSmaller, "pad_to: target smaller than volume on some axis");
  if (target == d) return vol;
  const int lx = (target.x - d.x) / 2;
  const int ly = (target.y - d.y) / 2;
  const int lz = (target.z - d.z) / 2;
  std::vector<float> out(target.count(), fill);
  for (int z = 0; z < d.z; ++z)
    for (int y = 0; y < d.y; ++y) {
      const float* src = vol.values().data() + voxel_index(d, 0, y, z);
      float* dst = out.data() + voxel_index(target, lx, y + ly, z + lz);
      std::memcpy(dst, src, static_cast<std::size_t>(d.x) * sizeof(float));
    }
  return ScalarVolume(target, vol.spacing_mm(), std::move(out));
}

ScalarVolume crop_center(const ScalarVolume& vol, Dims target) {
  const Dims d = vol.dims();
  if (target.x > d.x || target.y > d.y || target.z > d.z)
    raise(Errc::TargetSmaller, "crop_center: target larger than volume on some axis");
  if (target == d) return vol;
  const int lx = (d.x - target.x) / 2;
  const int ly = (d.y - target.y) / 2;
  const int lz = (d.z - target.z) / 2;
  std::vector<float> out(target.count());
  for (int z = 0; z < target.z; ++z)
    for (int y = 0; y < target.y; ++y) {
      const float* src = vol.values().data() + voxel_index(d, lx, y + ly, z + lz);
      float* dst = out.data() + voxel_index(target, 0, y, z);
      std::memcpy(dst, src, static_cast<std::size_t>(target.x) * sizeof(float));
    }
  return ScalarVolume(target, vol.spacing_mm(), std::move(out));
}

MaskVolume binarize_mask(const MaskVolume& mask, const std::set<int>& include_labels) {
  if (include_labels.empty()) raise(Errc::EmptyMask, "binarize_mask: include_labels is empty");
  std::vector<std::uint8_t> out(mask.labels().size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = include_labels.count(static_cast<int>(mask.labels()[i])) ? 1 : 0;
  return MaskVolume(mask.dims(), mask.spacing_mm(), std::move(out), 2);
}

}  // namespace fusenet::volgrid
