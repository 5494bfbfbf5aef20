#include "fusenet/checkpoint.hpp"

#include <cstring>

#include "fusenet/util.hpp"

namespace fusenet::checkpoint {

namespace {

constexpr char kMagic[4] = {'C', 'K', 'P', '1'};

nlohmann::json shape_json(const gradnet::Shape& s) { return nlohmann::json{s.n, s.c, s.d, s.h, s.w}; }

gradnet::Shape shape_from_json(const nlohmann::json& j) {
  return gradnet::Shape{j.at(0).get<int>(), j.at(1).get<int>(), j.at(2).get<int>(), j.at(3).get<int>(),
                        j.at(4).get<int>()};
}

}  // namespace

void save(const std::filesystem::path& path, const nlohmann::json& meta, const std::vector<TensorRef>& tensors) {
  nlohmann::json dir = nlohmann::json::array();
  std::size_t payload_bytes = 0;
  for (const auto& t : tensors) {
    if (!t.data) raise(Errc::IoFailure, "checkpoint save: null tensor ref " + t.name);
    if (t.data->size() != t.shape.numel())
      raise(Errc::ShapeMismatch, "checkpoint save: " + t.name + " data does not match shape " + t.shape.str());
    dir.push_back({{"name", t.name},
                   {"shape", shape_json(t.shape)},
                   {"frozen", t.frozen},
                   {"kind", t.is_buffer ? "buffer" : "param"}});
    payload_bytes += t.data->size() * sizeof(float);
  }
  nlohmann::json header;
  header["meta"] = meta;
  header["tensors"] = dir;
  const std::string hs = header.dump();

  std::string out;
  out.reserve(8 + hs.size() + payload_bytes);
  out.append(kMagic, 4);
  const std::uint32_t hlen = static_cast<std::uint32_t>(hs.size());
  out.push_back(static_cast<char>(hlen & 0xff));
  out.push_back(static_cast<char>((hlen >> 8) & 0xff));
  out.push_back(static_cast<char>((hlen >> 16) & 0xff));
  out.push_back(static_cast<char>((hlen >> 24) & 0xff));
  out += hs;
  for (const auto& t : tensors)
    out.append(reinterpret_cast<const char*>(t.data->data()), t.data->size() * sizeof(float));
  write_file_bytes(path, out);
}

namespace {

nlohmann::json parse_header(const std::string& bytes, const std::filesystem::path& path, std::size_t& payload_off) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    raise(Errc::BadMagic, path.string() + ": not a CKP1 checkpoint");
  std::uint32_t hlen = 0;
  std::memcpy(&hlen, bytes.data() + 4, 4);
  if (bytes.size() < 8 + static_cast<std::size_t>(hlen))
    raise(Errc::HeaderMismatch, path.string() + ": truncated checkpoint header");
  payload_off = 8 + hlen;
  try {
    return nlohmann::json::parse(bytes.substr(8, hlen));
  } catch (const nlohmann::json::exception& e) {
    raise(Errc::HeaderMismatch, path.string() + ": bad checkpoint header: " + e.what());
  }
}

}  // namespace

nlohmann::json load(const std::filesystem::path& path, const std::vector<TensorRef>& tensors) {
  const std::string bytes = read_file_bytes(path);
  std::size_t off = 0;
  const nlohmann::json header = parse_header(bytes, path, off);
  const auto& dir = header.at("tensors");
  if (dir.size() != tensors.size())
    raise(Errc::HeaderMismatch, path.string() + ": checkpoint lists " + std::to_string(dir.size()) +
                                    " tensors, model has " + std::to_string(tensors.size()));
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& entry = dir.at(i);
    if (entry.at("name").get<std::string>() != tensors[i].name)
      raise(Errc::HeaderMismatch, path.string() + ": tensor " + std::to_string(i) + " is '" +
                                      entry.at("name").get<std::string>() + "', expected '" + tensors[i].name + "'");
    if (!(shape_from_json(entry.at("shape")) == tensors[i].shape))
      raise(Errc::HeaderMismatch, path.string() + ": shape mismatch for " + tensors[i].name);
    const std::size_t n = tensors[i].shape.numel() * sizeof(float);
    if (off + n > bytes.size()) raise(Errc::HeaderMismatch, path.string() + ": truncated payload");
    std::memcpy(tensors[i].data->data(), bytes.data() + off, n);
    off += n;
  }
  if (off != bytes.size()) raise(Errc::HeaderMismatch, path.string() + ": trailing bytes after payload");
  return header.at("meta");
}

nlohmann::json peek_meta(const std::filesystem::path& path) {
  const std::string bytes = read_file_bytes(path);
  std::size_t off = 0;
  return parse_header(bytes, path, off).at("meta");
}

}  // namespace fusenet::checkpoint
