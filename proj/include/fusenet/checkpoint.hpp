#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "fusenet/gradnet.hpp"

namespace fusenet::checkpoint {

// One serializable tensor: either a trainable parameter or a plain buffer
// (batch-norm running stats and the like).
struct TensorRef {
  std::string name;
  gradnet::Shape shape;
  bool frozen = false;
  bool is_buffer = false;
  std::vector<float>* data = nullptr;
};

// Container layout mirrors VGR: magic "CKP1", u32 LE header length, JSON
// header (metadata plus the ordered tensor directory), then f32 payloads in
// directory order. Same inputs always produce the same bytes.
void save(const std::filesystem::path& path, const nlohmann::json& meta, const std::vector<TensorRef>& tensors);

// Loads payloads into the referenced vectors. Directory must match the given
// refs exactly (names, order, shapes); metadata is returned.
nlohmann::json load(const std::filesystem::path& path, const std::vector<TensorRef>& tensors);

// Reads only the metadata block.
nlohmann::json peek_meta(const std::filesystem::path& path);

}  // namespace fusenet::checkpoint
