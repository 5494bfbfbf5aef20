#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "fusenet/clf3d.hpp"
#include "fusenet/evalkit.hpp"
#include "fusenet/segnet.hpp"
#include "fusenet/synthlab.hpp"

namespace fusenet::cli {

// Everything a run needs, resolved from preset + config file + flags, and
// written back next to the outputs so runs stay reproducible.
struct RunConfig {
  std::string preset = "desk";
  std::uint64_t seed = 0;

  preproc::PreprocConfig preproc;
  segnet::SegNetConfig segnet_cfg;
  segnet::PretrainConfig pretrain;
  clf3d::ClassifierConfig classifier;
  clf3d::TrainConfig train_cfg;
  patcher::PatchSpec patch;
  synthlab::DatasetSpec synth;
  evalkit::SplitFractions fractions;

  int selection_k = 13;
  int selection_scans = 8;  // train scans whose scores get averaged
};

// desk: 32^3 grids, reduced channels, short schedule. paper: the full-size
// configuration from the source setup (112^3, base 16, 60 epochs).
RunConfig preset_config(const std::string& name);

nlohmann::json to_json(const RunConfig& cfg);
void apply_json(RunConfig& cfg, const nlohmann::json& j);  // partial overrides allowed

RunConfig load_config_file(const std::filesystem::path& path, const std::string& preset);
void write_resolved_config(const RunConfig& cfg, const std::filesystem::path& out_dir);

// Provenance: content hashes of the inputs a verb consumed.
void write_provenance(const std::filesystem::path& out_dir,
                      const std::vector<std::filesystem::path>& inputs);

}  // namespace fusenet::cli
