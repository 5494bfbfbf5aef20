#include "fusenet/runconfig.hpp"

#include "fusenet/util.hpp"

namespace fusenet::cli {

RunConfig preset_config(const std::string& name) {
  RunConfig cfg;
  cfg.preset = name;
  if (name == "desk") {
    cfg.preproc.target_dims = {32, 32, 32};
    cfg.patch.patch_dims = {32, 32, 32};
    cfg.classifier.base_channels = 8;
    cfg.classifier.patch = cfg.patch;
    cfg.train_cfg.epochs = 12;
    cfg.train_cfg.batch_size = 8;
    cfg.pretrain.epochs = 30;
    cfg.synth.phantom = synthlab::PhantomSpec::scaled_to({32, 32, 32}, {2.0, 2.0, 2.0});
  } else if (name == "paper") {
    cfg.preproc.target_dims = {112, 112, 112};
    cfg.patch.patch_dims = {112, 112, 112};
    cfg.classifier.base_channels = 16;
    cfg.classifier.patch = cfg.patch;
    cfg.train_cfg.epochs = 60;
    cfg.train_cfg.batch_size = 16;
    cfg.pretrain.epochs = 30;
    cfg.synth.phantom = synthlab::PhantomSpec::scaled_to({112, 112, 112}, {2.0, 2.0, 2.0});
  } else {
    raise(Errc::UsageError, "unknown preset '" + name + "' (expected desk or paper)");
  }
  cfg.pretrain.preproc = cfg.preproc;
  cfg.train_cfg.preproc = cfg.preproc;
  cfg.train_cfg.patch = cfg.patch;
  return cfg;
}

namespace {

nlohmann::json dims_json(const volgrid::Dims& d) { return {d.x, d.y, d.z}; }
volgrid::Dims dims_from(const nlohmann::json& j) { return {j.at(0).get<int>(), j.at(1).get<int>(), j.at(2).get<int>()}; }
nlohmann::json spacing_json(const volgrid::Spacing& s) { return {s.x, s.y, s.z}; }
volgrid::Spacing spacing_from(const nlohmann::json& j) {
  return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()};
}

}  // namespace

nlohmann::json to_json(const RunConfig& cfg) {
  nlohmann::json j;
  j["preset"] = cfg.preset;
  j["seed"] = cfg.seed;
  j["preproc"] = {{"target_spacing_mm", spacing_json(cfg.preproc.target_spacing_mm)},
                  {"hu_window", {cfg.preproc.hu_window.low, cfg.preproc.hu_window.high}},
                  {"target_dims", dims_json(cfg.preproc.target_dims)},
                  {"interpolation",
                   cfg.preproc.interpolation == preproc::Interpolation::trilinear ? "trilinear" : "cubic_bspline"}};
  j["segnet"] = {{"stack_channels", {cfg.segnet_cfg.stack_channels[0], cfg.segnet_cfg.stack_channels[1],
                                     cfg.segnet_cfg.stack_channels[2]}},
                 {"dense_layers_per_stack", cfg.segnet_cfg.dense_layers_per_stack},
                 {"num_classes", cfg.segnet_cfg.num_classes},
                 {"spatial_prior", cfg.segnet_cfg.spatial_prior},
                 {"prior_grid", cfg.segnet_cfg.prior_grid}};
  j["pretrain"] = {{"epochs", cfg.pretrain.epochs}, {"lr", cfg.pretrain.lr}};
  j["classifier"] = {{"blocks_per_resolution", cfg.classifier.blocks_per_resolution},
                     {"resolutions", cfg.classifier.resolutions},
                     {"base_channels", cfg.classifier.base_channels},
                     {"max_channels", cfg.classifier.max_channels},
                     {"num_classes", cfg.classifier.num_classes},
                     {"stem_stride", cfg.classifier.stem_stride}};
  j["train"] = {{"epochs", cfg.train_cfg.epochs},
                {"batch_size", cfg.train_cfg.batch_size},
                {"lr_max", cfg.train_cfg.lr.lr_max},
                {"lr_min", cfg.train_cfg.lr.lr_min},
                {"cycle_len_steps", cfg.train_cfg.lr.cycle_len_steps},
                {"decay_per_cycle", cfg.train_cfg.lr.decay_per_cycle},
                {"patches_per_scan_per_epoch", cfg.train_cfg.patches_per_scan_per_epoch}};
  j["patch"] = {{"patch_dims", dims_json(cfg.patch.patch_dims)},
                {"channels", cfg.patch.channels},
                {"guide_labels", std::vector<int>(cfg.patch.guide_labels.begin(), cfg.patch.guide_labels.end())}};
  j["synth"] = {{"n_scans", cfg.synth.n_scans},
                {"diseased_fraction", cfg.synth.diseased_fraction},
                {"multi_disease_rate", cfg.synth.multi_disease_rate},
                {"style", synthlab::lesion_style_name(cfg.synth.style)},
                {"dims", dims_json(cfg.synth.phantom.dims)},
                {"spacing_mm", spacing_json(cfg.synth.phantom.spacing_mm)},
                {"noise_sigma_hu", cfg.synth.phantom.noise_sigma_hu},
                {"texture_amplitude_hu", cfg.synth.texture_amplitude_hu},
                {"geometry_jitter", cfg.synth.geometry_jitter}};
  j["split"] = {{"train", cfg.fractions.train}, {"val", cfg.fractions.val}, {"test", cfg.fractions.test}};
  j["selection"] = {{"k", cfg.selection_k}, {"scans", cfg.selection_scans}};
  return j;
}

void apply_json(RunConfig& cfg, const nlohmann::json& j) {
  if (j.contains("preset")) cfg.preset = j["preset"].get<std::string>();
  if (j.contains("seed")) cfg.seed = j["seed"].get<std::uint64_t>();
  if (j.contains("preproc")) {
    const auto& p = j["preproc"];
    if (p.contains("target_spacing_mm")) cfg.preproc.target_spacing_mm = spacing_from(p["target_spacing_mm"]);
    if (p.contains("hu_window")) {
      cfg.preproc.hu_window.low = p["hu_window"].at(0).get<double>();
      cfg.preproc.hu_window.high = p["hu_window"].at(1).get<double>();
    }
    if (p.contains("target_dims")) cfg.preproc.target_dims = dims_from(p["target_dims"]);
    if (p.contains("interpolation"))
      cfg.preproc.interpolation = p["interpolation"].get<std::string>() == "trilinear"
                                      ? preproc::Interpolation::trilinear
                                      : preproc::Interpolation::cubic_bspline;
  }
  if (j.contains("segnet")) {
    const auto& s = j["segnet"];
    if (s.contains("stack_channels"))
      for (int i = 0; i < 3; ++i)
        cfg.segnet_cfg.stack_channels[static_cast<std::size_t>(i)] = s["stack_channels"].at(i).get<int>();
    if (s.contains("dense_layers_per_stack")) cfg.segnet_cfg.dense_layers_per_stack = s["dense_layers_per_stack"];
    if (s.contains("num_classes")) cfg.segnet_cfg.num_classes = s["num_classes"];
    if (s.contains("spatial_prior")) cfg.segnet_cfg.spatial_prior = s["spatial_prior"];
    if (s.contains("prior_grid")) cfg.segnet_cfg.prior_grid = s["prior_grid"];
  }
  if (j.contains("pretrain")) {
    if (j["pretrain"].contains("epochs")) cfg.pretrain.epochs = j["pretrain"]["epochs"];
    if (j["pretrain"].contains("lr")) cfg.pretrain.lr = j["pretrain"]["lr"];
  }
  if (j.contains("classifier")) {
    const auto& c = j["classifier"];
    if (c.contains("blocks_per_resolution")) cfg.classifier.blocks_per_resolution = c["blocks_per_resolution"];
    if (c.contains("resolutions")) cfg.classifier.resolutions = c["resolutions"];
    if (c.contains("base_channels")) cfg.classifier.base_channels = c["base_channels"];
    if (c.contains("max_channels")) cfg.classifier.max_channels = c["max_channels"];
    if (c.contains("num_classes")) cfg.classifier.num_classes = c["num_classes"];
    if (c.contains("stem_stride")) cfg.classifier.stem_stride = c["stem_stride"];
  }
  if (j.contains("train")) {
    const auto& t = j["train"];
    if (t.contains("epochs")) cfg.train_cfg.epochs = t["epochs"];
    if (t.contains("batch_size")) cfg.train_cfg.batch_size = t["batch_size"];
    if (t.contains("lr_max")) cfg.train_cfg.lr.lr_max = t["lr_max"];
    if (t.contains("lr_min")) cfg.train_cfg.lr.lr_min = t["lr_min"];
    if (t.contains("cycle_len_steps")) cfg.train_cfg.lr.cycle_len_steps = t["cycle_len_steps"];
    if (t.contains("decay_per_cycle")) cfg.train_cfg.lr.decay_per_cycle = t["decay_per_cycle"];
    if (t.contains("patches_per_scan_per_epoch"))
      cfg.train_cfg.patches_per_scan_per_epoch = t["patches_per_scan_per_epoch"];
  }
  if (j.contains("patch")) {
    const auto& p = j["patch"];
    if (p.contains("patch_dims")) cfg.patch.patch_dims = dims_from(p["patch_dims"]);
    if (p.contains("channels")) cfg.patch.channels = p["channels"];
    if (p.contains("guide_labels")) {
      cfg.patch.guide_labels.clear();
      for (int l : p["guide_labels"]) cfg.patch.guide_labels.insert(l);
    }
  }
  if (j.contains("synth")) {
    const auto& s = j["synth"];
    if (s.contains("n_scans")) cfg.synth.n_scans = s["n_scans"];
    if (s.contains("diseased_fraction")) cfg.synth.diseased_fraction = s["diseased_fraction"];
    if (s.contains("multi_disease_rate")) cfg.synth.multi_disease_rate = s["multi_disease_rate"];
    if (s.contains("style")) cfg.synth.style = synthlab::lesion_style_from_name(s["style"]);
    if (s.contains("dims") || s.contains("spacing_mm")) {
      const auto dims = s.contains("dims") ? dims_from(s["dims"]) : cfg.synth.phantom.dims;
      const auto spacing = s.contains("spacing_mm") ? spacing_from(s["spacing_mm"]) : cfg.synth.phantom.spacing_mm;
      cfg.synth.phantom = synthlab::PhantomSpec::scaled_to(dims, spacing);
    }
    if (s.contains("noise_sigma_hu")) cfg.synth.phantom.noise_sigma_hu = s["noise_sigma_hu"];
    if (s.contains("texture_amplitude_hu")) cfg.synth.texture_amplitude_hu = s["texture_amplitude_hu"];
    if (s.contains("geometry_jitter")) cfg.synth.geometry_jitter = s["geometry_jitter"];
  }
  if (j.contains("split")) {
    const auto& s = j["split"];
    if (s.contains("train")) cfg.fractions.train = s["train"];
    if (s.contains("val")) cfg.fractions.val = s["val"];
    if (s.contains("test")) cfg.fractions.test = s["test"];
  }
  if (j.contains("selection")) {
    if (j["selection"].contains("k")) cfg.selection_k = j["selection"]["k"];
    if (j["selection"].contains("scans")) cfg.selection_scans = j["selection"]["scans"];
  }
  cfg.pretrain.preproc = cfg.preproc;
  cfg.train_cfg.preproc = cfg.preproc;
  cfg.train_cfg.patch = cfg.patch;
  cfg.classifier.patch = cfg.patch;
}

RunConfig load_config_file(const std::filesystem::path& path, const std::string& preset) {
  RunConfig cfg = preset_config(preset);
  if (!path.empty()) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(read_file_bytes(path));
    } catch (const nlohmann::json::exception& e) {
      raise(Errc::UsageError, path.string() + ": bad config JSON: " + e.what());
    }
    apply_json(cfg, j);
  }
  return cfg;
}

void write_resolved_config(const RunConfig& cfg, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  write_file_bytes(out_dir / "config.json", to_json(cfg).dump(2) + "\n");
}

void write_provenance(const std::filesystem::path& out_dir, const std::vector<std::filesystem::path>& inputs) {
  std::filesystem::create_directories(out_dir);
  nlohmann::json j;
  for (const auto& p : inputs)
    if (!p.empty() && std::filesystem::exists(p)) j[p.string()] = content_hash_hex(p);
  write_file_bytes(out_dir / "provenance.json", j.dump(2) + "\n");
}

}  // namespace fusenet::cli
