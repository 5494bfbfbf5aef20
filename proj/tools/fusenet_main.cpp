// Command-line surface for the dual-stage weakly supervised CT pipeline.
// One verb per stage so every intermediate artifact can be inspected:
//   gen-synth -> preprocess -> pretrain-seg -> select-features -> train
//   -> infer -> evaluate -> roc-export

#include <cstdio>
#include <iostream>
#include <map>

#include <CLI11.hpp>
#include <json.hpp>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "fusenet/clf3d.hpp"
#include "fusenet/runconfig.hpp"
#include "fusenet/util.hpp"

namespace fs = std::filesystem;
using namespace fusenet;

namespace {

evalkit::DatasetManifest subset_for(const evalkit::DatasetManifest& manifest, const std::string& subset,
                                    const evalkit::SplitFractions& fractions, std::uint64_t seed) {
  if (subset == "all") return manifest;
  const auto split = evalkit::split(manifest, fractions, seed);
  if (subset == "train") return evalkit::manifest_subset(manifest, split, evalkit::Subset::train);
  if (subset == "val") return evalkit::manifest_subset(manifest, split, evalkit::Subset::val);
  if (subset == "test") return evalkit::manifest_subset(manifest, split, evalkit::Subset::test);
  raise(Errc::UsageError, "unknown subset '" + subset + "'");
}

segnet::SegNetModel load_backbone(const cli::RunConfig& cfg, const fs::path& ckpt) {
  segnet::SegNetModel model(cfg.segnet_cfg, 0);
  model.load(ckpt);
  return model;
}

// Static SVG: five ROC curves with an AUC legend. Pure text emission, so
// re-exports are byte-identical.
void write_roc_svg(const evalkit::RocReport& report, const fs::path& path) {
  const int width = 640, height = 520, margin = 60, plot = 420;
  const std::array<const char*, 5> colors{"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#111111"};
  std::string svg;
  char buf[256];
  auto X = [&](double fpr) { return margin + fpr * plot; };
  auto Y = [&](double tpr) { return margin + plot - tpr * plot; };

  svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(width) + "\" height=\"" +
         std::to_string(height) + "\">\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  std::snprintf(buf, sizeof(buf),
                "<rect x=\"%d\" y=\"%d\" width=\"%d\" height=\"%d\" fill=\"none\" stroke=\"#333\"/>\n", margin,
                margin, plot, plot);
  svg += buf;
  std::snprintf(buf, sizeof(buf),
                "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"#bbb\" stroke-dasharray=\"4\"/>\n",
                X(0), Y(0), X(1), Y(1));
  svg += buf;
  svg += "<text x=\"" + std::to_string(margin + plot / 2) + "\" y=\"" + std::to_string(margin + plot + 35) +
         "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">false positive rate</text>\n";
  std::snprintf(buf, sizeof(buf),
                "<text x=\"18\" y=\"%d\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\" "
                "transform=\"rotate(-90 18 %d)\">true positive rate</text>\n",
                margin + plot / 2, margin + plot / 2);
  svg += buf;

  int legend_y = margin + 10;
  for (std::size_t e = 0; e < report.entries.size(); ++e) {
    const auto& entry = report.entries[e];
    const char* color = colors[e % colors.size()];
    if (!entry.degenerate) {
      svg += "<polyline fill=\"none\" stroke=\"";
      svg += color;
      svg += "\" stroke-width=\"1.5\" points=\"";
      for (const auto& p : entry.points) {
        std::snprintf(buf, sizeof(buf), "%.2f,%.2f ", X(p.fpr), Y(p.tpr));
        svg += buf;
      }
      svg += "\"/>\n";
    }
    char label[48];
    if (entry.degenerate)
      std::snprintf(label, sizeof(label), "degenerate");
    else
      std::snprintf(label, sizeof(label), "AUC %.3f", entry.auc_value);
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"%d\" y=\"%d\" font-family=\"sans-serif\" font-size=\"12\" fill=\"%s\">%s: %s</text>\n",
                  margin + plot + 12, legend_y, color, entry.name.c_str(), label);
    svg += buf;
    legend_y += 18;
  }
  svg += "</svg>\n";
  write_file_bytes(path, svg);
}

}  // namespace

int main(int argc, char** argv) {
#ifdef _OPENMP
  omp_set_num_threads(worker_threads());
#endif

  CLI::App app{"fusenet: dual-stage weakly supervised CT classification pipeline"};
  app.require_subcommand(1);

  std::string config_path, preset = "desk";
  std::uint64_t seed = 0;
  std::string out_dir;
  app.add_option("--config", config_path, "JSON config file; flags override")->expected(1);
  app.add_option("--preset", preset, "desk or paper")->check(CLI::IsMember({"desk", "paper"}));
  app.add_option("--seed", seed, "master seed");
  app.add_option("--out", out_dir, "output directory");

  // gen-synth
  auto* gen = app.add_subcommand("gen-synth", "generate a synthetic dataset with analytic ground truth");
  int gen_n = 100;
  double gen_fraction = -1.0, gen_multi = -1.0;
  std::string gen_style;
  bool gen_lesion_masks = false;
  gen->add_option("--n", gen_n, "number of scans");
  gen->add_option("--diseased-fraction", gen_fraction, "fraction of diseased scans");
  gen->add_option("--multi-rate", gen_multi, "rate of second diseases");
  gen->add_option("--mode", gen_style, "lesion style: raw_visible or feature_favored");
  gen->add_flag("--write-lesion-masks", gen_lesion_masks, "also write per-scan lesion masks");

  // preprocess
  auto* prep = app.add_subcommand("preprocess", "resample/clip/normalize/pad every scan in a manifest");
  std::string prep_data;
  prep->add_option("--data", prep_data, "manifest CSV")->required();

  // pretrain-seg
  auto* pre = app.add_subcommand("pretrain-seg", "pre-train the segmentation backbone on phantoms");
  std::string pre_data;
  int pre_epochs = -1, pre_holdout = 0;
  pre->add_option("--data", pre_data, "manifest CSV with truth masks")->required();
  pre->add_option("--epochs", pre_epochs, "training epochs");
  pre->add_option("--holdout", pre_holdout, "phantoms held out for the Dice report");

  // select-features
  auto* sel = app.add_subcommand("select-features", "score and select lung-affine feature maps");
  std::string sel_data, sel_segnet;
  int sel_k = -1, sel_scans = -1;
  sel->add_option("--data", sel_data, "manifest CSV")->required();
  sel->add_option("--segnet", sel_segnet, "frozen backbone checkpoint")->required();
  sel->add_option("--k", sel_k, "maps to keep");
  sel->add_option("--scans", sel_scans, "train scans to average scores over");

  // train
  auto* tr = app.add_subcommand("train", "train the 3D ResNet classifier");
  std::string tr_mode = "dyfa", tr_data, tr_segnet, tr_selection, tr_cache;
  int tr_epochs = -1, tr_batch = -1;
  tr->add_option("--mode", tr_mode, "baseline, stfa or dyfa")
      ->check(CLI::IsMember({"baseline", "stfa", "dyfa"}));
  tr->add_option("--data", tr_data, "manifest CSV")->required();
  tr->add_option("--segnet", tr_segnet, "frozen backbone checkpoint")->required();
  tr->add_option("--selection", tr_selection, "selection report JSON")->required();
  tr->add_option("--epochs", tr_epochs, "training epochs");
  tr->add_option("--batch", tr_batch, "batch size");
  tr->add_option("--cache", tr_cache, "per-scan feature cache directory (default <out>/cache)");

  // infer
  auto* inf = app.add_subcommand("infer", "predict scan probabilities with 6 patches per scan");
  std::string inf_model, inf_segnet, inf_selection, inf_data, inf_subset = "val", inf_mode = "dyfa";
  std::string inf_aggregator, inf_cache;
  inf->add_option("--model", inf_model, "classifier checkpoint")->required();
  inf->add_option("--segnet", inf_segnet, "frozen backbone checkpoint")->required();
  inf->add_option("--selection", inf_selection, "selection report JSON")->required();
  inf->add_option("--data", inf_data, "manifest CSV")->required();
  inf->add_option("--subset", inf_subset, "train, val, test or all");
  inf->add_option("--mode", inf_mode, "baseline, stfa or dyfa")
      ->check(CLI::IsMember({"baseline", "stfa", "dyfa"}));
  inf->add_option("--aggregator", inf_aggregator, "aggregator checkpoint (dyfa mode)");
  inf->add_option("--cache", inf_cache, "per-scan feature cache directory");

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "per-disease and pooled ROC/AUC report");
  std::string ev_preds, ev_data, ev_subset = "val";
  ev->add_option("--predictions", ev_preds, "predictions CSV")->required();
  ev->add_option("--data", ev_data, "manifest CSV")->required();
  ev->add_option("--subset", ev_subset, "train, val, test or all");

  // roc-export
  auto* roc = app.add_subcommand("roc-export", "re-emit per-class ROC CSVs and the SVG plot for a run");
  std::string roc_run;
  roc->add_option("--run", roc_run, "run directory containing evaluation artifacts")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << "error code=UsageError msg=\"" << e.get_name() << "\"\n";
    return 2;
  }

  try {
    cli::RunConfig cfg = cli::load_config_file(config_path, preset);
    cfg.seed = seed;
    const fs::path out = out_dir.empty() ? fs::path("out") : fs::path(out_dir);

    if (*gen) {
      cfg.synth.n_scans = gen_n;
      if (gen_fraction >= 0) cfg.synth.diseased_fraction = gen_fraction;
      if (gen_multi >= 0) cfg.synth.multi_disease_rate = gen_multi;
      if (!gen_style.empty()) cfg.synth.style = synthlab::lesion_style_from_name(gen_style);
      cfg.synth.write_lesion_masks = gen_lesion_masks;
      cli::write_resolved_config(cfg, out);
      const auto manifest = synthlab::generate_dataset(cfg.synth, cfg.seed, out);
      cli::write_provenance(out, {});
      std::cout << "wrote " << manifest.records.size() << " scans under " << out.string() << "\n";
    } else if (*prep) {
      cli::write_resolved_config(cfg, out);
      auto manifest = evalkit::read_manifest_csv(prep_data);
      fs::create_directories(out / "volumes");
      for (auto& rec : manifest.records) {
        const auto raw = volgrid::read_volume(rec.volume_path);
        const auto prepped = preproc::preprocess_scan(raw.channel(0), cfg.preproc);
        const fs::path dst = out / "volumes" / (rec.scan_id + "_pre.vgr");
        volgrid::write_volume(volgrid::MultiChannelVolume::from_scalar(prepped), dst);
        rec.volume_path = dst.string();
      }
      evalkit::write_manifest_csv(manifest, out / "manifest.csv");
      cli::write_provenance(out, {fs::path(prep_data)});
      std::cout << "preprocessed " << manifest.records.size() << " scans\n";
    } else if (*pre) {
      if (pre_epochs >= 0) cfg.pretrain.epochs = pre_epochs;
      cli::write_resolved_config(cfg, out);
      const auto manifest = evalkit::read_manifest_csv(pre_data);
      if (pre_holdout < 0 || pre_holdout >= static_cast<int>(manifest.records.size()))
        raise(Errc::UsageError, "holdout must be smaller than the dataset");
      evalkit::DatasetManifest train_set, holdout_set;
      for (std::size_t i = 0; i < manifest.records.size(); ++i) {
        if (i + static_cast<std::size_t>(pre_holdout) < manifest.records.size())
          train_set.records.push_back(manifest.records[i]);
        else
          holdout_set.records.push_back(manifest.records[i]);
      }
      segnet::SegNetModel model(cfg.segnet_cfg, derive_seed(cfg.seed, "segnet-init"));
      const auto log = segnet::pretrain(model, train_set, cfg.pretrain, cfg.seed);
      segnet::freeze(model);
      model.save(out / "segnet.ckpt", static_cast<long long>(log.size()));
      {
        std::string csv = "epoch,step,loss\n";
        for (const auto& row : log)
          csv += std::to_string(row.epoch) + "," + std::to_string(row.step) + "," + std::to_string(row.loss) + "\n";
        write_file_bytes(out / "pretrain_log.csv", csv);
      }
      nlohmann::json dice_report;
      if (!holdout_set.records.empty()) {
        std::map<std::string, double> mean_dice{{"left_lung", 0.0}, {"right_lung", 0.0}, {"body", 0.0}};
        for (const auto& rec : holdout_set.records) {
          const auto raw = volgrid::read_volume(rec.volume_path);
          const auto prepped = preproc::preprocess_scan(raw.channel(0), cfg.preproc);
          const auto pred = segnet::predict_mask(model, prepped);
          const auto truth = volgrid::read_mask(rec.mask_path);
          mean_dice["body"] += segnet::dice(pred, truth, 1);
          mean_dice["left_lung"] += segnet::dice(pred, truth, 2);
          mean_dice["right_lung"] += segnet::dice(pred, truth, 3);
        }
        for (auto& [k, v] : mean_dice) v /= static_cast<double>(holdout_set.records.size());
        dice_report = {{"holdout_scans", holdout_set.records.size()},
                       {"body", mean_dice["body"]},
                       {"left_lung", mean_dice["left_lung"]},
                       {"right_lung", mean_dice["right_lung"]},
                       {"lungs_mean", (mean_dice["left_lung"] + mean_dice["right_lung"]) / 2.0}};
        write_file_bytes(out / "dice_report.json", dice_report.dump(2) + "\n");
      }
      cli::write_provenance(out, {fs::path(pre_data)});
      std::cout << "pretrained backbone over " << log.size() << " steps";
      if (!dice_report.empty()) std::cout << "; holdout lungs dice " << dice_report["lungs_mean"].dump();
      std::cout << "\n";
    } else if (*sel) {
      if (sel_k > 0) cfg.selection_k = sel_k;
      if (sel_scans > 0) cfg.selection_scans = sel_scans;
      cli::write_resolved_config(cfg, out);
      const auto manifest = evalkit::read_manifest_csv(sel_data);
      auto backbone = load_backbone(cfg, sel_segnet);
      const auto train_set = subset_for(manifest, "train", cfg.fractions, cfg.seed);
      if (train_set.records.empty()) raise(Errc::EmptyDataset, "select-features: empty train subset");
      std::vector<std::vector<double>> per_scan;
      const int n_scans = std::min<int>(cfg.selection_scans, static_cast<int>(train_set.records.size()));
      for (int i = 0; i < n_scans; ++i) {
        const auto& rec = train_set.records[static_cast<std::size_t>(i)];
        const auto raw = volgrid::read_volume(rec.volume_path);
        const auto ct = preproc::preprocess_scan(raw.channel(0), cfg.preproc);
        auto [logits, taps] = backbone.forward_with_taps(segnet::to_tensor(ct), false);
        const auto feats = fusion::upsample_taps_to_reference(taps, ct.dims(), ct.spacing_mm());
        const auto pred = segnet::predict_mask(backbone, ct);
        std::set<int> body_set;
        for (int c = 1; c < cfg.segnet_cfg.num_classes; ++c) body_set.insert(c);
        const auto body = volgrid::binarize_mask(pred, body_set);
        const auto lungs = volgrid::binarize_mask(pred, {2, 3});
        const auto muted = fusion::mute_outside_body(feats, body);
        per_scan.push_back(fusion::map_scores(muted, lungs, body));
      }
      const auto report = fusion::select_maps_averaged(per_scan, cfg.selection_k, cfg.segnet_cfg.stack_channels);
      report.save_json(out / "selection.json");
      cli::write_provenance(out, {fs::path(sel_data), fs::path(sel_segnet)});
      std::cout << "selected " << report.k << " of " << report.scores.size() << " maps over " << n_scans
                << " train scans\n";
    } else if (*tr) {
      cfg.train_cfg.mode = clf3d::mode_from_name(tr_mode);
      if (tr_epochs >= 0) cfg.train_cfg.epochs = tr_epochs;
      if (tr_batch > 0) cfg.train_cfg.batch_size = tr_batch;
      cfg.train_cfg.seed = cfg.seed;
      cfg.train_cfg.cache_dir = tr_cache.empty() ? (out / "cache") : fs::path(tr_cache);
      cfg.classifier.input_channels = cfg.train_cfg.mode == clf3d::Mode::baseline ? 1 : 2;
      cli::write_resolved_config(cfg, out);

      const auto manifest = evalkit::read_manifest_csv(tr_data);
      auto backbone = load_backbone(cfg, tr_segnet);
      const auto selection = fusion::SelectionReport::load_json(tr_selection);
      const auto train_set = subset_for(manifest, "train", cfg.fractions, cfg.seed);
      if (train_set.records.empty()) raise(Errc::EmptyDataset, "train: empty train subset");

      clf3d::ClassifierModel model(cfg.classifier, derive_seed(cfg.seed, "clf-init"));
      fusion::DyFAAggregator aggregator(selection.k);
      fusion::DyFAAggregator* agg_ptr = cfg.train_cfg.mode == clf3d::Mode::dyfa ? &aggregator : nullptr;
      const auto log = clf3d::train(model, train_set, backbone, selection, cfg.train_cfg, agg_ptr);
      model.save(out / "classifier.ckpt", static_cast<long long>(log.size()));
      if (agg_ptr) aggregator.save(out / "aggregator.ckpt", static_cast<long long>(log.size()));
      clf3d::write_train_log_csv(log, out / "train_log.csv");
      cli::write_provenance(out, {fs::path(tr_data), fs::path(tr_segnet), fs::path(tr_selection)});
      std::cout << "trained " << tr_mode << " over " << log.size() << " steps; final loss "
                << (log.empty() ? 0.0 : log.back().loss) << "\n";
    } else if (*inf) {
      const auto mode = clf3d::mode_from_name(inf_mode);
      cfg.classifier.input_channels = mode == clf3d::Mode::baseline ? 1 : 2;
      cli::write_resolved_config(cfg, out);
      const auto manifest = evalkit::read_manifest_csv(inf_data);
      auto backbone = load_backbone(cfg, inf_segnet);
      const auto selection = fusion::SelectionReport::load_json(inf_selection);
      clf3d::ClassifierModel model(cfg.classifier, 0);
      model.load(inf_model);
      fusion::DyFAAggregator aggregator(selection.k);
      if (mode == clf3d::Mode::dyfa) {
        if (inf_aggregator.empty()) raise(Errc::UsageError, "dyfa inference needs --aggregator");
        aggregator.load(inf_aggregator);
      }
      const fs::path cache = inf_cache.empty() ? (out / "cache") : fs::path(inf_cache);
      const auto subset = subset_for(manifest, inf_subset, cfg.fractions, cfg.seed);
      if (subset.records.empty()) raise(Errc::EmptyDataset, "infer: empty subset");
      std::vector<clf3d::ScanPrediction> preds;
      for (const auto& rec : subset.records)
        preds.push_back(clf3d::infer_scan(model, rec, backbone, selection,
                                          mode, mode == clf3d::Mode::dyfa ? &aggregator : nullptr, cfg.preproc,
                                          cfg.patch, cache));
      clf3d::write_predictions_csv(preds, out / ("predictions_" + inf_subset + ".csv"));
      cli::write_provenance(out, {fs::path(inf_data), fs::path(inf_model), fs::path(inf_segnet),
                                  fs::path(inf_selection)});
      std::cout << "inferred " << preds.size() << " scans (" << inf_subset << ")\n";
    } else if (*ev) {
      cli::write_resolved_config(cfg, out);
      const auto manifest = evalkit::read_manifest_csv(ev_data);
      const auto subset = subset_for(manifest, ev_subset, cfg.fractions, cfg.seed);
      const auto preds = clf3d::read_predictions_csv(ev_preds);
      const auto report = evalkit::evaluate(preds, subset);
      evalkit::write_roc_csv(report, out / ("roc_points_" + ev_subset + ".csv"));
      evalkit::write_auc_json(report, out / ("auc_summary_" + ev_subset + ".json"));
      write_roc_svg(report, out / ("roc_curves_" + ev_subset + ".svg"));
      cli::write_provenance(out, {fs::path(ev_preds), fs::path(ev_data)});
      for (const auto& e : report.entries)
        std::cout << e.name << ": " << (e.degenerate ? std::string("degenerate") : std::to_string(e.auc_value))
                  << "\n";
    } else if (*roc) {
      const fs::path run(roc_run);
      bool found = false;
      for (const char* subset : {"train", "val", "test", "all"}) {
        const fs::path points = run / ("roc_points_" + std::string(subset) + ".csv");
        if (!fs::exists(points)) continue;
        found = true;
        // Re-emit per-class CSVs and the SVG from the stored points.
        const std::string bytes = read_file_bytes(points);
        std::map<std::string, std::vector<evalkit::RocPoint>> curves;
        std::istringstream in(bytes);
        std::string line;
        std::getline(in, line);
        while (std::getline(in, line)) {
          if (line.empty()) continue;
          const auto cols = split_csv_line(line);
          curves[cols[0]].push_back({std::stod(cols[1]), std::stod(cols[2])});
        }
        const fs::path dst = out_dir.empty() ? run : fs::path(out_dir);
        fs::create_directories(dst);
        evalkit::RocReport report;
        // Stable entry order: the four diseases then pooled.
        for (const char* name : {"pneumonia_atelectasis", "mass", "emphysema", "nodules", "pooled"}) {
          evalkit::RocEntry e;
          e.name = name;
          auto it = curves.find(name);
          if (it == curves.end()) {
            e.degenerate = true;
          } else {
            e.points = it->second;
            double trap = 0.0;
            for (std::size_t i = 1; i < e.points.size(); ++i)
              trap += (e.points[i].fpr - e.points[i - 1].fpr) * (e.points[i].tpr + e.points[i - 1].tpr) / 2.0;
            e.auc_value = trap;
            std::string csv = "fpr,tpr\n";
            for (const auto& p : e.points) csv += std::to_string(p.fpr) + "," + std::to_string(p.tpr) + "\n";
            write_file_bytes(dst / ("roc_" + std::string(subset) + "_" + name + ".csv"), csv);
          }
          report.entries.push_back(std::move(e));
        }
        write_roc_svg(report, dst / ("roc_curves_" + std::string(subset) + ".svg"));
        std::cout << "exported " << subset << " curves\n";
      }
      if (!found) raise(Errc::MissingArtifacts, roc_run + " holds no roc_points_*.csv evaluation artifacts");
    }
    return 0;
  } catch (const Error& e) {
    std::cerr << "error code=" << e.code_name() << " msg=\"" << e.what() << "\"\n";
    return e.code() == Errc::UsageError ? 2 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error code=Internal msg=\"" << e.what() << "\"\n";
    return 1;
  }
}
