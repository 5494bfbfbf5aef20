#include "fusenet/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "fusenet/util.hpp"

namespace fusenet::evalkit {

const ScanRecord& DatasetManifest::by_id(const std::string& scan_id) const {
  for (const auto& r : records)
    if (r.scan_id == scan_id) return r;
  raise(Errc::MissingPredictions, "manifest has no scan " + scan_id);
}

void write_manifest_csv(const DatasetManifest& manifest, const std::filesystem::path& path) {
  std::ostringstream out;
  out << "scan_id,patient_id,volume_path,mask_path";
  for (const char* d : kDiseaseNames) out << "," << d;
  out << ",normal\n";
  for (const auto& r : manifest.records) {
    out << r.scan_id << "," << r.patient_id << "," << r.volume_path << "," << r.mask_path;
    for (int i = 0; i < kNumDiseases; ++i) out << "," << (r.flags[i] ? 1 : 0);
    out << "," << (r.normal() ? 1 : 0) << "\n";
  }
  write_file_bytes(path, out.str());
}

DatasetManifest read_manifest_csv(const std::filesystem::path& path) {
  const std::string bytes = read_file_bytes(path);
  std::istringstream in(bytes);
  std::string line;
  if (!std::getline(in, line)) raise(Errc::EmptyDataset, path.string() + ": empty manifest");
  DatasetManifest m;
  std::set<std::string> seen;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cols = split_csv_line(line);
    if (cols.size() != 4 + kNumDiseases + 1)
      raise(Errc::HeaderMismatch, path.string() + ": bad manifest row '" + line + "'");
    ScanRecord r;
    r.scan_id = cols[0];
    r.patient_id = cols[1];
    r.volume_path = cols[2];
    r.mask_path = cols[3];
    for (int i = 0; i < kNumDiseases; ++i) r.flags[i] = cols[4 + i] == "1";
    const bool normal_col = cols[4 + kNumDiseases] == "1";
    if (normal_col != r.normal())
      raise(Errc::HeaderMismatch, path.string() + ": normal flag inconsistent for scan " + r.scan_id);
    if (!seen.insert(r.scan_id).second)
      raise(Errc::HeaderMismatch, path.string() + ": duplicate scan id " + r.scan_id);
    m.records.push_back(std::move(r));
  }
  return m;
}

SplitAssignment split(const DatasetManifest& manifest, SplitFractions f, std::uint64_t seed) {
  const double sum = f.train + f.val + f.test;
  if (f.train < 0 || f.val < 0 || f.test < 0 || std::abs(sum - 1.0) > 1e-9)
    raise(Errc::BadFractions, "split: fractions must be nonnegative and sum to 1");
  if (manifest.records.empty()) raise(Errc::EmptyDataset, "split: empty manifest");

  struct Group {
    std::string patient_id;
    std::vector<std::size_t> record_idx;
    int stratum = 0;
  };
  std::vector<Group> groups;
  std::map<std::string, std::size_t> group_of;
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    const auto& r = manifest.records[i];
    auto it = group_of.find(r.patient_id);
    if (it == group_of.end()) {
      group_of.emplace(r.patient_id, groups.size());
      groups.push_back({r.patient_id, {i}, r.label_bits()});
    } else {
      groups[it->second].record_idx.push_back(i);
      groups[it->second].stratum |= r.label_bits();
    }
  }

  // Bucket patient groups per stratum, keyed by the combined label bits.
  std::map<int, std::vector<std::size_t>> strata;
  for (std::size_t g = 0; g < groups.size(); ++g) strata[groups[g].stratum].push_back(g);

  const std::array<double, 3> frac{f.train, f.val, f.test};
  SplitAssignment out;
  for (auto& [stratum_key, members] : strata) {
    std::mt19937_64 rng(derive_seed(seed, "stratum-" + std::to_string(stratum_key)));
    std::shuffle(members.begin(), members.end(), rng);
    // Largest groups first so the greedy fill stays close to the targets;
    // the shuffle above decides order among equal sizes.
    std::stable_sort(members.begin(), members.end(), [&](std::size_t a, std::size_t b) {
      return groups[a].record_idx.size() > groups[b].record_idx.size();
    });
    std::size_t stratum_scans = 0;
    for (std::size_t g : members) stratum_scans += groups[g].record_idx.size();
    std::array<double, 3> target{};
    std::array<double, 3> assigned{};
    for (int s = 0; s < 3; ++s) target[s] = frac[s] * static_cast<double>(stratum_scans);
    for (std::size_t g : members) {
      int best = 0;
      double best_deficit = -1e300;
      for (int s = 0; s < 3; ++s) {
        const double deficit = target[s] - assigned[s];
        if (deficit > best_deficit + 1e-12) {
          best_deficit = deficit;
          best = s;
        }
      }
      assigned[best] += static_cast<double>(groups[g].record_idx.size());
      for (std::size_t ri : groups[g].record_idx)
        out.subset_of[manifest.records[ri].scan_id] = static_cast<Subset>(best);
    }
  }
  return out;
}

DatasetManifest manifest_subset(const DatasetManifest& manifest, const SplitAssignment& split, Subset subset) {
  DatasetManifest out;
  for (const auto& r : manifest.records) {
    auto it = split.subset_of.find(r.scan_id);
    if (it != split.subset_of.end() && it->second == subset) out.records.push_back(r);
  }
  return out;
}

namespace {

// Shared threshold sweep: returns the exact integer numerator of the
// trapezoidal area in units of 1/(2*P*N), plus the counts.
struct SweepResult {
  long long numerator = 0;
  long long pos = 0;
  long long neg = 0;
  std::vector<RocPoint> points;
};

SweepResult sweep(const std::vector<double>& scores, const std::vector<int>& labels, bool want_points) {
  if (scores.size() != labels.size()) raise(Errc::ShapeMismatch, "auc: score/label count mismatch");
  SweepResult r;
  for (int l : labels) {
    if (l != 0 && l != 1) raise(Errc::BadLabel, "auc: labels must be 0/1");
    (l == 1 ? r.pos : r.neg) += 1;
  }
  if (r.pos == 0 || r.neg == 0) raise(Errc::DegenerateLabels, "auc: need at least one positive and one negative");

  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });

  if (want_points) r.points.push_back({0.0, 0.0});
  long long tp = 0, fp = 0, prev_tp = 0, prev_fp = 0;
  std::size_t i = 0;
  while (i < idx.size()) {
    const double s = scores[idx[i]];
    while (i < idx.size() && scores[idx[i]] == s) {
      (labels[idx[i]] == 1 ? tp : fp) += 1;
      ++i;
    }
    r.numerator += (fp - prev_fp) * (tp + prev_tp);
    if (want_points)
      r.points.push_back({static_cast<double>(fp) / static_cast<double>(r.neg),
                          static_cast<double>(tp) / static_cast<double>(r.pos)});
    prev_tp = tp;
    prev_fp = fp;
  }
  return r;
}

}  // namespace

double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  const SweepResult r = sweep(scores, labels, false);
  return static_cast<double>(r.numerator) / (2.0 * static_cast<double>(r.pos) * static_cast<double>(r.neg));
}

std::vector<RocPoint> roc_points(const std::vector<double>& scores, const std::vector<int>& labels) {
  return sweep(scores, labels, true).points;
}

RocReport evaluate(const std::vector<clf3d::ScanPrediction>& predictions, const DatasetManifest& manifest) {
  std::map<std::string, double> score_of;
  for (const auto& p : predictions) score_of[p.scan_id] = p.scan_probability;
  for (const auto& r : manifest.records)
    if (!score_of.count(r.scan_id)) raise(Errc::MissingPredictions, "no prediction for scan " + r.scan_id);

  RocReport report;
  auto build_entry = [&](const std::string& name, auto&& is_positive, auto&& is_negative) {
    RocEntry e;
    e.name = name;
    for (const auto& r : manifest.records) {
      if (is_positive(r)) {
        e.scores.push_back(score_of.at(r.scan_id));
        e.labels.push_back(1);
      } else if (is_negative(r)) {
        e.scores.push_back(score_of.at(r.scan_id));
        e.labels.push_back(0);
      }
    }
    try {
      e.points = roc_points(e.scores, e.labels);
      e.auc_value = auc(e.scores, e.labels);
    } catch (const Error& err) {
      if (err.code() != Errc::DegenerateLabels) throw;
      e.degenerate = true;
      e.auc_value = std::numeric_limits<double>::quiet_NaN();
    }
    report.entries.push_back(std::move(e));
  };

  for (int d = 0; d < kNumDiseases; ++d) {
    build_entry(
        kDiseaseNames[d], [d](const ScanRecord& r) { return r.flags[d]; },
        [](const ScanRecord& r) { return r.normal(); });
  }
  build_entry(
      "pooled", [](const ScanRecord& r) { return !r.normal(); }, [](const ScanRecord& r) { return r.normal(); });
  return report;
}

void write_roc_csv(const RocReport& report, const std::filesystem::path& path) {
  std::ostringstream out;
  out << "class,fpr,tpr\n";
  out.setf(std::ios::fixed);
  out.precision(9);
  for (const auto& e : report.entries) {
    if (e.degenerate) continue;
    for (const auto& p : e.points) out << e.name << "," << p.fpr << "," << p.tpr << "\n";
  }
  write_file_bytes(path, out.str());
}

void write_auc_json(const RocReport& report, const std::filesystem::path& path) {
  nlohmann::json j;
  for (const auto& e : report.entries) {
    if (e.degenerate) {
      j[e.name] = {{"auc", nullptr}, {"degenerate", true}, {"cases", e.labels.size()}};
    } else {
      long long pos = 0;
      for (int l : e.labels) pos += l;
      j[e.name] = {{"auc", e.auc_value},
                   {"degenerate", false},
                   {"positives", pos},
                   {"negatives", static_cast<long long>(e.labels.size()) - pos}};
    }
  }
  write_file_bytes(path, j.dump(2) + "\n");
}

}  // namespace fusenet::evalkit
