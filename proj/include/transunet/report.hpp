// SPDX-License-Identifier: Apache-2.0
//
// Cohort evaluation over label directories and report serialization.
//
// Record file (JSON Lines, format "transunet.metrics/1"): one object per case,
// then one cohort object.
//
//   case record
//     "kind": "case", "case": name, "status": "ok" | "error", "error": text
//     "regions": [ { "region": r, "lesion_dice": x | null, "lesion_scores": [..],
//                    "false_positives": n, "dice": x, "hd95": x } ... ]
//     "class_dice": [ per label 1..K ]
//   cohort record
//     "kind": "cohort", "evaluated": n, "errors": n,
//     "regions": [ { "region": r, "lesion_dice": x | null, "lesion_cases": n,
//                    "dice": x, "hd95": x } ... ]
//     "class_dice": [..]
//
// "lesion_dice": null marks a "no-lesion" case (empty ground-truth region).
// Region r covers labels 1..r.
#pragma once

#include <cstdio>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "transunet/metrics.hpp"
#include "transunet/volume.hpp"

namespace transunet {

constexpr const char* kReportFormat = "transunet.metrics/1";

// Label files of a directory keyed by case name: `<dir>/<case>/label.seg` or
// `<dir>/<case>.seg`.
inline std::map<std::string, std::filesystem::path> label_files(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw FormatError("label directory " + dir.string() + " does not exist");
  std::map<std::string, fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    std::string name;
    fs::path file;
    if (e.is_directory() && fs::is_regular_file(e.path() / "label.seg")) {
      name = e.path().filename().string();
      file = e.path() / "label.seg";
    } else if (e.is_regular_file() && e.path().extension() == ".seg") {
      name = e.path().stem().string();
      file = e.path();
    } else {
      continue;
    }
    if (!out.emplace(name, file).second)
      throw FormatError(dir.string() + ": case '" + name + "' appears both as a file and a directory");
  }
  return out;
}

// Pairs cases by name; unpaired or unreadable cases become error rows.
inline CohortReport evaluate_cohort(const std::filesystem::path& pred_dir, const std::filesystem::path& gt_dir,
                                    std::size_t num_classes, const MetricConfig& cfg = {}) {
  cfg.validate();
  const auto preds = label_files(pred_dir);
  const auto gts = label_files(gt_dir);
  std::map<std::string, int> names;
  for (const auto& [n, _] : preds) names[n] |= 1;
  for (const auto& [n, _] : gts) names[n] |= 2;
  std::vector<CaseMetrics> rows;
  for (const auto& [name, which] : names) {
    if (which != 3) {
      CaseMetrics row;
      row.name = name;
      row.error = which == 1 ? "unpaired: no ground truth" : "unpaired: no prediction";
      rows.push_back(std::move(row));
      continue;
    }
    try {
      const auto pred = load_labels(preds.at(name));
      const auto gt = load_labels(gts.at(name));
      rows.push_back(evaluate_case(name, pred, gt, num_classes, cfg));
    } catch (const std::exception& e) {
      CaseMetrics row;
      row.name = name;
      row.error = e.what();
      rows.push_back(std::move(row));
    }
  }
  return summarize(std::move(rows), num_classes);
}

namespace report_detail {

inline nlohmann::ordered_json optional_number(const std::optional<double>& v) {
  return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}

inline std::string fixed(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace report_detail

inline nlohmann::ordered_json case_record(const CaseMetrics& c) {
  nlohmann::ordered_json j;
  j["format"] = kReportFormat;
  j["kind"] = "case";
  j["case"] = c.name;
  j["status"] = c.ok() ? "ok" : "error";
  j["error"] = c.error;
  auto regions = nlohmann::ordered_json::array();
  for (const auto& m : c.regions) {
    nlohmann::ordered_json r;
    r["region"] = m.region;
    r["lesion_dice"] = report_detail::optional_number(m.lesion_dice);
    r["lesion_scores"] = m.lesion_scores;
    r["false_positives"] = m.false_positives;
    r["dice"] = m.dice;
    r["hd95"] = m.hd95;
    regions.push_back(std::move(r));
  }
  j["regions"] = std::move(regions);
  j["class_dice"] = c.class_dice;
  return j;
}

inline nlohmann::ordered_json cohort_record(const CohortReport& rep) {
  nlohmann::ordered_json j;
  j["format"] = kReportFormat;
  j["kind"] = "cohort";
  j["evaluated"] = rep.evaluated;
  j["errors"] = rep.errors;
  auto regions = nlohmann::ordered_json::array();
  for (const auto& s : rep.regions) {
    nlohmann::ordered_json r;
    r["region"] = s.region;
    r["lesion_dice"] = report_detail::optional_number(s.lesion_dice);
    r["lesion_cases"] = s.lesion_cases;
    r["dice"] = s.dice;
    r["hd95"] = s.hd95;
    regions.push_back(std::move(r));
  }
  j["regions"] = std::move(regions);
  j["class_dice"] = rep.class_dice;
  return j;
}

inline std::string to_jsonl(const CohortReport& rep) {
  std::string out;
  for (const auto& c : rep.cases) out += case_record(c).dump() + "\n";
  out += cohort_record(rep).dump() + "\n";
  return out;
}

// Fixed-width table: lesion-wise Dice, Dice and HD95 per region, then means.
inline std::string to_table(const CohortReport& rep) {
  using report_detail::fixed;
  const std::size_t R = rep.regions.size();
  std::ostringstream os;
  char buf[128];
  std::snprintf(buf, sizeof buf, "%-16s", "case");
  os << buf;
  for (std::size_t r = 1; r <= R; ++r) {
    std::snprintf(buf, sizeof buf, " %9s %9s %9s", ("R" + std::to_string(r) + ".lw").c_str(),
                  ("R" + std::to_string(r) + ".dice").c_str(), ("R" + std::to_string(r) + ".hd95").c_str());
    os << buf;
  }
  os << "\n";
  for (const auto& c : rep.cases) {
    std::snprintf(buf, sizeof buf, "%-16s", c.name.c_str());
    os << buf;
    if (!c.ok()) {
      os << " ERROR: " << c.error << "\n";
      continue;
    }
    for (const auto& m : c.regions) {
      std::snprintf(buf, sizeof buf, " %9s %9s %9s", m.lesion_dice ? fixed(*m.lesion_dice).c_str() : "no-lesion",
                    fixed(m.dice).c_str(), fixed(m.hd95, 2).c_str());
      os << buf;
    }
    os << "\n";
  }
  std::snprintf(buf, sizeof buf, "%-16s", "mean");
  os << buf;
  for (const auto& s : rep.regions) {
    std::snprintf(buf, sizeof buf, " %9s %9s %9s", s.lesion_dice ? fixed(*s.lesion_dice).c_str() : "n/a",
                  fixed(s.dice).c_str(), fixed(s.hd95, 2).c_str());
    os << buf;
  }
  os << "\n" << rep.evaluated << " evaluated, " << rep.errors << " errors\n";
  return os.str();
}

// Writes `<stem>.jsonl` and `<stem>.txt`.
inline void write_report(const std::filesystem::path& stem, const CohortReport& rep) {
  io_detail::write_file(stem.string() + ".jsonl", to_jsonl(rep));
  io_detail::write_file(stem.string() + ".txt", to_table(rep));
}

}  // namespace transunet
