#pragma once

#include <iomanip>
#include <sstream>
#include <string>

#include <json.hpp>

#include "cdformer/error.hpp"
#include "cdformer/harness.hpp"
#include "cdformer/metrics.hpp"

namespace cdformer {

// Structured evaluation report. Doubles are written with round-trip
// precision, so parsing the text back recovers every value exactly.
struct EvalSummary {
  EvalReport report;
  std::vector<double> bg_mass_background;
  std::vector<double> bg_mass_object;
  double mean_min_separation = 0.0;

  static EvalSummary from(const EvalResult& r) {
    return {r.report, r.bg_mass_background, r.bg_mass_object, r.mean_min_separation};
  }
  bool operator==(const EvalSummary& o) const {
    const auto& a = report;
    const auto& b = o.report;
    return a.classes == b.classes && a.thresholds == b.thresholds && a.ap == b.ap &&
           a.map == b.map && a.map50 == b.map50 && a.confusion.classes == b.confusion.classes &&
           a.confusion.counts == b.confusion.counts && a.episode_count == b.episode_count &&
           bg_mass_background == o.bg_mass_background && bg_mass_object == o.bg_mass_object &&
           mean_min_separation == o.mean_min_separation;
  }
};

inline nlohmann::json to_json(const EvalSummary& s) {
  const auto& r = s.report;
  return {
      {"episodes", r.episode_count},
      {"map", r.map},
      {"map50", r.map50},
      {"classes", r.classes},
      {"iou_thresholds", r.thresholds},
      {"ap", r.ap},
      {"confusion",
       {{"classes", r.confusion.classes},
        {"counts", r.confusion.counts},
        {"row_normalized", r.confusion.row_normalized()}}},
      {"background_mass", {{"background", s.bg_mass_background}, {"object", s.bg_mass_object}}},
      {"mean_min_separation", s.mean_min_separation},
  };
}

inline EvalSummary summary_from_json(const nlohmann::json& j) {
  try {
    EvalSummary s;
    auto& r = s.report;
    r.episode_count = j.at("episodes").get<std::size_t>();
    r.map = j.at("map").get<double>();
    r.map50 = j.at("map50").get<double>();
    r.classes = j.at("classes").get<std::vector<int>>();
    r.thresholds = j.at("iou_thresholds").get<std::vector<double>>();
    r.ap = j.at("ap").get<std::vector<std::vector<double>>>();
    r.confusion.classes = j.at("confusion").at("classes").get<std::vector<int>>();
    r.confusion.counts = j.at("confusion").at("counts").get<std::vector<std::vector<long>>>();
    s.bg_mass_background = j.at("background_mass").at("background").get<std::vector<double>>();
    s.bg_mass_object = j.at("background_mass").at("object").get<std::vector<double>>();
    s.mean_min_separation = j.at("mean_min_separation").get<double>();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(std::string("evaluation report: ") + e.what());
  }
}

// Per-class AP table and the confusion matrix, for terminals.
inline std::string format_report(const EvalSummary& s) {
  const auto& r = s.report;
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << "episodes " << r.episode_count << "  mAP@[.5:.95] " << r.map << "  mAP@.5 " << r.map50
     << "\n";
  os << std::setw(8) << "class" << std::setw(10) << "AP50" << std::setw(10) << "AP75"
     << std::setw(10) << "AP" << "\n";
  for (std::size_t c = 0; c < r.classes.size(); ++c) {
    const auto& row = r.ap[c];
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(row.size());
    os << std::setw(8) << r.classes[c] << std::setw(10) << row.front() << std::setw(10) << row[5]
       << std::setw(10) << mean << "\n";
  }
  os << "confusion (rows: true, columns: predicted, last: BG)\n" << std::setw(8) << "";
  for (int c : r.confusion.classes) os << std::setw(6) << c;
  os << std::setw(6) << "BG" << "\n";
  for (std::size_t i = 0; i < r.confusion.counts.size(); ++i) {
    if (i < r.confusion.classes.size()) {
      os << std::setw(8) << r.confusion.classes[i];
    } else {
      os << std::setw(8) << "BG";
    }
    for (long v : r.confusion.counts[i]) os << std::setw(6) << v;
    os << "\n";
  }
  return os.str();
}

}  // namespace cdformer
