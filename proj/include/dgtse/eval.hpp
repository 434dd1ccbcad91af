// Copyright 2026 The dgtse Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#ifndef DGTSE_EVAL_HPP_
#define DGTSE_EVAL_HPP_

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dgtse/data.hpp"
#include "dgtse/sisdr.hpp"
#include "dgtse/two_stage.hpp"
#include "dgtse/wav.hpp"

namespace dgtse {

// Evaluation harness. A system is any callable producing (D_o, G_o) for a
// triplet, so oracle and identity baselines plug in next to the real
// two-stage model. External scorers are subprocess executables invoked as
// `scorer <estimate.wav> <reference.wav>` that print a single float.

using EvalSystem =
    std::function<ExtractResult(const MixtureTriplet&, const InferenceConfig&)>;
using TripletLoader = std::function<MixtureTriplet(const MixPlan&)>;

struct ScorerSpec {
  std::string name;
  std::string command;  // executable path, given estimate and reference WAVs
};

struct EvalRow {
  int64_t id = 0;
  double snr_db = 0;
  double si_sdr_mix = 0;  // mixture against clean, the no-op baseline
  double si_sdr_d = 0;
  double si_sdr_g = 0;
  std::map<std::string, double> scores;
  std::vector<std::string> failed_scorers;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  std::map<std::string, double> aggregates;
  bool partial = false;  // at least one scorer invocation failed
};

inline EvalSystem two_stage_system(TwoStage& system) {
  return [&system](const MixtureTriplet& t, const InferenceConfig& icfg) {
    return system.infer(t.mixture.unsqueeze(0), t.enrollment.unsqueeze(0), icfg);
  };
}

inline EvalSystem oracle_system() {
  return [](const MixtureTriplet& t, const InferenceConfig&) {
    ExtractResult r;
    r.d_o = t.target.unsqueeze(0);
    r.g_o = t.target.unsqueeze(0);
    return r;
  };
}

inline EvalSystem identity_system() {
  return [](const MixtureTriplet& t, const InferenceConfig&) {
    ExtractResult r;
    r.d_o = t.mixture.unsqueeze(0);
    r.g_o = t.mixture.unsqueeze(0);
    return r;
  };
}

namespace eval_detail {

// Runs one scorer and parses its single-float stdout. Returns false on a
// nonzero exit, unparsable output, or a non-finite value.
inline bool run_scorer(const std::string& command, const std::string& est_path,
                       const std::string& ref_path, double* value) {
  const std::string cmd =
      "\"" + command + "\" \"" + est_path + "\" \"" + ref_path + "\" 2>/dev/null";
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (pipe == nullptr) return false;
  std::string out;
  char buf[256];
  while (fgets(buf, sizeof(buf), pipe) != nullptr) out += buf;
  const int status = ::pclose(pipe);
  if (status != 0) return false;
  try {
    size_t used = 0;
    const double v = std::stod(out, &used);
    if (used == 0 || !std::isfinite(v)) return false;
    *value = v;
    return true;
  } catch (const std::exception&) {
    return false;
  }
}

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0;
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace eval_detail

inline EvalReport evaluate(const EvalSystem& system,
                           const std::vector<MixPlan>& manifest,
                           const TripletLoader& loader,
                           const InferenceConfig& icfg,
                           const std::vector<ScorerSpec>& scorers = {},
                           const std::string& work_dir = "",
                           int sample_rate = 16000) {
  EvalReport report;
  if (!scorers.empty() && !work_dir.empty())
    std::filesystem::create_directories(work_dir);

  std::vector<double> agg_mix, agg_d, agg_g;
  std::map<std::string, std::vector<double>> agg_scores;
  for (size_t i = 0; i < manifest.size(); ++i) {
    auto triplet = loader(manifest[i]);
    // Items are independently seeded, so processing order cannot matter.
    auto item_cfg = icfg;
    item_cfg.seed = derive_seed(icfg.seed, i);
    auto result = system(triplet, item_cfg);

    EvalRow row;
    row.id = static_cast<int64_t>(i);
    row.snr_db = triplet.snr_db;
    auto ref = triplet.target.unsqueeze(0);
    row.si_sdr_mix = si_sdr_db(triplet.mixture.unsqueeze(0), ref).item<double>();
    row.si_sdr_d = si_sdr_db(result.d_o, ref).item<double>();
    row.si_sdr_g = si_sdr_db(result.g_o, ref).item<double>();
    agg_mix.push_back(row.si_sdr_mix);
    agg_d.push_back(row.si_sdr_d);
    agg_g.push_back(row.si_sdr_g);

    if (!scorers.empty()) {
      const auto base = std::filesystem::path(work_dir) /
                        ("item_" + std::to_string(i));
      const std::string est_path = base.string() + "_est.wav";
      const std::string ref_path = base.string() + "_ref.wav";
      write_wav(est_path, Waveform{result.g_o.squeeze(0), sample_rate});
      write_wav(ref_path, Waveform{triplet.target, sample_rate});
      for (const auto& scorer : scorers) {
        double v = 0;
        if (eval_detail::run_scorer(scorer.command, est_path, ref_path, &v)) {
          row.scores[scorer.name] = v;
          agg_scores[scorer.name].push_back(v);
        } else {
          row.failed_scorers.push_back(scorer.name);
          report.partial = true;
        }
      }
      std::filesystem::remove(est_path);
      std::filesystem::remove(ref_path);
    }
    report.rows.push_back(std::move(row));
  }

  std::sort(report.rows.begin(), report.rows.end(),
            [](const EvalRow& a, const EvalRow& b) { return a.id < b.id; });
  report.aggregates["si_sdr_mix"] = eval_detail::mean_of(agg_mix);
  report.aggregates["si_sdr_d"] = eval_detail::mean_of(agg_d);
  report.aggregates["si_sdr_g"] = eval_detail::mean_of(agg_g);
  for (const auto& [name, values] : agg_scores)
    report.aggregates[name] = eval_detail::mean_of(values);
  return report;
}

inline nlohmann::json report_to_json(const EvalReport& report) {
  nlohmann::json j;
  j["partial"] = report.partial;
  j["aggregates"] = report.aggregates;
  j["rows"] = nlohmann::json::array();
  for (const auto& row : report.rows) {
    nlohmann::json r;
    r["id"] = row.id;
    r["snr_db"] = row.snr_db;
    r["si_sdr_mix"] = row.si_sdr_mix;
    r["si_sdr_d"] = row.si_sdr_d;
    r["si_sdr_g"] = row.si_sdr_g;
    r["scores"] = row.scores;
    r["failed_scorers"] = row.failed_scorers;
    j["rows"].push_back(std::move(r));
  }
  return j;
}

inline EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport report;
  report.partial = j.at("partial").get<bool>();
  report.aggregates = j.at("aggregates").get<std::map<std::string, double>>();
  for (const auto& r : j.at("rows")) {
    EvalRow row;
    row.id = r.at("id").get<int64_t>();
    row.snr_db = r.at("snr_db").get<double>();
    row.si_sdr_mix = r.at("si_sdr_mix").get<double>();
    row.si_sdr_d = r.at("si_sdr_d").get<double>();
    row.si_sdr_g = r.at("si_sdr_g").get<double>();
    row.scores = r.at("scores").get<std::map<std::string, double>>();
    row.failed_scorers = r.at("failed_scorers").get<std::vector<std::string>>();
    report.rows.push_back(std::move(row));
  }
  return report;
}

inline void write_report_json(const EvalReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("report: cannot write " + path);
  out << report_to_json(report).dump(2) << "\n";
}

inline EvalReport read_report_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("report: cannot read " + path);
  nlohmann::json j;
  in >> j;
  return report_from_json(j);
}

// CSV companion for spreadsheets. Scorer columns are emitted in sorted name
// order; a failed scorer leaves its cell empty and is listed in the final
// column. JSON remains the lossless form.
inline void write_report_csv(const EvalReport& report, const std::string& path) {
  std::set<std::string> names;
  for (const auto& row : report.rows) {
    for (const auto& [name, _] : row.scores) names.insert(name);
    for (const auto& name : row.failed_scorers) names.insert(name);
  }
  std::ofstream out(path);
  if (!out) throw DataError("report: cannot write " + path);
  out << "id,snr_db,si_sdr_mix,si_sdr_d,si_sdr_g";
  for (const auto& name : names) out << "," << name;
  out << ",failed_scorers\n";
  out << std::setprecision(17);
  for (const auto& row : report.rows) {
    out << row.id << "," << row.snr_db << "," << row.si_sdr_mix << ","
        << row.si_sdr_d << "," << row.si_sdr_g;
    for (const auto& name : names) {
      out << ",";
      auto it = row.scores.find(name);
      if (it != row.scores.end()) out << it->second;
    }
    out << ",";
    for (size_t i = 0; i < row.failed_scorers.size(); ++i)
      out << (i > 0 ? ";" : "") << row.failed_scorers[i];
    out << "\n";
  }
}

}  // namespace dgtse

#endif  // DGTSE_EVAL_HPP_
