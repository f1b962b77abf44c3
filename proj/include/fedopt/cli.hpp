#pragma once

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "fedopt/config.hpp"
#include "fedopt/errors.hpp"
#include "fedopt/harness.hpp"
#include "json.hpp"

namespace fedopt {

inline constexpr const char* kMetricsHeader =
    "round,train_loss,test_loss,test_accuracy,sharpness,grad_norm,delta_norm,h_norm";

enum ExitCode : int { kExitOk = 0, kExitConfig = 2, kExitDivergence = 3, kExitIo = 4 };

/// %.17g round-trips every double.
inline std::string format_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_metrics_csv(const MetricsLog& log, std::ostream& out) {
  out << kMetricsHeader << '\n';
  for (const auto& r : log.rows) {
    out << r.round << ',' << format_real(r.train_loss) << ',' << format_real(r.test_loss) << ','
        << format_real(r.test_accuracy) << ',' << (r.sharpness ? format_real(*r.sharpness) : std::string()) << ','
        << format_real(r.grad_norm) << ',' << format_real(r.delta_norm) << ',' << format_real(r.h_norm) << '\n';
  }
}

inline std::vector<MetricsRow> read_metrics_csv(std::istream& in, const std::string& source) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError(source + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kMetricsHeader) throw ParseError(source + ": schema mismatch (unexpected header '" + line + "')");
  std::vector<MetricsRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (!line.empty() && line.back() == ',') f.emplace_back();
    if (f.size() != 8) throw ParseError(source + ":" + std::to_string(line_no) + ": expected 8 fields");
    try {
      MetricsRow r;
      r.round = std::stoul(f[0]);
      r.train_loss = std::stod(f[1]);
      r.test_loss = std::stod(f[2]);
      r.test_accuracy = std::stod(f[3]);
      if (!f[4].empty()) r.sharpness = std::stod(f[4]);
      r.grad_norm = std::stod(f[5]);
      r.delta_norm = std::stod(f[6]);
      r.h_norm = std::stod(f[7]);
      rows.push_back(r);
    } catch (const std::logic_error&) {
      throw ParseError(source + ":" + std::to_string(line_no) + ": invalid number");
    }
  }
  return rows;
}

/// Expands a "sweep" block (key -> array of values) into the Cartesian
/// product of configs. Returns (directory name, flat config) pairs; a config
/// without a sweep block yields one entry with an empty name.
inline std::vector<std::pair<std::string, nlohmann::json>> expand_sweep(const nlohmann::json& raw) {
  if (!raw.is_object()) throw ConfigError("config must be a JSON object");
  std::vector<std::pair<std::string, nlohmann::json>> out;
  nlohmann::json base = raw;
  if (!base.contains("sweep")) {
    out.emplace_back("", base);
    return out;
  }
  const nlohmann::json sweep = base["sweep"];
  base.erase("sweep");
  if (!sweep.is_object() || sweep.empty()) throw ConfigError("sweep must be an object of key -> array of values");
  out.emplace_back("", base);
  for (const auto& [key, values] : sweep.items()) {
    if (key == "sweep" || !config_keys().count(key)) throw ConfigError("unknown config key '" + key + "' in sweep");
    if (!values.is_array() || values.empty()) throw ConfigError("sweep." + key + " must be a nonempty array");
    std::vector<std::pair<std::string, nlohmann::json>> next;
    for (const auto& [name, cfg] : out) {
      for (const auto& v : values) {
        nlohmann::json c = cfg;
        c[key] = v;
        std::string label = v.is_string() ? v.get<std::string>() : v.dump();
        next.emplace_back(name + (name.empty() ? "" : "_") + key + "-" + label, std::move(c));
      }
    }
    out = std::move(next);
  }
  return out;
}

namespace detail {

// Never overwrite an earlier run: fall back to <dir>-1, <dir>-2, ...
inline std::filesystem::path fresh_output_dir(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  auto taken = [](const fs::path& p) { return fs::exists(p / "metrics.csv") || fs::exists(p / "manifest.json"); };
  if (!taken(dir)) return dir;
  for (int i = 1;; ++i) {
    fs::path cand = dir;
    cand += "-" + std::to_string(i);
    if (!taken(cand)) return cand;
  }
}

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace detail

/// Writes metrics.csv and manifest.json for one resolved config. Returns the
/// directory actually written.
inline std::filesystem::path write_run(const ExperimentConfig& cfg, const std::string& config_path,
                                       const std::filesystem::path& out_dir, const RunOptions& opts) {
  namespace fs = std::filesystem;
  MetricsLog log = run_experiment(cfg, opts);
  const fs::path dir = detail::fresh_output_dir(out_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory '" + dir.string() + "': " + ec.message());

  std::ofstream csv(dir / "metrics.csv", std::ios::binary);
  if (!csv) throw IoError("cannot write '" + (dir / "metrics.csv").string() + "'");
  write_metrics_csv(log, csv);
  csv.close();
  if (!csv) throw IoError("write failed for '" + (dir / "metrics.csv").string() + "'");

  nlohmann::json manifest;
  manifest["config_path"] = config_path;
  manifest["config"] = log.config_echo;
  manifest["output_dir"] = dir.string();
  manifest["run_id"] = log.run_id;
  manifest["created_at"] = detail::utc_timestamp();
  std::ofstream mf(dir / "manifest.json");
  if (!mf) throw IoError("cannot write '" + (dir / "manifest.json").string() + "'");
  mf << manifest.dump(2) << '\n';
  if (!mf) throw IoError("write failed for '" + (dir / "manifest.json").string() + "'");
  return dir;
}

/// `run <config> --out <dir>`. Sweep entries go to sibling subdirectories of
/// <dir>. Errors are reported on `err` and mapped to exit codes.
inline int run_command(const std::string& config_path, const std::string& out_dir, const RunOptions& opts,
                       std::ostream& out, std::ostream& err) {
  try {
    const auto entries = expand_sweep(read_json_file(config_path));
    std::vector<ExperimentConfig> configs;
    for (const auto& [name, j] : entries) {
      try {
        configs.push_back(config_from_json(j));
      } catch (const ConfigError& e) {
        throw ConfigError(name.empty() ? std::string(e.what()) : "sweep entry " + name + ": " + e.what());
      }
    }
    for (std::size_t i = 0; i < configs.size(); ++i) {
      std::filesystem::path dir(out_dir);
      if (!entries[i].first.empty()) dir /= entries[i].first;
      const auto written = write_run(configs[i], config_path, dir, opts);
      out << written.string() << '\n';
    }
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const ParseError& e) {
    err << "parse error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DivergenceError& e) {
    err << "divergence: " << e.what() << '\n';
    return kExitDivergence;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "i/o error: " << e.what() << '\n';
    return kExitIo;
  }
}

struct CompareEntry {
  std::string path;
  double final_accuracy = 0.0;
  std::optional<std::size_t> rounds;
  std::optional<double> cost;  // rounds / rounds of the first run
};

inline std::vector<CompareEntry> compare_runs(const std::vector<std::string>& paths, double target) {
  if (paths.empty()) throw ConfigError("compare: no metrics files given");
  if (!(target > 0.0 && target <= 1.0)) throw ConfigError("target must be in (0, 1]");
  std::vector<CompareEntry> out;
  for (const auto& p : paths) {
    std::ifstream in(p);
    if (!in) throw IoError("cannot open '" + p + "'");
    const auto rows = read_metrics_csv(in, p);
    if (rows.empty()) throw ParseError(p + ": no rows");
    CompareEntry e;
    e.path = p;
    e.final_accuracy = rows.back().test_accuracy;
    e.rounds = rounds_to_target(rows, target);
    out.push_back(e);
  }
  const auto& ref = out.front().rounds;
  for (auto& e : out)
    if (ref && e.rounds && *ref > 0) e.cost = static_cast<double>(*e.rounds) / static_cast<double>(*ref);
    else if (ref && e.rounds && *ref == 0 && *e.rounds == 0) e.cost = 1.0;
  return out;
}

/// `compare <csv...> --target <acc>`: one row per run with final accuracy,
/// rounds to target and the cost ratio against the first run.
inline int compare_command(const std::vector<std::string>& paths, double target, std::ostream& out,
                           std::ostream& err) {
  try {
    const auto entries = compare_runs(paths, target);
    char buf[64];
    out << "run\tfinal_accuracy\trounds_to_" << format_real(target) << "\tcost\n";
    for (const auto& e : entries) {
      std::snprintf(buf, sizeof buf, "%.4f", e.final_accuracy);
      out << e.path << '\t' << buf << '\t' << (e.rounds ? std::to_string(*e.rounds) : "—") << '\t';
      if (e.cost) {
        std::snprintf(buf, sizeof buf, "%.1f×", *e.cost);
        out << buf;
      } else {
        out << "—";
      }
      out << '\n';
    }
    return kExitOk;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << '\n';
    return kExitIo;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  }
}

}  // namespace fedopt
