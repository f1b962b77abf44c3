#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <set>
#include <variant>
#include <sstream>
#include <string>
#include <vector>

#include "fedopt/client.hpp"
#include "fedopt/data.hpp"
#include "fedopt/errors.hpp"
#include "json.hpp"

namespace fedopt {

enum class Algorithm { kFedAvg, kFedSam, kFedDyn, kFedToga, kFedSmoo, kFedLesamD };
enum class ModelKind { kQuadratic, kLogistic, kMlp };
enum class DataSource { kSynthetic, kCsv };
enum class DualDivisor { kDefault, kParticipants, kAllClients };

struct ModelConfig {
  ModelKind kind = ModelKind::kMlp;
  std::vector<std::size_t> hidden{16};
  bool logistic_bias = true;
  // Heterogeneous quadratic federation: one random PSD objective per client.
  std::size_t quadratic_dim = 5;
  std::uint64_t quadratic_seed = 1;
};

struct DataConfig {
  DataSource source = DataSource::kSynthetic;
  std::string csv_path;
  std::string test_csv_path;  // empty: hold out test_fraction of csv_path
  std::size_t n_samples = 2000;
  std::size_t feature_dim = 8;
  std::size_t num_classes = 4;
  double class_sep = 3.0;
  std::optional<std::uint64_t> data_seed;  // defaults to the experiment seed
  double test_fraction = 0.2;
};

struct SharpnessProbeConfig {
  bool enabled = false;
  double rho_probe = 0.1;
  std::size_t n_directions = 64;
};

/// Switches for the four FedTOGA components. Ignored by other algorithms.
struct AblationConfig {
  bool sam = true;
  bool dynamic_regularizer = true;
  bool dual_correction = true;
  bool perturbation_correction = true;
};

struct ExperimentConfig {
  Algorithm algorithm = Algorithm::kFedToga;
  ModelConfig model;
  DataConfig data;
  std::variant<DirichletScheme, PathologicalScheme> partition = DirichletScheme{0.1};
  std::size_t num_clients = 10;  // N
  std::size_t participants = 10;  // M
  std::size_t rounds = 100;       // T
  HyperParams hp;
  std::uint64_t seed = 0;
  std::size_t eval_every = 10;
  SharpnessProbeConfig sharpness;
  DualDivisor dual_divisor = DualDivisor::kDefault;
  AblationConfig ablation;

  void validate() const {
    if (participants > num_clients) throw ConfigError("M exceeds N");
    if (participants < 1) throw ConfigError("M must be >= 1");
    if (num_clients < 1) throw ConfigError("N must be >= 1");
    if (rounds < 1) throw ConfigError("T must be >= 1");
    if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
    hp.validate();
    if (sharpness.enabled) {
      if (!(sharpness.rho_probe > 0.0)) throw ConfigError("sharpness_rho must be > 0");
      if (sharpness.n_directions < 1) throw ConfigError("sharpness_directions must be >= 1");
    }
    if (model.kind == ModelKind::kQuadratic) {
      if (model.quadratic_dim < 1) throw ConfigError("quadratic_dim must be >= 1");
      return;
    }
    if (model.kind == ModelKind::kMlp) {
      if (model.hidden.empty()) throw ConfigError("hidden must list at least one layer width");
      for (auto w : model.hidden)
        if (w < 1) throw ConfigError("hidden widths must be >= 1");
    }
    if (data.source == DataSource::kCsv) {
      if (data.csv_path.empty()) throw ConfigError("csv_path is required when data = csv");
    } else {
      if (data.num_classes < 2) throw ConfigError("num_classes must be >= 2");
      if (data.n_samples < data.num_classes) throw ConfigError("n_samples must be >= num_classes");
      if (data.feature_dim < 1) throw ConfigError("feature_dim must be >= 1");
      if (!(data.class_sep > 0.0)) throw ConfigError("class_sep must be > 0");
    }
    if (!(data.test_fraction >= 0.0 && data.test_fraction < 1.0))
      throw ConfigError("test_fraction must be in [0, 1)");
    if (const auto* d = std::get_if<DirichletScheme>(&partition)) {
      if (!(d->concentration > 0.0)) throw ConfigError("dirichlet_u must be > 0");
    } else {
      const auto& p = std::get<PathologicalScheme>(partition);
      if (p.classes_per_client < 1) throw ConfigError("pathological_c must be >= 1");
      if (data.source == DataSource::kSynthetic && p.classes_per_client > data.num_classes)
        throw ConfigError("pathological_c must be <= num_classes");
    }
  }
};

inline const char* to_string(Algorithm a) {
  switch (a) {
    case Algorithm::kFedAvg: return "fedavg";
    case Algorithm::kFedSam: return "fedsam";
    case Algorithm::kFedDyn: return "feddyn";
    case Algorithm::kFedToga: return "fedtoga";
    case Algorithm::kFedSmoo: return "fedsmoo";
    case Algorithm::kFedLesamD: return "fedlesam_d";
  }
  return "?";
}

inline const char* to_string(PerturbationMode m) {
  switch (m) {
    case PerturbationMode::kPlain: return "plain";
    case PerturbationMode::kToga: return "toga";
    case PerturbationMode::kNeighborhood: return "neighborhood";
    case PerturbationMode::kFusion: return "fusion";
  }
  return "?";
}

namespace detail {

using nlohmann::json;

template <typename E, std::size_t N>
E parse_enum(const json& v, const char* key, const std::pair<const char*, E> (&table)[N]) {
  if (!v.is_string()) throw ConfigError(std::string(key) + " must be a string");
  const auto s = v.get<std::string>();
  for (const auto& [name, val] : table)
    if (s == name) return val;
  std::string allowed;
  for (const auto& [name, val] : table) allowed += std::string(allowed.empty() ? "" : ", ") + name;
  throw ConfigError(std::string(key) + ": unknown value '" + s + "' (expected one of " + allowed + ")");
}

inline double get_real(const json& v, const char* key) {
  if (!v.is_number()) throw ConfigError(std::string(key) + " must be a number");
  return v.get<double>();
}

inline std::uint64_t get_uint(const json& v, const char* key) {
  if (v.is_number_unsigned()) return v.get<std::uint64_t>();
  if (v.is_number_integer()) {
    const auto i = v.get<std::int64_t>();
    if (i < 0) throw ConfigError(std::string(key) + " must be >= 0");
    return static_cast<std::uint64_t>(i);
  }
  throw ConfigError(std::string(key) + " must be a nonnegative integer");
}

inline bool get_bool(const json& v, const char* key) {
  if (!v.is_boolean()) throw ConfigError(std::string(key) + " must be true or false");
  return v.get<bool>();
}

inline std::string get_string(const json& v, const char* key) {
  if (!v.is_string()) throw ConfigError(std::string(key) + " must be a string");
  return v.get<std::string>();
}

inline constexpr std::pair<const char*, Algorithm> kAlgorithms[] = {
    {"fedavg", Algorithm::kFedAvg},   {"fedsam", Algorithm::kFedSam},   {"feddyn", Algorithm::kFedDyn},
    {"fedtoga", Algorithm::kFedToga}, {"fedsmoo", Algorithm::kFedSmoo}, {"fedlesam_d", Algorithm::kFedLesamD}};
inline constexpr std::pair<const char*, ModelKind> kModels[] = {
    {"quadratic", ModelKind::kQuadratic}, {"logistic", ModelKind::kLogistic}, {"mlp", ModelKind::kMlp}};
inline constexpr std::pair<const char*, DataSource> kSources[] = {{"synthetic", DataSource::kSynthetic},
                                                                  {"csv", DataSource::kCsv}};
inline constexpr std::pair<const char*, PerturbationMode> kModes[] = {
    {"plain", PerturbationMode::kPlain},
    {"toga", PerturbationMode::kToga},
    {"neighborhood", PerturbationMode::kNeighborhood},
    {"fusion", PerturbationMode::kFusion}};
inline constexpr std::pair<const char*, DualDivisor> kDivisors[] = {{"default", DualDivisor::kDefault},
                                                                    {"participants", DualDivisor::kParticipants},
                                                                    {"all_clients", DualDivisor::kAllClients}};

template <typename E, std::size_t N>
const char* enum_name(E v, const std::pair<const char*, E> (&table)[N]) {
  for (const auto& [name, val] : table)
    if (val == v) return name;
  return "?";
}

}  // namespace detail

/// Keys that may appear in a config file besides the "sweep" block.
inline const std::set<std::string>& config_keys() {
  static const std::set<std::string> keys = {
      "algorithm", "model", "hidden", "logistic_bias", "quadratic_dim", "quadratic_seed", "data", "csv_path",
      "test_csv_path", "n_samples", "feature_dim", "num_classes", "class_sep", "data_seed", "test_fraction",
      "partition", "dirichlet_u", "pathological_c", "N", "M", "T", "eta_l", "lr_decay", "rho", "alpha", "beta",
      "kappa", "K", "batch_size", "perturbation_mode", "dual_divisor", "seed", "eval_every", "sharpness",
      "sharpness_rho", "sharpness_directions", "use_sam", "use_dynamic_regularizer", "use_dual_correction",
      "use_perturbation_correction"};
  return keys;
}

/// Builds a validated config from a flat JSON object. Absent keys keep their
/// defaults. Unknown keys and invariant violations raise ConfigError naming
/// the field.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  using namespace detail;
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [k, v] : j.items())
    if (k != "sweep" && !config_keys().count(k)) throw ConfigError("unknown config key '" + k + "'");

  ExperimentConfig c;
  auto has = [&](const char* k) { return j.contains(k); };
  if (has("algorithm")) c.algorithm = parse_enum(j["algorithm"], "algorithm", kAlgorithms);
  if (has("model")) c.model.kind = parse_enum(j["model"], "model", kModels);
  if (has("hidden")) {
    const auto& h = j["hidden"];
    if (!h.is_array()) throw ConfigError("hidden must be an array of layer widths");
    c.model.hidden.clear();
    for (const auto& w : h) c.model.hidden.push_back(get_uint(w, "hidden"));
  }
  if (has("logistic_bias")) c.model.logistic_bias = get_bool(j["logistic_bias"], "logistic_bias");
  if (has("quadratic_dim")) c.model.quadratic_dim = get_uint(j["quadratic_dim"], "quadratic_dim");
  if (has("quadratic_seed")) c.model.quadratic_seed = get_uint(j["quadratic_seed"], "quadratic_seed");
  if (has("data")) c.data.source = parse_enum(j["data"], "data", kSources);
  if (has("csv_path")) c.data.csv_path = get_string(j["csv_path"], "csv_path");
  if (has("test_csv_path")) c.data.test_csv_path = get_string(j["test_csv_path"], "test_csv_path");
  if (has("n_samples")) c.data.n_samples = get_uint(j["n_samples"], "n_samples");
  if (has("feature_dim")) c.data.feature_dim = get_uint(j["feature_dim"], "feature_dim");
  if (has("num_classes")) c.data.num_classes = get_uint(j["num_classes"], "num_classes");
  if (has("class_sep")) c.data.class_sep = get_real(j["class_sep"], "class_sep");
  if (has("data_seed")) c.data.data_seed = get_uint(j["data_seed"], "data_seed");
  if (has("test_fraction")) c.data.test_fraction = get_real(j["test_fraction"], "test_fraction");

  std::string scheme = "dirichlet";
  if (has("partition")) {
    scheme = get_string(j["partition"], "partition");
    if (scheme != "dirichlet" && scheme != "pathological")
      throw ConfigError("partition: unknown value '" + scheme + "' (expected dirichlet or pathological)");
  }
  if (scheme == "dirichlet") {
    double u = 0.1;
    if (has("dirichlet_u")) u = get_real(j["dirichlet_u"], "dirichlet_u");
    if (has("pathological_c")) throw ConfigError("pathological_c given but partition is dirichlet");
    c.partition = DirichletScheme{u};
  } else {
    std::size_t cc = 3;
    if (has("pathological_c")) cc = get_uint(j["pathological_c"], "pathological_c");
    if (has("dirichlet_u")) throw ConfigError("dirichlet_u given but partition is pathological");
    c.partition = PathologicalScheme{cc};
  }

  if (has("N")) c.num_clients = get_uint(j["N"], "N");
  if (has("M")) c.participants = get_uint(j["M"], "M");
  else c.participants = c.num_clients;
  if (has("T")) c.rounds = get_uint(j["T"], "T");
  if (has("eta_l")) c.hp.eta_l = get_real(j["eta_l"], "eta_l");
  if (has("lr_decay")) c.hp.lr_decay = get_real(j["lr_decay"], "lr_decay");
  if (has("rho")) c.hp.rho = get_real(j["rho"], "rho");
  if (has("alpha")) c.hp.alpha = get_real(j["alpha"], "alpha");
  if (has("beta")) c.hp.beta = get_real(j["beta"], "beta");
  if (has("kappa")) c.hp.kappa = get_real(j["kappa"], "kappa");
  if (has("K")) c.hp.local_steps = get_uint(j["K"], "K");
  if (has("batch_size")) c.hp.batch_size = get_uint(j["batch_size"], "batch_size");
  if (has("perturbation_mode")) c.hp.perturbation_mode = parse_enum(j["perturbation_mode"], "perturbation_mode", kModes);
  if (has("dual_divisor")) c.dual_divisor = parse_enum(j["dual_divisor"], "dual_divisor", kDivisors);
  if (has("seed")) c.seed = get_uint(j["seed"], "seed");
  if (has("eval_every")) c.eval_every = get_uint(j["eval_every"], "eval_every");
  if (has("sharpness")) c.sharpness.enabled = get_bool(j["sharpness"], "sharpness");
  if (has("sharpness_rho")) c.sharpness.rho_probe = get_real(j["sharpness_rho"], "sharpness_rho");
  if (has("sharpness_directions"))
    c.sharpness.n_directions = get_uint(j["sharpness_directions"], "sharpness_directions");
  if (has("use_sam")) c.ablation.sam = get_bool(j["use_sam"], "use_sam");
  if (has("use_dynamic_regularizer"))
    c.ablation.dynamic_regularizer = get_bool(j["use_dynamic_regularizer"], "use_dynamic_regularizer");
  if (has("use_dual_correction")) c.ablation.dual_correction = get_bool(j["use_dual_correction"], "use_dual_correction");
  if (has("use_perturbation_correction"))
    c.ablation.perturbation_correction = get_bool(j["use_perturbation_correction"], "use_perturbation_correction");

  c.validate();
  return c;
}

/// Canonical, fully resolved echo of a config (keys sorted).
inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  using namespace detail;
  json j;
  j["algorithm"] = enum_name(c.algorithm, kAlgorithms);
  j["model"] = enum_name(c.model.kind, kModels);
  if (c.model.kind == ModelKind::kQuadratic) {
    j["quadratic_dim"] = c.model.quadratic_dim;
    j["quadratic_seed"] = c.model.quadratic_seed;
  } else {
    if (c.model.kind == ModelKind::kMlp) j["hidden"] = c.model.hidden;
    if (c.model.kind == ModelKind::kLogistic) j["logistic_bias"] = c.model.logistic_bias;
    j["data"] = enum_name(c.data.source, kSources);
    if (c.data.source == DataSource::kCsv) {
      j["csv_path"] = c.data.csv_path;
      if (!c.data.test_csv_path.empty()) j["test_csv_path"] = c.data.test_csv_path;
    } else {
      j["n_samples"] = c.data.n_samples;
      j["feature_dim"] = c.data.feature_dim;
      j["num_classes"] = c.data.num_classes;
      j["class_sep"] = c.data.class_sep;
    }
    j["data_seed"] = c.data.data_seed.value_or(c.seed);
    j["test_fraction"] = c.data.test_fraction;
    if (const auto* d = std::get_if<DirichletScheme>(&c.partition)) {
      j["partition"] = "dirichlet";
      j["dirichlet_u"] = d->concentration;
    } else {
      j["partition"] = "pathological";
      j["pathological_c"] = std::get<PathologicalScheme>(c.partition).classes_per_client;
    }
  }
  j["N"] = c.num_clients;
  j["M"] = c.participants;
  j["T"] = c.rounds;
  j["eta_l"] = c.hp.eta_l;
  j["lr_decay"] = c.hp.lr_decay;
  j["rho"] = c.hp.rho;
  j["alpha"] = c.hp.alpha;
  j["beta"] = c.hp.beta;
  j["kappa"] = c.hp.kappa;
  j["K"] = c.hp.local_steps;
  j["batch_size"] = c.hp.batch_size;
  j["perturbation_mode"] = to_string(c.hp.perturbation_mode);
  j["dual_divisor"] = enum_name(c.dual_divisor, kDivisors);
  j["seed"] = c.seed;
  j["eval_every"] = c.eval_every;
  j["sharpness"] = c.sharpness.enabled;
  if (c.sharpness.enabled) {
    j["sharpness_rho"] = c.sharpness.rho_probe;
    j["sharpness_directions"] = c.sharpness.n_directions;
  }
  if (c.algorithm == Algorithm::kFedToga) {
    j["use_sam"] = c.ablation.sam;
    j["use_dynamic_regularizer"] = c.ablation.dynamic_regularizer;
    j["use_dual_correction"] = c.ablation.dual_correction;
    j["use_perturbation_correction"] = c.ablation.perturbation_correction;
  }
  return j;
}

/// 64-bit FNV-1a of the canonical config echo, as 16 hex digits. The seed is
/// part of the echo, so distinct seeds give distinct ids.
inline std::string run_id(const ExperimentConfig& c) {
  const std::string s = config_to_json(c).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": invalid JSON: " + e.what());
  }
}

inline ExperimentConfig parse_config(const std::string& path) { return config_from_json(read_json_file(path)); }

}  // namespace fedopt
