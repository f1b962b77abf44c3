#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "fedopt/errors.hpp"
#include "fedopt/model.hpp"
#include "fedopt/rng.hpp"

namespace fedopt {

struct Dataset {
  Batch samples;
  std::size_t num_classes = 0;
  std::size_t feature_dim = 0;

  std::size_t size() const noexcept { return samples.size(); }
  int label(std::size_t i) const { return samples.labels[i]; }

  /// Gathers the given rows into a batch.
  Batch gather(std::span<const std::size_t> indices) const {
    Batch b;
    b.dim = feature_dim;
    b.features.reserve(indices.size() * feature_dim);
    b.labels.reserve(indices.size());
    for (auto i : indices) b.push_back(samples.row(i), samples.labels[i]);
    return b;
  }

  Dataset subset(std::span<const std::size_t> indices) const {
    return Dataset{gather(indices), num_classes, feature_dim};
  }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> counts(num_classes, 0);
    for (int y : samples.labels) ++counts[static_cast<std::size_t>(y)];
    return counts;
  }
};

struct DirichletScheme {
  double concentration;  // u
};
struct PathologicalScheme {
  std::size_t classes_per_client;  // c
};

struct PartitionSpec {
  std::variant<DirichletScheme, PathologicalScheme> scheme;
  std::size_t num_clients = 1;
  std::uint64_t seed = 0;
};

struct ClientShard {
  std::size_t client_id = 0;
  std::vector<std::size_t> indices;
};

/// Gaussian mixture: one mean per class on the sphere of radius class_sep,
/// unit covariance. Labels cycle 0..C-1 before a seeded shuffle, so class
/// sizes differ by at most one.
inline Dataset gen_synthetic_classification(std::uint64_t seed, std::size_t n_samples,
                                            std::size_t feature_dim, std::size_t num_classes,
                                            double class_sep) {
  if (num_classes < 2 || n_samples < num_classes || feature_dim < 1 || !(class_sep > 0.0))
    throw ContractViolation(
        "gen_synthetic_classification: need n_samples >= num_classes >= 2, feature_dim >= 1, "
        "class_sep > 0");
  Stream rng = Stream(seed).derive(StreamTag::kData);
  std::vector<std::vector<double>> means(num_classes, std::vector<double>(feature_dim));
  for (auto& m : means) {
    double n2 = 0.0;
    do {
      n2 = 0.0;
      for (double& v : m) {
        v = rng.normal();
        n2 += v * v;
      }
    } while (n2 == 0.0);
    const double s = class_sep / std::sqrt(n2);
    for (double& v : m) v *= s;
  }
  std::vector<int> labels(n_samples);
  for (std::size_t i = 0; i < n_samples; ++i) labels[i] = static_cast<int>(i % num_classes);
  rng.shuffle(labels);

  Dataset ds;
  ds.num_classes = num_classes;
  ds.feature_dim = feature_dim;
  ds.samples.dim = feature_dim;
  ds.samples.features.resize(n_samples * feature_dim);
  ds.samples.labels = labels;
  for (std::size_t i = 0; i < n_samples; ++i) {
    const auto& m = means[static_cast<std::size_t>(labels[i])];
    for (std::size_t j = 0; j < feature_dim; ++j)
      ds.samples.features[i * feature_dim + j] = m[j] + rng.normal();
  }
  return ds;
}

/// Seeded shuffle split; the first floor(n * test_fraction) shuffled rows form the test set.
inline std::pair<Dataset, Dataset> train_test_split(const Dataset& ds, std::uint64_t seed,
                                                    double test_fraction = 0.2) {
  require(test_fraction >= 0.0 && test_fraction < 1.0, "train_test_split: bad fraction");
  std::vector<std::size_t> idx(ds.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Stream(seed).derive(StreamTag::kSplit).shuffle(idx);
  const auto n_test = static_cast<std::size_t>(std::floor(static_cast<double>(ds.size()) * test_fraction));
  std::span<const std::size_t> all(idx);
  std::vector<std::size_t> test(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_test));
  std::vector<std::size_t> train(all.begin() + static_cast<std::ptrdiff_t>(n_test), all.end());
  std::sort(test.begin(), test.end());
  std::sort(train.begin(), train.end());
  return {ds.subset(train), ds.subset(test)};
}

namespace detail {

inline std::vector<std::vector<std::size_t>> indices_by_class(const Dataset& ds) {
  std::vector<std::vector<std::size_t>> by_class(ds.num_classes);
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[static_cast<std::size_t>(ds.label(i))].push_back(i);
  return by_class;
}

// Largest-remainder apportionment of `total` items by `weights` (ties to the lower index).
inline std::vector<std::size_t> largest_remainder(std::size_t total, std::span<const double> weights) {
  const double wsum = std::accumulate(weights.begin(), weights.end(), 0.0);
  std::vector<std::size_t> counts(weights.size(), 0);
  std::vector<std::pair<double, std::size_t>> rem;
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double quota = wsum > 0.0 ? static_cast<double>(total) * weights[i] / wsum
                                    : static_cast<double>(total) / static_cast<double>(weights.size());
    counts[i] = static_cast<std::size_t>(std::floor(quota));
    assigned += counts[i];
    rem.emplace_back(quota - std::floor(quota), i);
  }
  std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  // Floating error can leave assigned slightly off total in either direction.
  for (std::size_t k = 0; assigned < total; k = (k + 1) % rem.size(), ++assigned) ++counts[rem[k].second];
  while (assigned > total) {
    auto it = std::max_element(counts.begin(), counts.end());
    --*it;
    --assigned;
  }
  return counts;
}

inline void finalize_shards(std::vector<ClientShard>& shards) {
  for (auto& s : shards) std::sort(s.indices.begin(), s.indices.end());
}

}  // namespace detail

/// Each client draws class proportions p_i ~ Dirichlet(u * 1). The samples of
/// class k are dealt to clients in proportion to p_i[k] (largest remainder).
/// A client left with no samples takes one from the currently largest shard.
inline std::vector<ClientShard> dirichlet_partition(const Dataset& ds, const PartitionSpec& spec) {
  const auto* scheme = std::get_if<DirichletScheme>(&spec.scheme);
  require(scheme != nullptr, "dirichlet_partition: spec is not a Dirichlet scheme");
  require(ds.size() > 0, "dirichlet_partition: dataset is empty");
  if (!(scheme->concentration > 0.0)) throw ConfigError("dirichlet u must be > 0");
  if (spec.num_clients < 1) throw ConfigError("num_clients must be >= 1");
  const std::size_t n_clients = spec.num_clients;
  const std::size_t n_classes = ds.num_classes;

  Stream rng = Stream(spec.seed).derive(StreamTag::kPartition);
  std::vector<std::vector<double>> props(n_clients);
  for (std::size_t i = 0; i < n_clients; ++i)
    props[i] = rng.derive(i).dirichlet(n_classes, scheme->concentration);

  std::vector<ClientShard> shards(n_clients);
  for (std::size_t i = 0; i < n_clients; ++i) shards[i].client_id = i;

  auto by_class = detail::indices_by_class(ds);
  Stream shuffle_rng = rng.derive(n_clients + 1);
  std::vector<double> w(n_clients);
  for (std::size_t k = 0; k < n_classes; ++k) {
    auto& members = by_class[k];
    shuffle_rng.shuffle(members);
    for (std::size_t i = 0; i < n_clients; ++i) w[i] = props[i][k];
    const auto counts = detail::largest_remainder(members.size(), w);
    std::size_t pos = 0;
    for (std::size_t i = 0; i < n_clients; ++i) {
      shards[i].indices.insert(shards[i].indices.end(), members.begin() + static_cast<std::ptrdiff_t>(pos),
                               members.begin() + static_cast<std::ptrdiff_t>(pos + counts[i]));
      pos += counts[i];
    }
  }

  for (auto& s : shards) {
    if (!s.indices.empty()) continue;
    auto donor = std::max_element(shards.begin(), shards.end(), [](const auto& a, const auto& b) {
      return a.indices.size() < b.indices.size();
    });
    if (donor->indices.size() < 2) throw ConfigError("dirichlet_partition: fewer samples than clients");
    s.indices.push_back(donor->indices.back());
    donor->indices.pop_back();
  }
  detail::finalize_shards(shards);
  return shards;
}

/// Client i holds classes perm[(i*c + j) mod C] for j < c, where perm is a
/// seeded shuffle of the class ids. Each class is split evenly among the
/// clients that hold it.
inline std::vector<ClientShard> pathological_partition(const Dataset& ds, const PartitionSpec& spec) {
  const auto* scheme = std::get_if<PathologicalScheme>(&spec.scheme);
  require(scheme != nullptr, "pathological_partition: spec is not a pathological scheme");
  require(ds.size() > 0, "pathological_partition: dataset is empty");
  const std::size_t n_clients = spec.num_clients;
  const std::size_t n_classes = ds.num_classes;
  const std::size_t c = scheme->classes_per_client;
  if (n_clients < 1) throw ConfigError("num_clients must be >= 1");
  if (c < 1 || c > n_classes)
    throw ConfigError("pathological c must be in [1, num_classes] (c=" + std::to_string(c) + ")");
  if (n_clients * c < n_classes)
    throw ConfigError("pathological partition infeasible: N*c = " + std::to_string(n_clients * c) +
                      " < num_classes = " + std::to_string(n_classes));

  Stream rng = Stream(spec.seed).derive(StreamTag::kPartition);
  std::vector<std::size_t> perm(n_classes);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  rng.shuffle(perm);

  std::vector<std::vector<std::size_t>> holders(n_classes);
  for (std::size_t i = 0; i < n_clients; ++i)
    for (std::size_t j = 0; j < c; ++j) holders[perm[(i * c + j) % n_classes]].push_back(i);

  std::vector<ClientShard> shards(n_clients);
  for (std::size_t i = 0; i < n_clients; ++i) shards[i].client_id = i;
  auto by_class = detail::indices_by_class(ds);
  for (std::size_t k = 0; k < n_classes; ++k) {
    auto& members = by_class[k];
    const auto& h = holders[k];
    if (members.size() < h.size())
      throw ConfigError("pathological partition infeasible: class " + std::to_string(k) + " has " +
                        std::to_string(members.size()) + " samples for " + std::to_string(h.size()) +
                        " clients");
    rng.shuffle(members);
    const std::size_t base = members.size() / h.size(), extra = members.size() % h.size();
    std::size_t pos = 0;
    for (std::size_t r = 0; r < h.size(); ++r) {
      const std::size_t take = base + (r < extra ? 1 : 0);
      auto& dst = shards[h[r]].indices;
      dst.insert(dst.end(), members.begin() + static_cast<std::ptrdiff_t>(pos),
                 members.begin() + static_cast<std::ptrdiff_t>(pos + take));
      pos += take;
    }
  }
  detail::finalize_shards(shards);
  return shards;
}

inline std::vector<ClientShard> partition(const Dataset& ds, const PartitionSpec& spec) {
  if (std::holds_alternative<DirichletScheme>(spec.scheme)) return dirichlet_partition(ds, spec);
  return pathological_partition(ds, spec);
}

/// Parses `f1,...,fd,label` rows after a mandatory header line.
inline Dataset parse_csv(std::istream& in, const std::string& source = "<csv>") {
  auto fail = [&](std::size_t line, const std::string& msg) -> ParseError {
    return ParseError(source + ":" + std::to_string(line) + ": " + msg);
  };
  auto split = [](std::string_view s) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    for (;;) {
      auto pos = s.find(',', start);
      out.push_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
      if (pos == std::string_view::npos) break;
      start = pos + 1;
    }
    for (auto& f : out) {
      while (!f.empty() && (f.front() == ' ' || f.front() == '\t')) f.remove_prefix(1);
      while (!f.empty() && (f.back() == ' ' || f.back() == '\t' || f.back() == '\r')) f.remove_suffix(1);
    }
    return out;
  };

  std::string line;
  std::size_t line_no = 0;
  std::size_t columns = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    columns = split(line).size();
    break;
  }
  if (columns == 0) throw fail(line_no, "missing header");
  if (columns < 2) throw fail(line_no, "header needs at least one feature column and a label column");

  Dataset ds;
  ds.feature_dim = columns - 1;
  ds.samples.dim = ds.feature_dim;
  std::vector<double> row(ds.feature_dim);
  int max_label = -1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    auto fields = split(line);
    if (fields.size() != columns)
      throw fail(line_no, "expected " + std::to_string(columns) + " fields, got " + std::to_string(fields.size()));
    for (std::size_t j = 0; j < ds.feature_dim; ++j) {
      const auto f = fields[j];
      auto [p, ec] = std::from_chars(f.data(), f.data() + f.size(), row[j]);
      if (ec != std::errc() || p != f.data() + f.size() || !std::isfinite(row[j]))
        throw fail(line_no, "invalid number '" + std::string(f) + "' in column " + std::to_string(j + 1));
    }
    const auto lf = fields.back();
    int label = 0;
    auto [p, ec] = std::from_chars(lf.data(), lf.data() + lf.size(), label);
    if (ec != std::errc() || p != lf.data() + lf.size() || label < 0)
      throw fail(line_no, "label '" + std::string(lf) + "' is not a nonnegative integer");
    max_label = std::max(max_label, label);
    ds.samples.push_back(row, label);
  }
  if (ds.size() == 0) throw ParseError(source + ": no samples");
  ds.num_classes = static_cast<std::size_t>(max_label) + 1;
  return ds;
}

inline Dataset load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  return parse_csv(in, path);
}

}  // namespace fedopt
