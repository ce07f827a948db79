#include "sdelab/dataset.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "sdelab/error.hpp"
#include "sdelab/rng.hpp"

namespace sdelab {

const char* dataset_kind_name(DatasetKind k) {
  switch (k) {
    case DatasetKind::two_moons: return "two_moons";
    case DatasetKind::gauss_blobs: return "gauss_blobs";
    case DatasetKind::rings: return "rings";
    case DatasetKind::tabular_csv: return "tabular_csv";
  }
  return "?";
}

DatasetKind dataset_kind_from_name(const std::string& name) {
  if (name == "two_moons") return DatasetKind::two_moons;
  if (name == "gauss_blobs") return DatasetKind::gauss_blobs;
  if (name == "rings") return DatasetKind::rings;
  if (name == "tabular_csv") return DatasetKind::tabular_csv;
  throw ConfigError("unknown dataset: " + name);
}

Tensor Dataset::gather(const std::vector<int>& idx) const {
  const int d = features.cols();
  Tensor out({static_cast<int>(idx.size()), d});
  for (std::size_t r = 0; r < idx.size(); ++r)
    for (int c = 0; c < d; ++c) out.at(static_cast<int>(r), c) = features.at(idx[r], c);
  return out;
}

std::vector<int> Dataset::gather_labels(const std::vector<int>& idx) const {
  std::vector<int> out;
  out.reserve(idx.size());
  for (int i : idx) out.push_back(labels[static_cast<std::size_t>(i)]);
  return out;
}

namespace {

// Generative formulas. Every point is a fresh draw, so the three splits are
// disjoint by construction.
//
//   two_moons:  class 0 at (cos a, sin a), class 1 at (1 - cos a, 1/2 - sin a),
//               a ~ U[0, pi], plus N(0, noise^2) jitter per coordinate.
//   gauss_blobs: class c centered at 3*(cos(2 pi c/k), sin(2 pi c/k)) with
//               isotropic sd = noise.
//   rings:      class c at radius ~ N(1 + c, noise), angle ~ U[0, 2 pi).
std::pair<std::vector<double>, int> draw_point(const DatasetSpec& spec, int cls,
                                               Rng& rng) {
  switch (spec.kind) {
    case DatasetKind::two_moons: {
      const double a = rng.uniform(0.0, M_PI);
      double x, y;
      if (cls == 0) {
        x = std::cos(a);
        y = std::sin(a);
      } else {
        x = 1.0 - std::cos(a);
        y = 0.5 - std::sin(a);
      }
      return {{x + rng.normal(0.0, spec.noise), y + rng.normal(0.0, spec.noise)}, cls};
    }
    case DatasetKind::gauss_blobs: {
      const double angle = 2.0 * M_PI * cls / spec.n_classes;
      return {{3.0 * std::cos(angle) + rng.normal(0.0, spec.noise),
               3.0 * std::sin(angle) + rng.normal(0.0, spec.noise)},
              cls};
    }
    case DatasetKind::rings: {
      const double r = rng.normal(1.0 + cls, spec.noise);
      const double angle = rng.uniform(0.0, 2.0 * M_PI);
      return {{r * std::cos(angle), r * std::sin(angle)}, cls};
    }
    case DatasetKind::tabular_csv:
      throw ConfigError("tabular_csv rows are loaded, not drawn");
  }
  throw ConfigError("draw_point: unreachable");
}

Dataset load_csv(const DatasetSpec& spec) {
  std::ifstream in(spec.csv_path);
  if (!in) throw ConfigError("cannot open csv: " + spec.csv_path);
  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
  std::string line;
  int width = -1;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::vector<double> vals;
    std::string cell;
    while (std::getline(ss, cell, ',')) vals.push_back(std::stod(cell));
    if (vals.size() < 2) throw ConfigError("csv rows need features plus a label");
    if (width < 0) width = static_cast<int>(vals.size());
    if (static_cast<int>(vals.size()) != width)
      throw ConfigError("csv: inconsistent column count");
    labels.push_back(static_cast<int>(std::lround(vals.back())));
    vals.pop_back();
    rows.push_back(std::move(vals));
  }
  const int total = spec.n_universe + spec.n_test + spec.n_population;
  if (static_cast<int>(rows.size()) < total)
    throw ConfigError("csv: " + std::to_string(rows.size()) + " rows, need " +
                      std::to_string(total));

  std::vector<int> order(rows.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  Rng rng(spec.seed);
  rng.shuffle(order);

  Dataset d;
  d.spec = spec;
  const int dim = width - 1;
  d.features = Tensor({total, dim});
  d.labels.resize(static_cast<std::size_t>(total));
  int max_label = 0;
  for (int i = 0; i < total; ++i) {
    const auto& row = rows[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
    for (int c = 0; c < dim; ++c) d.features.at(i, c) = row[static_cast<std::size_t>(c)];
    d.labels[static_cast<std::size_t>(i)] = labels[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
    max_label = std::max(max_label, d.labels[static_cast<std::size_t>(i)]);
  }
  d.n_classes = max_label + 1;
  for (int i = 0; i < spec.n_universe; ++i) d.universe_idx.push_back(i);
  for (int i = 0; i < spec.n_test; ++i) d.test_idx.push_back(spec.n_universe + i);
  for (int i = 0; i < spec.n_population; ++i)
    d.population_idx.push_back(spec.n_universe + spec.n_test + i);
  return d;
}

}  // namespace

Dataset generate_dataset(const DatasetSpec& spec) {
  if (spec.n_universe < 2 || spec.n_test < 2 || spec.n_population < 0)
    throw ConfigError("dataset: splits too small");
  if (spec.kind == DatasetKind::tabular_csv) return load_csv(spec);
  if (spec.n_classes < 2) throw ConfigError("dataset: need at least 2 classes");
  const int classes = spec.kind == DatasetKind::two_moons ? 2 : spec.n_classes;

  Dataset d;
  d.spec = spec;
  d.n_classes = classes;
  const int total = spec.n_universe + spec.n_test + spec.n_population;
  d.features = Tensor({total, 2});
  d.labels.resize(static_cast<std::size_t>(total));
  Rng rng(spec.seed);

  // Classes rotate within each split, keeping counts balanced within +/-1.
  int row = 0;
  auto fill_split = [&](int count, std::vector<int>& idx) {
    for (int i = 0; i < count; ++i, ++row) {
      const auto [xy, cls] = draw_point(spec, i % classes, rng);
      d.features.at(row, 0) = xy[0];
      d.features.at(row, 1) = xy[1];
      d.labels[static_cast<std::size_t>(row)] = cls;
      idx.push_back(row);
    }
  };
  fill_split(spec.n_universe, d.universe_idx);
  fill_split(spec.n_test, d.test_idx);
  fill_split(spec.n_population, d.population_idx);
  return d;
}

std::string dataset_to_json(const Dataset& data) {
  nlohmann::json j;
  j["kind"] = dataset_kind_name(data.spec.kind);
  j["noise"] = data.spec.noise;
  j["seed"] = data.spec.seed;
  j["n_classes"] = data.n_classes;
  j["n_universe"] = data.spec.n_universe;
  j["n_test"] = data.spec.n_test;
  j["n_population"] = data.spec.n_population;
  j["dim"] = data.features.cols();
  j["features"] = data.features.raw();
  j["labels"] = data.labels;
  return j.dump();
}

Dataset dataset_from_json(const std::string& text) {
  const nlohmann::json j = nlohmann::json::parse(text);
  Dataset d;
  d.spec.kind = dataset_kind_from_name(j.at("kind").get<std::string>());
  d.spec.noise = j.at("noise").get<double>();
  d.spec.seed = j.at("seed").get<std::uint64_t>();
  d.spec.n_universe = j.at("n_universe").get<int>();
  d.spec.n_test = j.at("n_test").get<int>();
  d.spec.n_population = j.at("n_population").get<int>();
  d.n_classes = j.at("n_classes").get<int>();
  d.spec.n_classes = d.n_classes;
  const int dim = j.at("dim").get<int>();
  std::vector<double> feats = j.at("features").get<std::vector<double>>();
  const int total = static_cast<int>(feats.size()) / dim;
  d.features = Tensor({total, dim}, std::move(feats));
  d.labels = j.at("labels").get<std::vector<int>>();
  for (int i = 0; i < d.spec.n_universe; ++i) d.universe_idx.push_back(i);
  for (int i = 0; i < d.spec.n_test; ++i) d.test_idx.push_back(d.spec.n_universe + i);
  for (int i = 0; i < d.spec.n_population; ++i)
    d.population_idx.push_back(d.spec.n_universe + d.spec.n_test + i);
  return d;
}

}  // namespace sdelab
