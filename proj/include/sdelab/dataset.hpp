#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sdelab/tensor.hpp"

namespace sdelab {

enum class DatasetKind { two_moons, gauss_blobs, rings, tabular_csv };
const char* dataset_kind_name(DatasetKind k);
DatasetKind dataset_kind_from_name(const std::string& name);

struct DatasetSpec {
  DatasetKind kind = DatasetKind::two_moons;
  int n_universe = 256;    // samples entering the shadow-split protocol
  int n_test = 512;        // held out for accuracy evaluation
  int n_population = 256;  // held out for reference-based attacks
  double noise = 0.2;
  int n_classes = 2;       // gauss_blobs / rings class count
  std::uint64_t seed = 0;
  std::string csv_path;    // tabular_csv only
};

// All rows, with disjoint index sets for the three splits. Labels are
// balanced within +/-1 per split by construction.
struct Dataset {
  DatasetSpec spec;
  Tensor features;  // [n, d]
  std::vector<int> labels;
  std::vector<int> universe_idx;
  std::vector<int> test_idx;
  std::vector<int> population_idx;
  int n_classes = 2;

  int dim() const { return features.cols(); }
  Tensor gather(const std::vector<int>& idx) const;
  std::vector<int> gather_labels(const std::vector<int>& idx) const;
};

Dataset generate_dataset(const DatasetSpec& spec);

std::string dataset_to_json(const Dataset& data);
Dataset dataset_from_json(const std::string& text);

}  // namespace sdelab
