#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "sdelab/dataset.hpp"
#include "sdelab/ensemble.hpp"

namespace sdelab {

// One entry in the experiment grid: either a model trained from scratch or a
// replace-then-finetune derivation of another entry's ensemble.
struct ModelEntry {
  std::string label;
  bool replace_finetune = false;
  std::string base_label;  // replace_finetune only
  ModelSpec spec;          // scratch only
  DriftSpec nsde_drift;    // replace_finetune only
  SolverConfig nsde_solver;
  bool full_finetune = false;
  TrainConfig train;
  bool has_privacy = false;
  PrivacyOptions privacy;
};

struct ExperimentConfig {
  std::string name;
  std::uint64_t master_seed = 0;
  DatasetSpec dataset;
  int n_models = 16;
  std::vector<ModelEntry> models;
  std::vector<AttackKind> attacks;
  std::vector<double> fpr_targets = {0.001, 0.01};

  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig from_file(const std::string& path);
  nlohmann::json resolved_json() const;  // every field explicit
};

struct ExperimentFailure {
  std::string model;
  std::string error;
};

struct ExperimentOutcome {
  std::vector<nlohmann::json> records;  // one per (model, attack), in grid order
  std::vector<ExperimentFailure> failures;
  nlohmann::json timings;  // wall-clock sidecar, not part of records

  bool ok() const { return failures.empty(); }
};

// Executes the declared grid. When output_dir is non-empty, writes
// records.jsonl, roc/<model>_<attack>_fold<k>.csv, summary.md, timings.json
// and (on partial failure) failures.json under it.
ExperimentOutcome run_experiment(const ExperimentConfig& cfg,
                                 const std::string& output_dir);

// Markdown summary from experiment records (one table row per model+attack).
std::string summary_markdown(const std::vector<nlohmann::json>& records);

// Serialize one ROC curve as "fpr,tpr" CSV with 17-significant-digit reals.
std::string roc_csv(const RocCurve& roc);

// Full training record (per-epoch curve, gap, epsilon ledger) as JSON.
nlohmann::json train_record_to_json(const TrainRecord& rec);

// TrainConfig / PrivacyOptions JSON used by both configs and the CLI.
nlohmann::json train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);
nlohmann::json privacy_options_to_json(const PrivacyOptions& p);
PrivacyOptions privacy_options_from_json(const nlohmann::json& j);
nlohmann::json dataset_spec_to_json(const DatasetSpec& spec);
DatasetSpec dataset_spec_from_json(const nlohmann::json& j);

// FNV-1a 64 over a canonical JSON dump, hex-encoded; used for config hashes.
std::string config_hash(const nlohmann::json& j);

}  // namespace sdelab
