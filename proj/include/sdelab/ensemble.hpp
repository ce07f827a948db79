#pragma once

#include <cstdint>
#include <vector>

#include "sdelab/attacks.hpp"
#include "sdelab/dataset.hpp"
#include "sdelab/train.hpp"

namespace sdelab {

// One trained shadow model plus everything the attacks need from it.
struct EnsembleMember {
  Parameters params;
  TrainRecord record;
  std::uint64_t seed;
};

struct EnsembleResult {
  ModelSpec spec;  // shared by all members (seeds differ per member)
  ShadowSplitPlan plan;
  std::vector<EnsembleMember> members;
  OutputTable universe;    // [model][universe sample]
  OutputTable population;  // [model][population sample]
};

// Trains plan.n_models models, model m on the universe samples marked IN for
// m. Per-model seeds derive as mix_seed(master_seed, m). Records responses of
// every model on every universe and population sample. Worker count comes
// from the SDELAB_WORKERS environment variable (default 1); parallelism never
// crosses a single model's training, so results do not depend on it.
EnsembleResult train_shadow_ensemble(const Dataset& data, const ModelSpec& spec,
                                     const TrainConfig& cfg,
                                     const PrivacyOptions* privacy,
                                     int n_models, std::uint64_t master_seed);

// Same protocol, but each member starts from a pre-trained base model whose
// final block is replaced by an nsde block and finetuned.
EnsembleResult finetune_shadow_ensemble(const Dataset& data,
                                        const EnsembleResult& base,
                                        const ModelSpec& base_spec,
                                        const DriftSpec& nsde_drift,
                                        const SolverConfig& nsde_solver,
                                        bool full_finetune, const TrainConfig& cfg,
                                        const PrivacyOptions& privacy,
                                        std::uint64_t master_seed);

int worker_count_from_env();

}  // namespace sdelab
