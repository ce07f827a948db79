#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sdelab/attacks.hpp"
#include "sdelab/nets.hpp"
#include "sdelab/privacy.hpp"
#include "sdelab/rng.hpp"
#include "sdelab/tensor.hpp"

namespace sdelab {

enum class DefenseKind { none, l1, l2, early_stop, dp_sgd };
const char* defense_kind_name(DefenseKind k);
DefenseKind defense_kind_from_name(const std::string& name);

struct DefenseConfig {
  DefenseKind kind = DefenseKind::none;
  double lambda = 1e-5;          // l1 / l2 penalty weight
  int patience = 10;             // early_stop: evals without improvement
  double clip = 1.0;             // dp_sgd: per-example gradient norm bound C
  double noise_multiplier = 1.0; // dp_sgd: z; noise sd = z*C
  double target_epsilon = 8.0;   // dp_sgd: stop before exceeding this
  double delta = 1e-5;           // dp_sgd accounting
};

struct TrainConfig {
  int epochs = 100;
  int batch_size = 32;
  double lr = 0.1;
  double momentum = 0.9;
  DefenseConfig defense;
  std::uint64_t seed = 0;
  int eval_every = 1;

  void validate(int train_size) const;
};

// Accounting options for diffusion-trained models.
struct PrivacyOptions {
  AccountantMethod method = AccountantMethod::rdp;
  double delta = 1e-5;
  double delta_prime = 1e-5;
  // Declared Lipschitz bound on the drift; 0 means estimate each epoch and
  // use the running maximum.
  double lipschitz = 0.0;
  // One accountant step per epoch of disjoint mini-batches by default;
  // set to count every iteration instead (conservative).
  bool per_iteration = false;
};

struct EpochStat {
  int epoch;
  double train_loss, train_acc;
  double test_loss, test_acc;
  double epsilon;  // cumulative privacy spend after this epoch (0 if none)
};

struct TrainRecord {
  std::vector<EpochStat> curve;
  int epochs_run = 0;
  bool early_stopped = false;
  double best_train_acc = 0.0;
  double matching_test_acc = 0.0;
  double final_gap = 0.0;  // best train accuracy minus its test accuracy
  std::vector<double> epsilon_ledger;
  double final_epsilon = 0.0;
  double delta_total = 0.0;
  bool no_formal_guarantee = false;
  double lipschitz_declared = 0.0;
  double lipschitz_estimate_max = 0.0;
  double wall_clock_sec = 0.0;
};

struct TrainResult {
  Parameters params;
  TrainRecord record;
};

struct EvalStats {
  double loss;
  double accuracy;
};

EvalStats evaluate(const ModelSpec& spec, const Parameters& params, const Tensor& x,
                   const std::vector<int>& y, std::uint64_t noise_seed);

// Recorded responses for attack evaluation: per-sample loss, softmax
// confidences, true-class probability and its logit.
std::vector<ModelQuery> collect_outputs(const ModelSpec& spec, const Parameters& params,
                                        const Tensor& x, const std::vector<int>& y,
                                        std::uint64_t noise_seed);

// Mini-batch SGD with momentum and the configured defense. Batch order and
// all noise derive from cfg.seed. Only parameters marked trainable move.
TrainResult train(const ModelSpec& spec, Parameters params, const Tensor& x_train,
                  const std::vector<int>& y_train, const Tensor& x_test,
                  const std::vector<int>& y_test, const TrainConfig& cfg);

// Clip each per-example gradient to norm <= clip, sum, add
// N(0, (noise_multiplier*clip)^2 I), divide by the batch size.
std::vector<double> dp_sgd_step(const std::vector<std::vector<double>>& per_example_grads,
                                double clip, double noise_multiplier, Rng& rng);

// Training where privacy comes from the diffusion term: plain backprop, with
// the accountant advanced as configured. Requires a stochastic solver; a
// zero sigma yields a record flagged no_formal_guarantee.
TrainResult train_nsde_private(const ModelSpec& spec, Parameters params,
                               const Tensor& x_train, const std::vector<int>& y_train,
                               const Tensor& x_test, const std::vector<int>& y_test,
                               const TrainConfig& cfg, const PrivacyOptions& privacy);

struct FinetuneResult {
  ModelSpec spec;
  Parameters params;
  TrainRecord record;
};

// Swap the final block for a fresh nsde block and finetune only the masked
// parameters; the accountant counts finetune iterations only.
FinetuneResult replace_then_finetune(const ModelSpec& base_spec,
                                     const Parameters& base_params,
                                     const DriftSpec& nsde_drift,
                                     const SolverConfig& nsde_solver,
                                     std::uint64_t replace_seed, bool full_finetune,
                                     const Tensor& x_train, const std::vector<int>& y_train,
                                     const Tensor& x_test, const std::vector<int>& y_test,
                                     const TrainConfig& cfg, const PrivacyOptions& privacy);

}  // namespace sdelab
