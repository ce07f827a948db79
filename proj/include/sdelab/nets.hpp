#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sdelab/solvers.hpp"
#include "sdelab/tape.hpp"

namespace sdelab {

enum class BlockKind { residual, node, nsde };
enum class Activation { relu, tanh, identity };

const char* block_kind_name(BlockKind k);
BlockKind block_kind_from_name(const std::string& name);
const char* activation_name(Activation a);
Activation activation_from_name(const std::string& name);

// Shape of the vector field f(h, t): an MLP whose hidden activations are
// 1-Lipschitz (relu or tanh). Time conditioning appends t as an extra input
// feature to the first layer.
struct DriftSpec {
  std::vector<int> hidden = {64, 64};
  Activation activation = Activation::tanh;
  bool time_conditioning = false;
};

struct BlockSpec {
  BlockKind kind = BlockKind::residual;
  DriftSpec drift;
};

// Declarative model: linear stem (input_dim -> state_dim), zero-padded
// augmentation, 1-3 state-preserving blocks, linear classifier head over the
// full final state (augmented coordinates included).
struct ModelSpec {
  int input_dim = 2;
  int state_dim = 16;
  int n_classes = 2;
  int augment_dim = 0;
  std::vector<BlockSpec> blocks;
  SolverConfig solver;
  std::uint64_t seed = 0;

  int state_width() const { return state_dim + augment_dim; }
  void validate() const;
};

struct ParamInfo {
  std::string name;
  std::vector<int> shape;
  int block = -1;  // -1 stem, -2 head, otherwise block index
};

std::vector<ParamInfo> param_layout(const ModelSpec& spec);

// Learnable weights, stored flat in layout order. `trainable` is the
// finetune mask; build_model marks everything trainable.
struct Parameters {
  std::vector<Tensor> values;
  std::vector<bool> trainable;

  std::size_t size() const { return values.size(); }
  int total_scalars() const;
};

// He-style init: weights ~ N(0, 2/fan_in) truncated at +/-2 sd, biases zero.
// Each tensor draws from its own stream mix_seed(seed, ordinal), so identical
// seeds give identical parameters and sub-model re-inits stay independent.
Parameters build_model(const ModelSpec& spec);

struct ForwardOptions {
  std::optional<std::uint64_t> noise_seed;  // overrides spec.solver.noise_seed
  bool record_trace = false;
};

// One forward pass and the tape that produced it. param_nodes align with
// Parameters::values; input and any noise enter as constants.
struct ForwardResult {
  Tape tape;
  std::vector<Tape::NodeId> param_nodes;
  Tape::NodeId input = -1;
  Tape::NodeId final_state = -1;
  Tape::NodeId logits = -1;
  Tape::NodeId per_sample_loss = -1;  // set when targets given
  Tape::NodeId mean_loss = -1;
  std::vector<SolveTrace> traces;     // one per node/nsde block
};

ForwardResult forward(const ModelSpec& spec, const Parameters& params,
                      const Tensor& x, const std::vector<int>* targets = nullptr,
                      const ForwardOptions& opts = {});

// Swaps the last block for a freshly initialized nsde block (drift and solver
// from nsde_drift / nsde_solver, init from `seed`). Earlier blocks' parameters
// are copied verbatim; the head is re-initialized. The returned mask marks
// the replaced block + head trainable unless full_finetune is set.
struct ReplacedModel {
  ModelSpec spec;
  Parameters params;
};

ReplacedModel replace_final_block(const ModelSpec& spec, const Parameters& params,
                                  const DriftSpec& nsde_drift,
                                  const SolverConfig& nsde_solver,
                                  std::uint64_t seed, bool full_finetune = false);

// Checkpoint round-trip. JSON with bit-exact f64 values.
std::string checkpoint_to_json(const ModelSpec& spec, const Parameters& params);
void checkpoint_from_json(const std::string& text, ModelSpec& spec, Parameters& params);

// Model-spec (de)serialization shared by checkpoints and experiment configs.
std::string model_spec_to_json(const ModelSpec& spec);
ModelSpec model_spec_from_json(const std::string& text);

}  // namespace sdelab
