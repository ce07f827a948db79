#include "sdelab/nets.hpp"

#include <cmath>

#include "json.hpp"
#include "sdelab/error.hpp"
#include "sdelab/rng.hpp"

namespace sdelab {

const char* block_kind_name(BlockKind k) {
  switch (k) {
    case BlockKind::residual: return "residual";
    case BlockKind::node: return "node";
    case BlockKind::nsde: return "nsde";
  }
  return "?";
}

BlockKind block_kind_from_name(const std::string& name) {
  if (name == "residual") return BlockKind::residual;
  if (name == "node") return BlockKind::node;
  if (name == "nsde") return BlockKind::nsde;
  throw ConfigError("unknown block kind: " + name);
}

const char* activation_name(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    case Activation::identity: return "identity";
  }
  return "?";
}

Activation activation_from_name(const std::string& name) {
  if (name == "relu") return Activation::relu;
  if (name == "tanh") return Activation::tanh;
  if (name == "identity") return Activation::identity;
  throw ConfigError("unknown activation: " + name);
}

void ModelSpec::validate() const {
  if (input_dim <= 0) throw ConfigError("model: input_dim must be positive");
  if (state_dim <= 0) throw ConfigError("model: state_dim must be positive");
  if (n_classes < 2) throw ConfigError("model: n_classes must be at least 2");
  if (augment_dim < 0) throw ConfigError("model: augment_dim must be non-negative");
  if (blocks.empty() || blocks.size() > 3)
    throw ConfigError("model: block count must be in {1,2,3}, got " +
                      std::to_string(blocks.size()));
  for (const BlockSpec& b : blocks) {
    for (int w : b.drift.hidden)
      if (w <= 0) throw ConfigError("model: drift hidden widths must be positive");
    if (b.kind == BlockKind::residual && b.drift.time_conditioning)
      throw ConfigError("model: residual blocks cannot be time-conditioned");
    if (b.kind == BlockKind::residual && augment_dim > 0)
      throw ConfigError("model: augment_dim requires node or nsde blocks only");
  }
  solver.validate();
}

std::vector<ParamInfo> param_layout(const ModelSpec& spec) {
  spec.validate();
  std::vector<ParamInfo> layout;
  const int width = spec.state_width();
  layout.push_back({"stem.w", {spec.input_dim, spec.state_dim}, -1});
  layout.push_back({"stem.b", {spec.state_dim}, -1});
  for (std::size_t b = 0; b < spec.blocks.size(); ++b) {
    const DriftSpec& d = spec.blocks[b].drift;
    std::vector<int> widths;
    widths.push_back(width + (d.time_conditioning ? 1 : 0));
    for (int h : d.hidden) widths.push_back(h);
    widths.push_back(width);
    const std::string prefix = "block" + std::to_string(b) + ".layer";
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
      layout.push_back({prefix + std::to_string(l) + ".w",
                        {widths[l], widths[l + 1]}, static_cast<int>(b)});
      layout.push_back({prefix + std::to_string(l) + ".b", {widths[l + 1]},
                        static_cast<int>(b)});
    }
  }
  layout.push_back({"head.w", {width, spec.n_classes}, -2});
  layout.push_back({"head.b", {spec.n_classes}, -2});
  return layout;
}

int Parameters::total_scalars() const {
  int n = 0;
  for (const Tensor& t : values) n += t.numel();
  return n;
}

namespace {

Tensor init_tensor(const ParamInfo& info, std::uint64_t seed, std::uint64_t ordinal) {
  Tensor t(info.shape);
  if (info.shape.size() == 1) return t;  // biases start at zero
  Rng rng(mix_seed(seed, ordinal));
  const double sd = std::sqrt(2.0 / info.shape[0]);
  for (int i = 0; i < t.numel(); ++i) {
    double z;
    do {
      z = rng.normal();
    } while (std::abs(z) > 2.0);
    t[i] = z * sd;
  }
  return t;
}

}  // namespace

Parameters build_model(const ModelSpec& spec) {
  const auto layout = param_layout(spec);
  Parameters p;
  p.values.reserve(layout.size());
  for (std::size_t i = 0; i < layout.size(); ++i)
    p.values.push_back(init_tensor(layout[i], spec.seed, i));
  p.trainable.assign(layout.size(), true);
  return p;
}

namespace {

Tape::NodeId apply_activation(Tape& tape, Tape::NodeId x, Activation a) {
  switch (a) {
    case Activation::relu: return tape.relu(x);
    case Activation::tanh: return tape.tanh(x);
    case Activation::identity: return x;
  }
  return x;
}

// Runs the drift MLP for one block. `first_param` indexes the block's first
// weight tensor inside param_nodes.
Tape::NodeId drift_eval(Tape& tape, const DriftSpec& d,
                        const std::vector<Tape::NodeId>& param_nodes,
                        std::size_t first_param, std::size_t n_layers,
                        Tape::NodeId h, std::optional<double> t) {
  Tape::NodeId x = h;
  if (d.time_conditioning) {
    const int rows = tape.value(h).rows();
    x = tape.concat_last(x, tape.constant(Tensor::full({rows, 1}, t.value())));
  }
  for (std::size_t l = 0; l < n_layers; ++l) {
    x = tape.matmul(x, param_nodes[first_param + 2 * l]);
    x = tape.add(x, param_nodes[first_param + 2 * l + 1]);
    if (l + 1 < n_layers) x = apply_activation(tape, x, d.activation);
  }
  return x;
}

}  // namespace

ForwardResult forward(const ModelSpec& spec, const Parameters& params,
                      const Tensor& x, const std::vector<int>* targets,
                      const ForwardOptions& opts) {
  spec.validate();
  const auto layout = param_layout(spec);
  if (params.values.size() != layout.size())
    throw ConfigError("forward: parameter count does not match spec layout");
  if (x.rank() != 2 || x.cols() != spec.input_dim)
    throw ShapeError("forward", x.shape(), {x.rank() == 2 ? x.rows() : 0, spec.input_dim});

  ForwardResult res;
  Tape& tape = res.tape;
  for (const Tensor& v : params.values) res.param_nodes.push_back(tape.leaf(v));
  res.input = tape.constant(x);

  const int batch = x.rows();
  Tape::NodeId h = tape.add(tape.matmul(res.input, res.param_nodes[0]), res.param_nodes[1]);
  if (spec.augment_dim > 0)
    h = tape.concat_last(h, tape.constant(Tensor::zeros({batch, spec.augment_dim})));

  const std::uint64_t noise_seed =
      opts.noise_seed.value_or(spec.solver.noise_seed);

  std::size_t param_cursor = 2;
  for (std::size_t b = 0; b < spec.blocks.size(); ++b) {
    const BlockSpec& blk = spec.blocks[b];
    const std::size_t n_layers = blk.drift.hidden.size() + 1;
    const std::size_t first = param_cursor;
    param_cursor += 2 * n_layers;

    DriftFn f = [&, first, n_layers](Tape& tp, Tape::NodeId state, double t) {
      return drift_eval(tp, blk.drift, res.param_nodes, first, n_layers, state, t);
    };

    switch (blk.kind) {
      case BlockKind::residual:
        h = tape.add(h, drift_eval(tape, blk.drift, res.param_nodes, first,
                                   n_layers, h, std::nullopt));
        break;
      case BlockKind::node: {
        SolverConfig cfg = spec.solver;
        cfg.record_trace = opts.record_trace;
        SolveResult s = ode_solve(tape, f, h, cfg);
        h = s.final_state;
        res.traces.push_back(std::move(s.trace));
        break;
      }
      case BlockKind::nsde: {
        SolverConfig cfg = spec.solver;
        cfg.record_trace = opts.record_trace;
        // Distinct noise stream per block.
        cfg.noise_seed = mix_seed(noise_seed, static_cast<std::uint64_t>(b));
        SolveResult s = sde_solve(tape, f, cfg.sigma(), h, cfg);
        h = s.final_state;
        res.traces.push_back(std::move(s.trace));
        break;
      }
    }
  }

  res.final_state = h;
  res.logits = tape.add(tape.matmul(h, res.param_nodes[param_cursor]),
                        res.param_nodes[param_cursor + 1]);
  if (targets) {
    res.per_sample_loss = tape.cross_entropy_with_logits(res.logits, *targets);
    res.mean_loss = tape.mean(res.per_sample_loss);
  }
  return res;
}

ReplacedModel replace_final_block(const ModelSpec& spec, const Parameters& params,
                                  const DriftSpec& nsde_drift,
                                  const SolverConfig& nsde_solver,
                                  std::uint64_t seed, bool full_finetune) {
  spec.validate();
  if (params.values.size() != param_layout(spec).size())
    throw ConfigError("replace_final_block: parameter count mismatch");

  ReplacedModel out;
  out.spec = spec;
  out.spec.blocks.back() = BlockSpec{BlockKind::nsde, nsde_drift};
  out.spec.solver = nsde_solver;
  out.spec.seed = seed;
  out.spec.validate();

  const auto new_layout = param_layout(out.spec);
  const auto old_layout = param_layout(spec);
  const int last_block = static_cast<int>(spec.blocks.size()) - 1;

  out.params.values.reserve(new_layout.size());
  out.params.trainable.reserve(new_layout.size());
  // Stem and earlier blocks are copied verbatim from the old layout, which
  // shares their ordering and shapes; the new block and the head re-init.
  std::size_t old_i = 0;
  for (std::size_t i = 0; i < new_layout.size(); ++i) {
    const ParamInfo& info = new_layout[i];
    const bool replaced = info.block == last_block || info.block == -2;
    if (replaced) {
      out.params.values.push_back(init_tensor(info, seed, i));
      out.params.trainable.push_back(true);
    } else {
      while (old_i < old_layout.size() && old_layout[old_i].name != info.name) ++old_i;
      if (old_i >= old_layout.size())
        throw ConfigError("replace_final_block: dimension mismatch at " + info.name);
      out.params.values.push_back(params.values[old_i]);
      out.params.trainable.push_back(full_finetune);
      ++old_i;
    }
  }
  return out;
}

namespace {

nlohmann::json drift_to_json(const DriftSpec& d) {
  return {{"hidden", d.hidden},
          {"activation", activation_name(d.activation)},
          {"time_conditioning", d.time_conditioning}};
}

DriftSpec drift_from_json(const nlohmann::json& j) {
  DriftSpec d;
  d.hidden = j.at("hidden").get<std::vector<int>>();
  d.activation = activation_from_name(j.at("activation").get<std::string>());
  d.time_conditioning = j.at("time_conditioning").get<bool>();
  return d;
}

nlohmann::json spec_to_json_obj(const ModelSpec& spec) {
  nlohmann::json blocks = nlohmann::json::array();
  for (const BlockSpec& b : spec.blocks)
    blocks.push_back({{"kind", block_kind_name(b.kind)}, {"drift", drift_to_json(b.drift)}});
  return {{"input_dim", spec.input_dim},
          {"state_dim", spec.state_dim},
          {"n_classes", spec.n_classes},
          {"augment_dim", spec.augment_dim},
          {"blocks", std::move(blocks)},
          {"solver", nlohmann::json::parse(solver_config_to_json(spec.solver))},
          {"seed", spec.seed}};
}

ModelSpec spec_from_json_obj(const nlohmann::json& j) {
  ModelSpec spec;
  spec.input_dim = j.at("input_dim").get<int>();
  spec.state_dim = j.at("state_dim").get<int>();
  spec.n_classes = j.at("n_classes").get<int>();
  spec.augment_dim = j.value("augment_dim", 0);
  spec.solver = solver_config_from_json(j.at("solver").dump());
  spec.seed = j.value("seed", std::uint64_t{0});

  DriftSpec default_drift;
  if (j.contains("drift")) default_drift = drift_from_json(j.at("drift"));

  if (j.contains("blocks")) {
    for (const auto& bj : j.at("blocks")) {
      BlockSpec b;
      b.kind = block_kind_from_name(bj.at("kind").get<std::string>());
      b.drift = bj.contains("drift") ? drift_from_json(bj.at("drift")) : default_drift;
      spec.blocks.push_back(std::move(b));
    }
  } else {
    // Shorthand: n_blocks + block_kind expand to uniform blocks.
    const int n = j.at("n_blocks").get<int>();
    BlockSpec b;
    b.kind = block_kind_from_name(j.at("block_kind").get<std::string>());
    b.drift = default_drift;
    spec.blocks.assign(static_cast<std::size_t>(n), b);
  }
  spec.validate();
  return spec;
}

}  // namespace

std::string model_spec_to_json(const ModelSpec& spec) {
  return spec_to_json_obj(spec).dump();
}

ModelSpec model_spec_from_json(const std::string& text) {
  return spec_from_json_obj(nlohmann::json::parse(text));
}

std::string checkpoint_to_json(const ModelSpec& spec, const Parameters& params) {
  nlohmann::json j;
  j["format"] = "sdelab-checkpoint";
  j["version"] = 1;
  j["spec"] = spec_to_json_obj(spec);
  const auto layout = param_layout(spec);
  nlohmann::json tensors = nlohmann::json::array();
  for (std::size_t i = 0; i < params.values.size(); ++i)
    tensors.push_back({{"name", layout[i].name},
                       {"shape", params.values[i].shape()},
                       {"data", params.values[i].raw()},
                       {"trainable", static_cast<bool>(params.trainable[i])}});
  j["tensors"] = std::move(tensors);
  return j.dump();
}

void checkpoint_from_json(const std::string& text, ModelSpec& spec, Parameters& params) {
  const nlohmann::json j = nlohmann::json::parse(text);
  if (j.value("format", "") != "sdelab-checkpoint")
    throw ConfigError("checkpoint: unrecognized format");
  spec = spec_from_json_obj(j.at("spec"));
  const auto layout = param_layout(spec);
  const auto& tensors = j.at("tensors");
  if (tensors.size() != layout.size())
    throw ConfigError("checkpoint: tensor count does not match spec");
  params.values.clear();
  params.trainable.clear();
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto& tj = tensors[i];
    if (tj.at("name").get<std::string>() != layout[i].name)
      throw ConfigError("checkpoint: tensor order mismatch at " + layout[i].name);
    params.values.emplace_back(tj.at("shape").get<std::vector<int>>(),
                               tj.at("data").get<std::vector<double>>());
    params.trainable.push_back(tj.value("trainable", true));
  }
}

}  // namespace sdelab
