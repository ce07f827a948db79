#include "sdelab/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>

#include "sdelab/error.hpp"

namespace sdelab {

const char* defense_kind_name(DefenseKind k) {
  switch (k) {
    case DefenseKind::none: return "none";
    case DefenseKind::l1: return "l1";
    case DefenseKind::l2: return "l2";
    case DefenseKind::early_stop: return "early_stop";
    case DefenseKind::dp_sgd: return "dp_sgd";
  }
  return "?";
}

DefenseKind defense_kind_from_name(const std::string& name) {
  if (name == "none") return DefenseKind::none;
  if (name == "l1") return DefenseKind::l1;
  if (name == "l2") return DefenseKind::l2;
  if (name == "early_stop") return DefenseKind::early_stop;
  if (name == "dp_sgd") return DefenseKind::dp_sgd;
  throw ConfigError("unknown defense: " + name);
}

void TrainConfig::validate(int train_size) const {
  if (epochs < 0) throw ConfigError("train: epochs must be non-negative");
  if (batch_size < 1 || batch_size > train_size)
    throw ConfigError("train: batch size must lie in [1, train size]");
  if (lr <= 0.0) throw ConfigError("train: learning rate must be positive");
  if (momentum < 0.0 || momentum >= 1.0)
    throw ConfigError("train: momentum must lie in [0, 1)");
  if (eval_every < 1) throw ConfigError("train: eval cadence must be positive");
  if (defense.kind == DefenseKind::l1 || defense.kind == DefenseKind::l2) {
    if (defense.lambda < 0.0) throw ConfigError("train: lambda must be non-negative");
  }
  if (defense.kind == DefenseKind::early_stop && defense.patience < 1)
    throw ConfigError("train: early-stop patience must be positive");
  if (defense.kind == DefenseKind::dp_sgd && defense.clip <= 0.0)
    throw ConfigError("train: dp_sgd clip must be positive");
}

namespace {

constexpr std::uint64_t kBatchTag = 0xb47c5eed;
constexpr std::uint64_t kEvalTag = 0xe7a15eed;

// Forward + loss with the configured defense penalty appended to the tape.
struct LossGraph {
  ForwardResult fwd;
  Tape::NodeId loss;
};

LossGraph build_loss(const ModelSpec& spec, const Parameters& params, const Tensor& x,
                     const std::vector<int>& y, std::uint64_t noise_seed,
                     const DefenseConfig& defense) {
  ForwardOptions opts;
  opts.noise_seed = noise_seed;
  LossGraph g{forward(spec, params, x, &y, opts), -1};
  g.loss = g.fwd.mean_loss;
  Tape& tape = g.fwd.tape;
  if (defense.kind == DefenseKind::l2 && defense.lambda > 0.0) {
    Tape::NodeId pen = -1;
    for (Tape::NodeId p : g.fwd.param_nodes) {
      Tape::NodeId sq = tape.squared_norm(p);
      pen = pen < 0 ? sq : tape.add(pen, sq);
    }
    g.loss = tape.add(g.loss, tape.scalar_mul(defense.lambda, pen));
  } else if (defense.kind == DefenseKind::l1 && defense.lambda > 0.0) {
    // |w| = relu(w) + relu(-w); shares the relu-at-zero subgradient.
    Tape::NodeId pen = -1;
    for (Tape::NodeId p : g.fwd.param_nodes) {
      Tape::NodeId absw = tape.sum(tape.add(tape.relu(p), tape.relu(tape.scalar_mul(-1.0, p))));
      pen = pen < 0 ? absw : tape.add(pen, absw);
    }
    g.loss = tape.add(g.loss, tape.scalar_mul(defense.lambda, pen));
  }
  return g;
}

double accuracy_from_logits(const Tensor& logits, const std::vector<int>& y) {
  int correct = 0;
  const int classes = logits.cols();
  for (int r = 0; r < logits.rows(); ++r) {
    int best = 0;
    for (int c = 1; c < classes; ++c)
      if (logits.at(r, c) > logits.at(r, best)) best = c;
    if (best == y[static_cast<std::size_t>(r)]) ++correct;
  }
  return static_cast<double>(correct) / logits.rows();
}

struct Optimizer {
  double lr, momentum;
  std::vector<Tensor> velocity;

  explicit Optimizer(const Parameters& params, double lr, double momentum)
      : lr(lr), momentum(momentum) {
    velocity.reserve(params.values.size());
    for (const Tensor& t : params.values) velocity.emplace_back(t.shape());
  }

  void apply(Parameters& params, const std::vector<Tape::NodeId>& nodes,
             const Gradients& grads) {
    for (std::size_t i = 0; i < params.values.size(); ++i) {
      if (!params.trainable[i]) continue;
      const Tensor& g = grads.at(nodes[i]);
      Tensor& v = velocity[i];
      Tensor& w = params.values[i];
      for (int j = 0; j < w.numel(); ++j) {
        v[j] = momentum * v[j] + g[j];
        w[j] -= lr * v[j];
      }
    }
  }

  void apply_flat(Parameters& params, const std::vector<double>& flat) {
    std::size_t cursor = 0;
    for (std::size_t i = 0; i < params.values.size(); ++i) {
      if (!params.trainable[i]) continue;
      Tensor& v = velocity[i];
      Tensor& w = params.values[i];
      for (int j = 0; j < w.numel(); ++j, ++cursor) {
        v[j] = momentum * v[j] + flat[cursor];
        w[j] -= lr * v[j];
      }
    }
  }
};

std::vector<double> flatten_trainable_grads(const Parameters& params,
                                            const std::vector<Tape::NodeId>& nodes,
                                            const Gradients& grads) {
  std::vector<double> flat;
  for (std::size_t i = 0; i < params.values.size(); ++i) {
    if (!params.trainable[i]) continue;
    const Tensor& g = grads.at(nodes[i]);
    flat.insert(flat.end(), g.raw().begin(), g.raw().end());
  }
  return flat;
}

struct LedgerConfig {
  bool active = false;
  AccountantMethod method = AccountantMethod::rdp;
  double sigma = 0.0;
  double delta = 0.0;
  double delta_prime = 0.0;
  double time_horizon = 1.0;
  double declared_lipschitz = 0.0;
  bool per_iteration = false;
};

double ledger_epsilon(const LedgerConfig& lc, int steps, double lipschitz_max) {
  const double L = lc.declared_lipschitz > 0.0 ? lc.declared_lipschitz : lipschitz_max;
  const double sigma_rel = lc.sigma / (lc.time_horizon * L);
  switch (lc.method) {
    case AccountantMethod::strong_composition: {
      const double eps_step = std::sqrt(2.0 * std::log(1.25 / lc.delta)) / sigma_rel;
      return account_strong_composition(steps, eps_step, lc.delta, lc.delta_prime).epsilon;
    }
    case AccountantMethod::rdp:
      return account_rdp(steps, sigma_rel, lc.delta);
    case AccountantMethod::gdp:
      return account_gdp(steps, sigma_rel, lc.delta);
  }
  return 0.0;
}

double max_nsde_lipschitz(const ModelSpec& spec, const Parameters& params) {
  double L = 0.0;
  for (std::size_t b = 0; b < spec.blocks.size(); ++b)
    if (spec.blocks[b].kind == BlockKind::nsde)
      L = std::max(L, estimate_block_lipschitz(spec, params, static_cast<int>(b)));
  return L;
}

TrainResult run_training(const ModelSpec& spec, Parameters params, const Tensor& x_train,
                         const std::vector<int>& y_train, const Tensor& x_test,
                         const std::vector<int>& y_test, const TrainConfig& cfg,
                         const LedgerConfig& ledger_cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  cfg.validate(x_train.rows());
  spec.validate();

  TrainResult res;
  res.params = std::move(params);
  TrainRecord& rec = res.record;
  rec.lipschitz_declared = ledger_cfg.declared_lipschitz;

  const int n = x_train.rows();
  const int n_batches = (n + cfg.batch_size - 1) / cfg.batch_size;
  Optimizer opt(res.params, cfg.lr, cfg.momentum);

  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

  const bool dp = cfg.defense.kind == DefenseKind::dp_sgd;
  Rng dp_rng(mix_seed(cfg.seed, 0xd95ed));
  // dp_sgd accounting: sensitivity C, noise z*C, so sigma_rel = z.
  const bool dp_accounting = dp && cfg.defense.noise_multiplier > 0.0;

  double best_test_loss = std::numeric_limits<double>::infinity();
  Parameters best_params = res.params;
  int evals_since_improvement = 0;
  double lipschitz_max = 0.0;
  if (ledger_cfg.active && ledger_cfg.declared_lipschitz <= 0.0)
    lipschitz_max = max_nsde_lipschitz(spec, res.params);
  int iterations = 0;
  bool stopped = false;

  for (int epoch = 0; epoch < cfg.epochs && !stopped; ++epoch) {
    Rng shuffle_rng(mix_seed(cfg.seed, mix_seed(kBatchTag, static_cast<std::uint64_t>(epoch))));
    shuffle_rng.shuffle(order);

    for (int b = 0; b < n_batches; ++b) {
      if (dp_accounting) {
        // Stop before the budget would be exceeded.
        const double next_eps = account_rdp(iterations + 1, cfg.defense.noise_multiplier,
                                            cfg.defense.delta);
        if (next_eps > cfg.defense.target_epsilon) {
          stopped = true;
          break;
        }
      }
      const int lo = b * cfg.batch_size;
      const int hi = std::min(n, lo + cfg.batch_size);
      std::vector<int> batch_idx(order.begin() + lo, order.begin() + hi);
      Tensor xb({hi - lo, x_train.cols()});
      std::vector<int> yb(static_cast<std::size_t>(hi - lo));
      for (int r = 0; r < hi - lo; ++r) {
        for (int c = 0; c < x_train.cols(); ++c)
          xb.at(r, c) = x_train.at(batch_idx[static_cast<std::size_t>(r)], c);
        yb[static_cast<std::size_t>(r)] =
            y_train[static_cast<std::size_t>(batch_idx[static_cast<std::size_t>(r)])];
      }
      const std::uint64_t step_seed =
          mix_seed(cfg.seed, mix_seed(kBatchTag, static_cast<std::uint64_t>(iterations) + 1));

      if (dp) {
        // Per-example gradients, clipped and noised.
        std::vector<std::vector<double>> per_example;
        per_example.reserve(yb.size());
        for (int r = 0; r < hi - lo; ++r) {
          Tensor xe({1, x_train.cols()});
          for (int c = 0; c < x_train.cols(); ++c) xe.at(0, c) = xb.at(r, c);
          std::vector<int> ye{yb[static_cast<std::size_t>(r)]};
          LossGraph g = build_loss(spec, res.params, xe, ye,
                                   mix_seed(step_seed, static_cast<std::uint64_t>(r)),
                                   DefenseConfig{});
          if (!std::isfinite(g.fwd.tape.value(g.loss).item()))
            throw DivergenceError("train", epoch);
          Gradients grads = g.fwd.tape.backward(g.loss);
          per_example.push_back(flatten_trainable_grads(res.params, g.fwd.param_nodes, grads));
        }
        opt.apply_flat(res.params, dp_sgd_step(per_example, cfg.defense.clip,
                                               cfg.defense.noise_multiplier, dp_rng));
      } else {
        LossGraph g = build_loss(spec, res.params, xb, yb, step_seed, cfg.defense);
        if (!std::isfinite(g.fwd.tape.value(g.loss).item()))
          throw DivergenceError("train", epoch);
        Gradients grads = g.fwd.tape.backward(g.loss);
        opt.apply(res.params, g.fwd.param_nodes, grads);
      }
      ++iterations;
    }
    rec.epochs_run = epoch + 1;

    double epsilon_now = 0.0;
    if (dp_accounting && iterations > 0) {
      epsilon_now = account_rdp(iterations, cfg.defense.noise_multiplier, cfg.defense.delta);
      rec.epsilon_ledger.push_back(epsilon_now);
    } else if (ledger_cfg.active) {
      if (ledger_cfg.declared_lipschitz <= 0.0)
        lipschitz_max = std::max(lipschitz_max, max_nsde_lipschitz(spec, res.params));
      const int steps = ledger_cfg.per_iteration ? iterations : epoch + 1;
      epsilon_now = ledger_epsilon(ledger_cfg, steps, lipschitz_max);
      rec.epsilon_ledger.push_back(epsilon_now);
    }

    if ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs || stopped) {
      const EvalStats train_stats = evaluate(spec, res.params, x_train, y_train,
                                             mix_seed(cfg.seed, mix_seed(kEvalTag, 2 * epoch)));
      const EvalStats test_stats = evaluate(spec, res.params, x_test, y_test,
                                            mix_seed(cfg.seed, mix_seed(kEvalTag, 2 * epoch + 1)));
      rec.curve.push_back({epoch + 1, train_stats.loss, train_stats.accuracy,
                           test_stats.loss, test_stats.accuracy, epsilon_now});
      if (cfg.defense.kind == DefenseKind::early_stop) {
        if (test_stats.loss < best_test_loss) {
          best_test_loss = test_stats.loss;
          best_params = res.params;
          evals_since_improvement = 0;
        } else if (++evals_since_improvement >= cfg.defense.patience) {
          rec.early_stopped = true;
          stopped = true;
        }
      }
    }
  }

  if (cfg.defense.kind == DefenseKind::early_stop && rec.epochs_run > 0)
    res.params = std::move(best_params);

  // Gap bookkeeping: the epoch with the best train accuracy, paired with its
  // own test accuracy (first epoch wins ties).
  for (const EpochStat& e : rec.curve) {
    if (e.train_acc > rec.best_train_acc) {
      rec.best_train_acc = e.train_acc;
      rec.matching_test_acc = e.test_acc;
    }
  }
  rec.final_gap = rec.best_train_acc - rec.matching_test_acc;
  rec.lipschitz_estimate_max = lipschitz_max;
  if (!rec.epsilon_ledger.empty()) rec.final_epsilon = rec.epsilon_ledger.back();
  rec.wall_clock_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

}  // namespace

EvalStats evaluate(const ModelSpec& spec, const Parameters& params, const Tensor& x,
                   const std::vector<int>& y, std::uint64_t noise_seed) {
  ForwardOptions opts;
  opts.noise_seed = noise_seed;
  ForwardResult f = forward(spec, params, x, &y, opts);
  return {f.tape.value(f.mean_loss).item(),
          accuracy_from_logits(f.tape.value(f.logits), y)};
}

std::vector<ModelQuery> collect_outputs(const ModelSpec& spec, const Parameters& params,
                                        const Tensor& x, const std::vector<int>& y,
                                        std::uint64_t noise_seed) {
  ForwardOptions opts;
  opts.noise_seed = noise_seed;
  ForwardResult f = forward(spec, params, x, &y, opts);
  const Tensor& logits = f.tape.value(f.logits);
  const Tensor& losses = f.tape.value(f.per_sample_loss);
  const int classes = logits.cols();

  std::vector<ModelQuery> out(static_cast<std::size_t>(x.rows()));
  for (int r = 0; r < x.rows(); ++r) {
    ModelQuery& q = out[static_cast<std::size_t>(r)];
    q.loss = losses[r];
    q.confidences.resize(static_cast<std::size_t>(classes));
    double m = logits.at(r, 0);
    for (int c = 1; c < classes; ++c) m = std::max(m, logits.at(r, c));
    double z = 0.0;
    for (int c = 0; c < classes; ++c) {
      q.confidences[static_cast<std::size_t>(c)] = std::exp(logits.at(r, c) - m);
      z += q.confidences[static_cast<std::size_t>(c)];
    }
    for (double& p : q.confidences) p /= z;
    q.p_true = q.confidences[static_cast<std::size_t>(y[static_cast<std::size_t>(r)])];
    q.logit_true = logit(q.p_true);
  }
  return out;
}

TrainResult train(const ModelSpec& spec, Parameters params, const Tensor& x_train,
                  const std::vector<int>& y_train, const Tensor& x_test,
                  const std::vector<int>& y_test, const TrainConfig& cfg) {
  return run_training(spec, std::move(params), x_train, y_train, x_test, y_test, cfg,
                      LedgerConfig{});
}

std::vector<double> dp_sgd_step(const std::vector<std::vector<double>>& per_example_grads,
                                double clip, double noise_multiplier, Rng& rng) {
  if (clip <= 0.0) throw ConfigError("dp_sgd_step: clip must be positive");
  if (per_example_grads.empty()) throw ConfigError("dp_sgd_step: empty batch");
  const std::size_t dim = per_example_grads[0].size();
  std::vector<double> sum(dim, 0.0);
  for (const std::vector<double>& g : per_example_grads) {
    double norm = 0.0;
    for (double v : g) norm += v * v;
    norm = std::sqrt(norm);
    const double scale = norm > clip ? clip / norm : 1.0;
    for (std::size_t j = 0; j < dim; ++j) sum[j] += scale * g[j];
  }
  const double sd = noise_multiplier * clip;
  const double inv_batch = 1.0 / static_cast<double>(per_example_grads.size());
  for (std::size_t j = 0; j < dim; ++j) {
    if (sd > 0.0) sum[j] += rng.normal(0.0, sd);
    sum[j] *= inv_batch;
  }
  return sum;
}

TrainResult train_nsde_private(const ModelSpec& spec, Parameters params,
                               const Tensor& x_train, const std::vector<int>& y_train,
                               const Tensor& x_test, const std::vector<int>& y_test,
                               const TrainConfig& cfg, const PrivacyOptions& privacy) {
  spec.validate();
  bool has_nsde = false;
  for (const BlockSpec& b : spec.blocks) has_nsde |= b.kind == BlockKind::nsde;
  if (!has_nsde || !is_stochastic(spec.solver.method))
    throw ConfigError("train_nsde_private: no diffusion, no guarantee "
                      "(need an nsde block with a stochastic solver)");

  const double sigma = spec.solver.sigma();
  LedgerConfig lc;
  lc.active = sigma > 0.0;
  lc.method = privacy.method;
  lc.sigma = sigma;
  lc.delta = privacy.delta;
  lc.delta_prime = privacy.delta_prime;
  lc.time_horizon = spec.solver.time_horizon;
  lc.declared_lipschitz = privacy.lipschitz;
  lc.per_iteration = privacy.per_iteration;

  TrainResult res = run_training(spec, std::move(params), x_train, y_train, x_test,
                                 y_test, cfg, lc);
  res.record.no_formal_guarantee = sigma == 0.0;
  if (lc.active) {
    const int steps = lc.per_iteration
                          ? static_cast<int>(res.record.epsilon_ledger.size())
                          : res.record.epochs_run;
    res.record.delta_total = privacy.method == AccountantMethod::strong_composition
                                 ? steps * privacy.delta + privacy.delta_prime
                                 : privacy.delta;
  }
  return res;
}

FinetuneResult replace_then_finetune(const ModelSpec& base_spec,
                                     const Parameters& base_params,
                                     const DriftSpec& nsde_drift,
                                     const SolverConfig& nsde_solver,
                                     std::uint64_t replace_seed, bool full_finetune,
                                     const Tensor& x_train, const std::vector<int>& y_train,
                                     const Tensor& x_test, const std::vector<int>& y_test,
                                     const TrainConfig& cfg, const PrivacyOptions& privacy) {
  ReplacedModel replaced = replace_final_block(base_spec, base_params, nsde_drift,
                                               nsde_solver, replace_seed, full_finetune);
  TrainResult trained =
      train_nsde_private(replaced.spec, std::move(replaced.params), x_train, y_train,
                         x_test, y_test, cfg, privacy);
  return {replaced.spec, std::move(trained.params), std::move(trained.record)};
}

}  // namespace sdelab
