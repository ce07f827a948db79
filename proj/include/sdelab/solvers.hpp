#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "sdelab/tape.hpp"

namespace sdelab {

enum class SolverMethod { euler, rk4, dopri5, euler_maruyama, stochastic_rk4 };

const char* solver_method_name(SolverMethod m);
SolverMethod solver_method_from_name(const std::string& name);
bool is_stochastic(SolverMethod m);

// Integrator configuration over [0, T]. Fixed-step methods take exactly
// round(T*s) steps of size 1/s; T*s must be a positive integer. The diffusion
// scale of stochastic methods derives from the stochasticity level k as
// sigma = k*sqrt(s/T).
struct SolverConfig {
  SolverMethod method = SolverMethod::euler;
  double time_horizon = 1.0;   // T
  int steps_per_unit = 16;     // s
  double rtol = 1e-5;          // dopri5 only
  double atol = 1e-5;
  double stochasticity = 0.0;  // k
  std::uint64_t noise_seed = 0;
  bool record_trace = false;

  double sigma() const;
  int n_steps() const;  // validates the T*s integrality requirement
  void validate() const;
};

// sigma = k*sqrt(s/T). Errors on non-positive T or s, negative k.
double sigma_of(double k, double time_horizon, double steps_per_unit);

struct StepLogEntry {
  double t;
  double dt;
  double error_norm;  // 0 for fixed-step methods
  bool accepted;
};

// Record of one solve. `states` and `noise` are filled only when
// record_trace is set; times and the step log are always kept.
struct SolveTrace {
  std::vector<double> times;
  std::vector<Tensor> states;
  std::vector<Tensor> noise;
  std::vector<StepLogEntry> steps;
  int n_accepted = 0;
  int n_rejected = 0;

  std::string to_json() const;
};

std::string solver_config_to_json(const SolverConfig& cfg);
SolverConfig solver_config_from_json(const std::string& text);

// Drift callback: appends f(h, t) to the tape and returns its node.
using DriftFn = std::function<Tape::NodeId(Tape&, Tape::NodeId, double)>;

struct SolveResult {
  Tape::NodeId final_state;
  SolveTrace trace;
};

// Deterministic solve (euler | rk4 | dopri5), unrolled onto the tape.
SolveResult ode_solve(Tape& tape, const DriftFn& f, Tape::NodeId h0,
                      const SolverConfig& cfg);

// Embedded Dormand-Prince 5(4) pair with a PI step-size controller. The
// accepted-step sequence is fixed by the forward pass; gradients flow through
// that fixed sequence only.
SolveResult dopri5_solve(Tape& tape, const DriftFn& f, Tape::NodeId h0,
                         const SolverConfig& cfg);

// Stochastic solve (euler_maruyama | stochastic_rk4) with constant diffusion
// (sigma/sqrt(T)) * I. Noise enters the tape as constants; no gradient flows
// through the draws. sigma == 0 reproduces the matching deterministic method
// bit-exactly.
SolveResult sde_solve(Tape& tape, const DriftFn& f, double sigma,
                      Tape::NodeId h0, const SolverConfig& cfg);

}  // namespace sdelab
