#include "sdelab/solvers.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"
#include "sdelab/error.hpp"
#include "sdelab/rng.hpp"

namespace sdelab {

const char* solver_method_name(SolverMethod m) {
  switch (m) {
    case SolverMethod::euler: return "euler";
    case SolverMethod::rk4: return "rk4";
    case SolverMethod::dopri5: return "dopri5";
    case SolverMethod::euler_maruyama: return "euler_maruyama";
    case SolverMethod::stochastic_rk4: return "stochastic_rk4";
  }
  return "?";
}

SolverMethod solver_method_from_name(const std::string& name) {
  if (name == "euler") return SolverMethod::euler;
  if (name == "rk4") return SolverMethod::rk4;
  if (name == "dopri5") return SolverMethod::dopri5;
  if (name == "euler_maruyama") return SolverMethod::euler_maruyama;
  if (name == "stochastic_rk4") return SolverMethod::stochastic_rk4;
  throw ConfigError("unknown solver method: " + name);
}

bool is_stochastic(SolverMethod m) {
  return m == SolverMethod::euler_maruyama || m == SolverMethod::stochastic_rk4;
}

double sigma_of(double k, double time_horizon, double steps_per_unit) {
  if (time_horizon <= 0.0) throw ConfigError("sigma_of: T must be positive");
  if (steps_per_unit <= 0.0) throw ConfigError("sigma_of: s must be positive");
  if (k < 0.0) throw ConfigError("sigma_of: k must be non-negative");
  return k * std::sqrt(steps_per_unit / time_horizon);
}

double SolverConfig::sigma() const {
  return sigma_of(stochasticity, time_horizon, steps_per_unit);
}

int SolverConfig::n_steps() const {
  const double ts = time_horizon * steps_per_unit;
  const double rounded = std::round(ts);
  if (rounded < 1.0 || std::abs(ts - rounded) > 1e-9)
    throw ConfigError("solver: T*s must be a positive integer, got T=" +
                      std::to_string(time_horizon) + " s=" + std::to_string(steps_per_unit));
  return static_cast<int>(rounded);
}

void SolverConfig::validate() const {
  if (time_horizon <= 0.0) throw ConfigError("solver: T must be positive");
  if (steps_per_unit <= 0) throw ConfigError("solver: s must be positive");
  if (stochasticity < 0.0) throw ConfigError("solver: k must be non-negative");
  if (method == SolverMethod::dopri5) {
    if (rtol <= 0.0 || atol <= 0.0)
      throw ConfigError("solver: dopri5 requires positive rtol and atol");
  } else {
    n_steps();
  }
}

std::string SolveTrace::to_json() const {
  nlohmann::json j;
  j["times"] = times;
  j["n_accepted"] = n_accepted;
  j["n_rejected"] = n_rejected;
  nlohmann::json steps_j = nlohmann::json::array();
  for (const StepLogEntry& s : steps)
    steps_j.push_back({{"t", s.t}, {"dt", s.dt}, {"error_norm", s.error_norm},
                       {"accepted", s.accepted}});
  j["steps"] = std::move(steps_j);
  nlohmann::json norms = nlohmann::json::array();
  for (const Tensor& st : states) {
    double s = 0.0;
    for (int i = 0; i < st.numel(); ++i) s += st[i] * st[i];
    norms.push_back(std::sqrt(s));
  }
  j["state_norms"] = std::move(norms);
  return j.dump();
}

std::string solver_config_to_json(const SolverConfig& cfg) {
  nlohmann::json j;
  j["method"] = solver_method_name(cfg.method);
  j["time"] = cfg.time_horizon;
  j["steps_per_unit"] = cfg.steps_per_unit;
  j["rtol"] = cfg.rtol;
  j["atol"] = cfg.atol;
  j["stochasticity"] = cfg.stochasticity;
  j["noise_seed"] = cfg.noise_seed;
  return j.dump();
}

SolverConfig solver_config_from_json(const std::string& text) {
  const nlohmann::json j = nlohmann::json::parse(text);
  SolverConfig cfg;
  cfg.method = solver_method_from_name(j.at("method").get<std::string>());
  cfg.time_horizon = j.at("time").get<double>();
  cfg.steps_per_unit = j.at("steps_per_unit").get<int>();
  if (j.contains("rtol")) cfg.rtol = j.at("rtol").get<double>();
  if (j.contains("atol")) cfg.atol = j.at("atol").get<double>();
  if (j.contains("stochasticity")) cfg.stochasticity = j.at("stochasticity").get<double>();
  if (j.contains("noise_seed")) cfg.noise_seed = j.at("noise_seed").get<std::uint64_t>();
  cfg.validate();
  return cfg;
}

namespace {

void check_finite(const Tape& tape, Tape::NodeId h, int step_index) {
  if (!tape.value(h).all_finite()) throw DivergenceError("solver", step_index);
}

void record_state(SolveTrace& trace, const SolverConfig& cfg, const Tape& tape,
                  Tape::NodeId h, double t) {
  trace.times.push_back(t);
  if (cfg.record_trace) trace.states.push_back(tape.value(h));
}

// One classical RK4 drift increment dt/6*(k1 + 2 k2 + 2 k3 + k4).
Tape::NodeId rk4_increment(Tape& tape, const DriftFn& f, Tape::NodeId h,
                           double t, double dt) {
  Tape::NodeId k1 = f(tape, h, t);
  Tape::NodeId k2 = f(tape, tape.add(h, tape.scalar_mul(dt / 2.0, k1)), t + dt / 2.0);
  Tape::NodeId k3 = f(tape, tape.add(h, tape.scalar_mul(dt / 2.0, k2)), t + dt / 2.0);
  Tape::NodeId k4 = f(tape, tape.add(h, tape.scalar_mul(dt, k3)), t + dt);
  Tape::NodeId acc = tape.add(k1, tape.scalar_mul(2.0, k2));
  acc = tape.add(acc, tape.scalar_mul(2.0, k3));
  acc = tape.add(acc, k4);
  return tape.scalar_mul(dt / 6.0, acc);
}

SolveResult fixed_step_solve(Tape& tape, const DriftFn& f, Tape::NodeId h0,
                             const SolverConfig& cfg, double sigma, Rng* rng) {
  const int n = cfg.n_steps();
  const double dt = cfg.time_horizon / n;
  const bool rk4 = cfg.method == SolverMethod::rk4 ||
                   cfg.method == SolverMethod::stochastic_rk4;
  const double noise_scale = sigma / std::sqrt(cfg.time_horizon);

  SolveResult res;
  res.final_state = h0;
  record_state(res.trace, cfg, tape, h0, 0.0);

  for (int i = 0; i < n; ++i) {
    const double t = i * dt;
    Tape::NodeId incr =
        rk4 ? rk4_increment(tape, f, res.final_state, t, dt)
            : tape.scalar_mul(dt, f(tape, res.final_state, t));
    Tape::NodeId h_next = tape.add(res.final_state, incr);
    if (rng && sigma > 0.0) {
      Tensor w(tape.value(h0).shape());
      const double sd = std::sqrt(dt);
      for (int j = 0; j < w.numel(); ++j) w[j] = rng->normal(0.0, sd);
      if (cfg.record_trace) res.trace.noise.push_back(w);
      Tape::NodeId w_node = tape.constant(std::move(w));
      h_next = tape.add(h_next, tape.scalar_mul(noise_scale, w_node));
    }
    res.final_state = h_next;
    check_finite(tape, res.final_state, i + 1);
    record_state(res.trace, cfg, tape, res.final_state, (i + 1) * dt);
    res.trace.steps.push_back({t, dt, 0.0, true});
    ++res.trace.n_accepted;
  }
  return res;
}

// Dormand-Prince 5(4) coefficients.
constexpr double kC[7] = {0.0, 1.0 / 5, 3.0 / 10, 4.0 / 5, 8.0 / 9, 1.0, 1.0};
constexpr double kA[7][6] = {
    {},
    {1.0 / 5},
    {3.0 / 40, 9.0 / 40},
    {44.0 / 45, -56.0 / 15, 32.0 / 9},
    {19372.0 / 6561, -25360.0 / 2187, 64448.0 / 6561, -212.0 / 729},
    {9017.0 / 3168, -355.0 / 33, 46732.0 / 5247, 49.0 / 176, -5103.0 / 18656},
    {35.0 / 384, 0.0, 500.0 / 1113, 125.0 / 192, -2187.0 / 6784, 11.0 / 84},
};
// 5th-order weights equal the last stage row (FSAL); these are the
// error-estimate coefficients b5 - b4.
constexpr double kErr[7] = {71.0 / 57600,    0.0,          -71.0 / 16695, 71.0 / 1920,
                            -17253.0 / 339200, 22.0 / 525, -1.0 / 40};

}  // namespace

SolveResult dopri5_solve(Tape& tape, const DriftFn& f, Tape::NodeId h0,
                         const SolverConfig& cfg) {
  cfg.validate();
  const double T = cfg.time_horizon;
  const int dim = tape.value(h0).numel();

  // PI controller constants (safety, exponents, growth clamp).
  const double safety = 0.9;
  const double beta1 = 0.7 / 5.0;
  const double beta2 = 0.4 / 5.0;
  const double fac_min = 0.2, fac_max = 5.0;
  const int max_steps = 100000;

  SolveResult res;
  res.final_state = h0;
  record_state(res.trace, cfg, tape, h0, 0.0);

  double t = 0.0;
  double dt = T;  // first trial step is the whole interval
  double err_prev = 1.0;
  Tape::NodeId k_first = f(tape, h0, 0.0);  // FSAL carry

  int iter = 0;
  while (t < T) {
    if (++iter > max_steps)
      throw Error("dopri5: exceeded maximum step count (stiff problem?)");
    if (dt < 1e-12 * T)
      throw Error("dopri5: step size underflow at t=" + std::to_string(t) +
                  " (stiff problem?)");
    dt = std::min(dt, T - t);

    Tape::NodeId k[7];
    k[0] = k_first;
    for (int s = 1; s < 7; ++s) {
      Tape::NodeId y = res.final_state;
      for (int j = 0; j < s; ++j) {
        if (kA[s][j] == 0.0) continue;
        y = tape.add(y, tape.scalar_mul(dt * kA[s][j], k[j]));
      }
      k[s] = f(tape, y, t + kC[s] * dt);
    }
    // Stage 7 input is the 5th-order solution itself.
    Tape::NodeId y5 = res.final_state;
    for (int j = 0; j < 6; ++j) {
      if (kA[6][j] == 0.0) continue;
      y5 = tape.add(y5, tape.scalar_mul(dt * kA[6][j], k[j]));
    }

    // Weighted RMS error from the embedded 4th-order difference; plain
    // arithmetic, this is controller state rather than a differentiable path.
    const Tensor& y_old = tape.value(res.final_state);
    const Tensor& y_new = tape.value(y5);
    double acc = 0.0;
    for (int i = 0; i < dim; ++i) {
      double e = 0.0;
      for (int s = 0; s < 7; ++s) {
        if (kErr[s] == 0.0) continue;
        e += kErr[s] * tape.value(k[s])[i];
      }
      e *= dt;
      const double scale =
          cfg.atol + cfg.rtol * std::max(std::abs(y_old[i]), std::abs(y_new[i]));
      acc += (e / scale) * (e / scale);
    }
    const double err = std::sqrt(acc / dim);

    if (err <= 1.0) {
      t += dt;
      res.final_state = y5;
      k_first = k[6];  // FSAL: last stage is f at (t+dt, y5)
      check_finite(tape, res.final_state, res.trace.n_accepted + 1);
      record_state(res.trace, cfg, tape, res.final_state, t);
      res.trace.steps.push_back({t - dt, dt, err, true});
      ++res.trace.n_accepted;
      double factor = err == 0.0
                          ? fac_max
                          : safety * std::pow(err, -beta1) * std::pow(err_prev, beta2);
      factor = std::clamp(factor, fac_min, fac_max);
      err_prev = std::max(err, 1e-10);
      dt *= factor;
    } else {
      res.trace.steps.push_back({t, dt, err, false});
      ++res.trace.n_rejected;
      const double factor = std::clamp(safety * std::pow(err, -0.2), fac_min, 1.0);
      dt *= factor;
    }
  }
  return res;
}

SolveResult ode_solve(Tape& tape, const DriftFn& f, Tape::NodeId h0,
                      const SolverConfig& cfg) {
  cfg.validate();
  switch (cfg.method) {
    case SolverMethod::euler:
    case SolverMethod::rk4:
      return fixed_step_solve(tape, f, h0, cfg, 0.0, nullptr);
    case SolverMethod::dopri5:
      return dopri5_solve(tape, f, h0, cfg);
    default:
      throw ConfigError("ode_solve requires a deterministic method, got " +
                        std::string(solver_method_name(cfg.method)));
  }
}

SolveResult sde_solve(Tape& tape, const DriftFn& f, double sigma,
                      Tape::NodeId h0, const SolverConfig& cfg) {
  cfg.validate();
  if (!is_stochastic(cfg.method))
    throw ConfigError("sde_solve requires a stochastic method, got " +
                      std::string(solver_method_name(cfg.method)));
  if (sigma < 0.0) throw ConfigError("sde_solve: sigma must be non-negative");
  if (sigma == 0.0) return fixed_step_solve(tape, f, h0, cfg, 0.0, nullptr);
  Rng rng(cfg.noise_seed);
  return fixed_step_solve(tape, f, h0, cfg, sigma, &rng);
}

}  // namespace sdelab
