#include "sdelab/privacy.hpp"

#include <cmath>
#include <limits>

#include "sdelab/error.hpp"
#include "sdelab/rng.hpp"

namespace sdelab {

namespace {

void check_epsilon_delta(double epsilon, double delta) {
  if (!(epsilon > 0.0 && epsilon < 1.0))
    throw ConfigError("calibration: epsilon must lie in (0,1), got " +
                      std::to_string(epsilon));
  if (!(delta > 0.0 && delta <= 1.25))
    throw ConfigError("calibration: delta must lie in (0, 1.25], got " +
                      std::to_string(delta));
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

}  // namespace

double calibrate_sigma_gaussian(double sensitivity, double epsilon, double delta) {
  if (sensitivity < 0.0)
    throw ConfigError("calibration: sensitivity must be non-negative");
  check_epsilon_delta(epsilon, delta);
  if (sensitivity == 0.0) return 0.0;
  return std::sqrt(2.0 * std::log(1.25 / delta)) * sensitivity / epsilon;
}

double calibrate_sigma_sde(double time_horizon, double lipschitz, double epsilon,
                           double delta) {
  if (time_horizon <= 0.0 || lipschitz <= 0.0)
    throw ConfigError("calibration: T and L must be positive");
  return calibrate_sigma_gaussian(time_horizon * lipschitz, epsilon, delta);
}

TrainingCalibration calibrate_sigma_training(int iterations, double time_horizon,
                                             double lipschitz, double epsilon_prime,
                                             double delta, double delta_prime) {
  if (iterations < 1) throw ConfigError("calibration: K must be at least 1");
  if (time_horizon <= 0.0 || lipschitz <= 0.0 || epsilon_prime <= 0.0)
    throw ConfigError("calibration: T, L, epsilon' must be positive");
  if (!(delta > 0.0 && delta < 1.0) || !(delta_prime > 0.0 && delta_prime < 1.0))
    throw ConfigError("calibration: delta and delta' must lie in (0,1)");
  TrainingCalibration out;
  out.sigma = 4.0 *
              std::sqrt(iterations * std::log(1.25 / delta) * std::log(1.0 / delta_prime)) *
              time_horizon * lipschitz / epsilon_prime;
  out.delta_total = iterations * delta + delta_prime;
  out.vacuous = out.delta_total >= 1.0;
  return out;
}

ComposedBudget account_strong_composition(int steps, double epsilon_step,
                                          double delta_step, double delta_prime) {
  if (steps < 1) throw ConfigError("accounting: K must be at least 1");
  if (epsilon_step <= 0.0)
    throw ConfigError("accounting: per-step epsilon must be positive");
  if (!(delta_step > 0.0 && delta_step < 1.0) ||
      !(delta_prime > 0.0 && delta_prime < 1.0))
    throw ConfigError("accounting: delta and delta' must lie in (0,1)");
  ComposedBudget out;
  out.epsilon = epsilon_step * std::sqrt(2.0 * steps * std::log(1.0 / delta_prime)) +
                steps * epsilon_step * (std::exp(epsilon_step) - 1.0);
  out.delta = steps * delta_step + delta_prime;
  return out;
}

double account_rdp(int steps, double sigma_rel, double delta) {
  if (steps < 1) throw ConfigError("accounting: K must be at least 1");
  if (sigma_rel <= 0.0) throw ConfigError("accounting: sigma_rel must be positive");
  if (!(delta > 0.0 && delta < 1.0))
    throw ConfigError("accounting: delta must lie in (0,1)");
  const double log_inv_delta = std::log(1.0 / delta);
  double best = std::numeric_limits<double>::infinity();
  for (double alpha = 1.25; alpha <= 512.0; alpha += 0.25) {
    const double eps = steps * alpha / (2.0 * sigma_rel * sigma_rel) +
                       log_inv_delta / (alpha - 1.0);
    best = std::min(best, eps);
  }
  return best;
}

double account_gdp(int steps, double sigma_rel, double delta) {
  if (steps < 1) throw ConfigError("accounting: K must be at least 1");
  if (sigma_rel <= 0.0) throw ConfigError("accounting: sigma_rel must be positive");
  if (!(delta > 0.0 && delta < 1.0))
    throw ConfigError("accounting: delta must lie in (0,1)");
  const double mu = std::sqrt(static_cast<double>(steps)) / sigma_rel;
  auto delta_of = [mu](double eps) {
    return normal_cdf(-eps / mu + mu / 2.0) -
           std::exp(eps) * normal_cdf(-eps / mu - mu / 2.0);
  };
  if (delta >= delta_of(0.0)) return 0.0;
  double lo = 0.0, hi = 100.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (delta_of(mid) > delta)
      lo = mid;
    else
      hi = mid;
  }
  return 0.5 * (lo + hi);
}

const char* accountant_method_name(AccountantMethod m) {
  switch (m) {
    case AccountantMethod::strong_composition: return "strong_composition";
    case AccountantMethod::rdp: return "rdp";
    case AccountantMethod::gdp: return "gdp";
  }
  return "?";
}

AccountantMethod accountant_method_from_name(const std::string& name) {
  if (name == "strong_composition") return AccountantMethod::strong_composition;
  if (name == "rdp") return AccountantMethod::rdp;
  if (name == "gdp") return AccountantMethod::gdp;
  throw ConfigError("unknown accountant method: " + name);
}

AccountantState::AccountantState(AccountantMethod method, double sigma_rel,
                                 double delta, double delta_prime)
    : method_(method), sigma_rel_(sigma_rel), delta_(delta), delta_prime_(delta_prime) {
  if (sigma_rel <= 0.0) throw ConfigError("accountant: sigma_rel must be positive");
  if (!(delta > 0.0 && delta < 1.0))
    throw ConfigError("accountant: delta must lie in (0,1)");
}

void AccountantState::step(int n) {
  for (int i = 0; i < n; ++i) {
    ++steps_;
    ledger_.push_back(epsilon());
  }
}

double AccountantState::epsilon() const {
  if (steps_ == 0) return 0.0;
  switch (method_) {
    case AccountantMethod::strong_composition: {
      // Per-step epsilon inverted from the calibration bound (conservative).
      const double eps_step = std::sqrt(2.0 * std::log(1.25 / delta_)) / sigma_rel_;
      return account_strong_composition(steps_, eps_step, delta_, delta_prime_).epsilon;
    }
    case AccountantMethod::rdp:
      return account_rdp(steps_, sigma_rel_, delta_);
    case AccountantMethod::gdp:
      return account_gdp(steps_, sigma_rel_, delta_);
  }
  return 0.0;
}

double AccountantState::delta_total() const {
  if (method_ == AccountantMethod::strong_composition)
    return steps_ * delta_ + delta_prime_;
  return delta_;
}

namespace {

// Largest singular value by alternating power iteration, 200 rounds or a
// 1e-9 relative stall, whichever first. Start vector from a fixed stream.
double spectral_norm(const Tensor& w, int skip_rows) {
  const int rows = w.rows() - skip_rows;
  const int cols = w.cols();
  if (rows <= 0) return 0.0;
  Rng rng(0x9d2c5680);
  std::vector<double> v(static_cast<std::size_t>(cols));
  double norm = 0.0;
  for (double& x : v) {
    x = rng.normal();
    norm += x * x;
  }
  norm = std::sqrt(norm);
  for (double& x : v) x /= norm;

  std::vector<double> u(static_cast<std::size_t>(rows));
  double sigma = 0.0;
  for (int it = 0; it < 200; ++it) {
    for (int r = 0; r < rows; ++r) {
      double s = 0.0;
      for (int c = 0; c < cols; ++c) s += w.at(r, c) * v[static_cast<std::size_t>(c)];
      u[static_cast<std::size_t>(r)] = s;
    }
    double un = 0.0;
    for (double x : u) un += x * x;
    un = std::sqrt(un);
    if (un == 0.0) return 0.0;
    for (double& x : u) x /= un;

    for (int c = 0; c < cols; ++c) {
      double s = 0.0;
      for (int r = 0; r < rows; ++r) s += w.at(r, c) * u[static_cast<std::size_t>(r)];
      v[static_cast<std::size_t>(c)] = s;
    }
    double vn = 0.0;
    for (double x : v) vn += x * x;
    vn = std::sqrt(vn);
    if (vn == 0.0) return 0.0;
    for (double& x : v) x /= vn;

    if (std::abs(vn - sigma) <= 1e-9 * std::max(1.0, vn)) {
      sigma = vn;
      break;
    }
    sigma = vn;
  }
  return sigma;
}

}  // namespace

double estimate_lipschitz(const DriftSpec& drift,
                          const std::vector<Tensor>& layer_weights) {
  double bound = 1.0;
  for (std::size_t l = 0; l < layer_weights.size(); ++l) {
    const int skip = (l == 0 && drift.time_conditioning) ? 1 : 0;
    // Time conditioning appends t as the last input feature, i.e. the last
    // row of the first weight matrix; it is not part of the state map.
    const Tensor& w = layer_weights[l];
    if (skip == 0) {
      bound *= spectral_norm(w, 0);
    } else {
      Tensor trimmed({w.rows() - 1, w.cols()});
      for (int r = 0; r + 1 < w.rows(); ++r)
        for (int c = 0; c < w.cols(); ++c) trimmed.at(r, c) = w.at(r, c);
      bound *= spectral_norm(trimmed, 0);
    }
  }
  return bound;
}

double estimate_block_lipschitz(const ModelSpec& spec, const Parameters& params,
                                int block) {
  const auto layout = param_layout(spec);
  std::vector<Tensor> weights;
  for (std::size_t i = 0; i < layout.size(); ++i)
    if (layout[i].block == block && layout[i].shape.size() == 2)
      weights.push_back(params.values[i]);
  if (weights.empty()) throw ConfigError("estimate_block_lipschitz: no such block");
  return estimate_lipschitz(spec.blocks[static_cast<std::size_t>(block)].drift, weights);
}

AuditResult privacy_loss_audit(double sigma, double distance, double epsilon,
                               double delta, int n_samples, std::uint64_t seed) {
  if (sigma <= 0.0 || distance <= 0.0)
    throw ConfigError("audit: sigma and distance must be positive");
  Rng rng(seed);
  // Adjacent inputs 0 and `distance`; the mechanism releases x = 0 + noise.
  // loss = ln( p_{N(0,s^2)}(x) / p_{N(d,s^2)}(x) ) = d*x/s^2 + d^2/(2 s^2).
  const double s2 = sigma * sigma;
  const double mean_term = distance * distance / (2.0 * s2);
  long exceed = 0;
  double sum = 0.0, sum_sq = 0.0;
  for (int i = 0; i < n_samples; ++i) {
    const double x = rng.normal(0.0, sigma);
    const double loss = distance * x / s2 + mean_term;
    if (loss > epsilon) ++exceed;
    sum += loss;
    sum_sq += loss * loss;
  }
  AuditResult out;
  out.n_samples = n_samples;
  out.empirical_tail = static_cast<double>(exceed) / n_samples;
  out.loss_mean = sum / n_samples;
  out.loss_variance = sum_sq / n_samples - out.loss_mean * out.loss_mean;
  out.threshold = delta + 3.0 * std::sqrt(delta * (1.0 - delta) / n_samples);
  out.pass = out.empirical_tail <= out.threshold;
  return out;
}

}  // namespace sdelab
