#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sdelab/nets.hpp"

namespace sdelab {

// Per-step and whole-training privacy parameters. epsilon is the per-step
// budget (the Gaussian-mechanism bound is proved for 0 < epsilon < 1),
// epsilon_prime the total target across K steps; the composed guarantee is
// reported as (epsilon_prime, K*delta + delta_prime).
struct PrivacySpec {
  double epsilon = 0.5;
  double delta = 1e-5;
  double epsilon_prime = 8.0;
  double delta_prime = 1e-5;
  int max_iterations = 1;   // K
  double time_horizon = 1;  // T
  double lipschitz = 0.0;   // L; 0 means "estimate during training"
  double sensitivity = 0.0; // S_F
  double sigma = 0.0;
};

// sigma = sqrt(2 ln(1.25/delta)) * S / epsilon. Requires 0 < epsilon < 1
// (the regime the tail bound is proved in) and 0 < delta <= 1.25.
double calibrate_sigma_gaussian(double sensitivity, double epsilon, double delta);

// Same bound with S = T * L_f.
double calibrate_sigma_sde(double time_horizon, double lipschitz, double epsilon,
                           double delta);

struct TrainingCalibration {
  double sigma;
  double delta_total;  // K*delta + delta_prime
  bool vacuous;        // delta_total >= 1
};

// sigma = 4 sqrt(K ln(1.25/delta) ln(1/delta_prime)) * T*L / epsilon_prime,
// giving (epsilon_prime, K*delta + delta_prime)-DP across K iterations.
TrainingCalibration calibrate_sigma_training(int iterations, double time_horizon,
                                             double lipschitz, double epsilon_prime,
                                             double delta, double delta_prime);

struct ComposedBudget {
  double epsilon;
  double delta;
};

// epsilon_total = e*sqrt(2K ln(1/delta')) + K*e*(exp(e)-1),
// delta_total = K*delta + delta'.
ComposedBudget account_strong_composition(int steps, double epsilon_step,
                                          double delta_step, double delta_prime);

// Gaussian-mechanism RDP composed K times and converted at delta:
// min over the alpha grid {1.25, 1.5, ..., 512} of
// K*alpha/(2 sigma_rel^2) + ln(1/delta)/(alpha - 1).
double account_rdp(int steps, double sigma_rel, double delta);

// mu = sqrt(K)/sigma_rel; epsilon solves
// delta = Phi(-eps/mu + mu/2) - exp(eps)*Phi(-eps/mu - mu/2)
// by bisection on [0, 100]. Returns 0 when delta >= delta(0).
double account_gdp(int steps, double sigma_rel, double delta);

enum class AccountantMethod { strong_composition, rdp, gdp };
const char* accountant_method_name(AccountantMethod m);
AccountantMethod accountant_method_from_name(const std::string& name);

// Running composition ledger over a fixed per-step (sigma_rel, delta).
// sigma_rel is the noise-to-sensitivity ratio sigma/S.
class AccountantState {
 public:
  AccountantState(AccountantMethod method, double sigma_rel, double delta,
                  double delta_prime);

  void step(int n = 1);
  int steps() const { return steps_; }
  double epsilon() const;      // at the current step count
  double delta_total() const;  // strong composition: K*delta + delta'; else delta
  const std::vector<double>& ledger() const { return ledger_; }
  AccountantMethod method() const { return method_; }
  double sigma_rel() const { return sigma_rel_; }

 private:
  AccountantMethod method_;
  double sigma_rel_;
  double delta_;
  double delta_prime_;
  int steps_ = 0;
  std::vector<double> ledger_;  // epsilon after each step() call
};

// Upper bound on the Lipschitz constant of a drift MLP: product over layers
// of weight-matrix spectral norms (power iteration), valid because every
// activation in DriftSpec is 1-Lipschitz. The time-conditioning input row is
// excluded so the bound covers the state-to-state map.
double estimate_lipschitz(const DriftSpec& drift,
                          const std::vector<Tensor>& layer_weights);

// Convenience: bound for one block of a built model.
double estimate_block_lipschitz(const ModelSpec& spec, const Parameters& params,
                                int block);

struct AuditResult {
  double empirical_tail;  // Pr[loss > epsilon]
  double loss_mean;
  double loss_variance;
  double threshold;       // delta + 3 * binomial standard error at p = delta
  bool pass;
  int n_samples;
};

// Monte Carlo audit of the scalar Gaussian mechanism on adjacent inputs 0 and
// `distance`: draws the privacy-loss variable and checks
// Pr[loss > epsilon] <= delta + 3*sqrt(delta(1-delta)/n).
AuditResult privacy_loss_audit(double sigma, double distance, double epsilon,
                               double delta, int n_samples,
                               std::uint64_t seed = 0x5eed);

}  // namespace sdelab
