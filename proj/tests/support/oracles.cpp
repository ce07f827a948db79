#include "support/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace oracles {

std::vector<double> finite_difference_gradient(
    const std::function<double(const std::vector<double>&)>& f,
    std::vector<double> x, double step) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + step;
    const double hi = f(x);
    x[i] = orig - step;
    const double lo = f(x);
    x[i] = orig;
    g[i] = (hi - lo) / (2.0 * step);
  }
  return g;
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

double largest_singular_value(const std::vector<double>& a, int rows, int cols) {
  // One-sided Jacobi: orthogonalize columns of A; singular values are the
  // resulting column norms.
  std::vector<double> m = a;
  auto col_dot = [&](int p, int q) {
    double s = 0.0;
    for (int r = 0; r < rows; ++r)
      s += m[static_cast<std::size_t>(r * cols + p)] * m[static_cast<std::size_t>(r * cols + q)];
    return s;
  };
  for (int sweep = 0; sweep < 60; ++sweep) {
    double off = 0.0;
    for (int p = 0; p < cols - 1; ++p) {
      for (int q = p + 1; q < cols; ++q) {
        const double apq = col_dot(p, q);
        const double app = col_dot(p, p);
        const double aqq = col_dot(q, q);
        off += apq * apq;
        if (std::abs(apq) < 1e-15 * std::sqrt(app * aqq) || apq == 0.0) continue;
        const double tau = (aqq - app) / (2.0 * apq);
        const double t = (tau >= 0 ? 1.0 : -1.0) /
                         (std::abs(tau) + std::sqrt(1.0 + tau * tau));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (int r = 0; r < rows; ++r) {
          const double vp = m[static_cast<std::size_t>(r * cols + p)];
          const double vq = m[static_cast<std::size_t>(r * cols + q)];
          m[static_cast<std::size_t>(r * cols + p)] = c * vp - s * vq;
          m[static_cast<std::size_t>(r * cols + q)] = s * vp + c * vq;
        }
      }
    }
    if (off < 1e-28) break;
  }
  double best = 0.0;
  for (int p = 0; p < cols; ++p) best = std::max(best, col_dot(p, p));
  return std::sqrt(best);
}

double rdp_epsilon_dense(int steps, double sigma_rel, double delta,
                         double alpha_max, double alpha_step) {
  const double log_inv_delta = std::log(1.0 / delta);
  double best = std::numeric_limits<double>::infinity();
  for (double alpha = 1.0 + alpha_step; alpha <= alpha_max; alpha += alpha_step) {
    const double eps = steps * alpha / (2.0 * sigma_rel * sigma_rel) +
                       log_inv_delta / (alpha - 1.0);
    best = std::min(best, eps);
  }
  return best;
}

double pairwise_auc(const std::vector<std::pair<double, bool>>& scored) {
  double wins = 0.0;
  long pairs = 0;
  for (const auto& [sm, mm] : scored) {
    if (!mm) continue;
    for (const auto& [sn, nn] : scored) {
      if (nn) continue;
      ++pairs;
      if (sm > sn)
        wins += 1.0;
      else if (sm == sn)
        wins += 0.5;
    }
  }
  if (pairs == 0) throw std::runtime_error("pairwise_auc: need both classes");
  return wins / static_cast<double>(pairs);
}

double exhaustive_threshold_accuracy(const std::vector<std::pair<double, bool>>& scored) {
  int members = 0, non_members = 0;
  for (const auto& [s, m] : scored) (m ? members : non_members)++;
  std::vector<double> thresholds;
  for (const auto& [s, m] : scored) thresholds.push_back(s);
  thresholds.push_back(std::numeric_limits<double>::infinity());
  double best = 0.0;
  for (double t : thresholds) {
    int tp = 0, fp = 0;
    for (const auto& [s, m] : scored) {
      if (s >= t) (m ? tp : fp)++;
    }
    const double tpr = members ? static_cast<double>(tp) / members : 0.0;
    const double fpr = non_members ? static_cast<double>(fp) / non_members : 0.0;
    best = std::max(best, (tpr + 1.0 - fpr) / 2.0);
  }
  return best;
}

namespace {
double clamp01(double p) { return std::clamp(p, 1e-12, 1.0 - 1e-12); }
}  // namespace

double mentr_direct(const std::vector<double>& probs, int label) {
  double out = 0.0;
  for (int c = 0; c < static_cast<int>(probs.size()); ++c) {
    const double p = clamp01(probs[static_cast<std::size_t>(c)]);
    out += c == label ? -(1.0 - p) * std::log(p) : -p * std::log(1.0 - p);
  }
  return out;
}

double watson_direct(double target_conf, const std::vector<double>& out_confs) {
  auto lg = [](double p) {
    p = clamp01(p);
    return std::log(p) - std::log(1.0 - p);
  };
  double mean = 0.0;
  for (double c : out_confs) mean += lg(c);
  return lg(target_conf) - mean / static_cast<double>(out_confs.size());
}

double lira_direct(double x, const std::vector<double>& in_obs,
                   const std::vector<double>& out_obs, double variance_floor) {
  auto moments = [&](const std::vector<double>& v) {
    double mu = 0.0;
    for (double a : v) mu += a;
    mu /= static_cast<double>(v.size());
    double var = 0.0;
    for (double a : v) var += (a - mu) * (a - mu);
    var /= static_cast<double>(v.size() - 1);
    return std::make_pair(mu, std::max(var, variance_floor));
  };
  auto logpdf = [](double v, double mu, double var) {
    return -0.5 * std::log(2.0 * M_PI * var) - (v - mu) * (v - mu) / (2.0 * var);
  };
  const auto [mi, vi] = moments(in_obs);
  const auto [mo, vo] = moments(out_obs);
  return logpdf(x, mi, vi) - logpdf(x, mo, vo);
}

std::vector<double> rmia_direct(const std::vector<double>& target_probs,
                                const std::vector<std::vector<double>>& ref_probs,
                                const std::vector<double>& pop_target_probs,
                                const std::vector<std::vector<double>>& pop_ref_probs,
                                double gamma) {
  auto ratio = [](double t, const std::vector<double>& refs) {
    double m = 0.0;
    for (double r : refs) m += r;
    m = std::max(m / static_cast<double>(refs.size()), 1e-12);
    return t / m;
  };
  std::vector<double> scores;
  for (std::size_t i = 0; i < target_probs.size(); ++i) {
    const double rx = ratio(target_probs[i], ref_probs[i]);
    int wins = 0;
    for (std::size_t z = 0; z < pop_target_probs.size(); ++z) {
      const double rz = std::max(ratio(pop_target_probs[z], pop_ref_probs[z]), 1e-12);
      if (rx / rz >= gamma) ++wins;
    }
    scores.push_back(static_cast<double>(wins) /
                     static_cast<double>(pop_target_probs.size()));
  }
  return scores;
}

double regression_slope(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    sxy += x[i] * y[i];
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

}  // namespace oracles
