#include "sdelab/gradcheck.hpp"

#include <cmath>

namespace sdelab {

namespace {

struct Eval {
  double value;
  bool kink;
};

Eval evaluate(const TapeBuilder& build, const std::vector<Tensor>& params,
              double kink_tol) {
  Tape tape;
  std::vector<Tape::NodeId> ids;
  ids.reserve(params.size());
  for (const Tensor& p : params) ids.push_back(tape.leaf(p));
  Tape::NodeId out = build(tape, ids);
  return {tape.value(out).item(), tape.has_relu_kink(kink_tol)};
}

}  // namespace

GradCheckReport grad_check(const TapeBuilder& build,
                           const std::vector<Tensor>& params, double step,
                           double tol) {
  const double kink_tol = 10.0 * step;
  GradCheckReport report;

  Tape tape;
  std::vector<Tape::NodeId> ids;
  for (const Tensor& p : params) ids.push_back(tape.leaf(p));
  Tape::NodeId out = build(tape, ids);
  Gradients grads = tape.backward(out);

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    const Tensor& analytic = grads.at(ids[pi]);
    for (int c = 0; c < params[pi].numel(); ++c) {
      std::vector<Tensor> plus = params;
      plus[pi][c] += step;
      std::vector<Tensor> minus = params;
      minus[pi][c] -= step;
      Eval hi = evaluate(build, plus, kink_tol);
      Eval lo = evaluate(build, minus, kink_tol);
      if (hi.kink || lo.kink) {
        report.excluded.emplace_back(static_cast<int>(pi), c);
        continue;
      }
      const double fd = (hi.value - lo.value) / (2.0 * step);
      const double g = analytic[c];
      const double denom = std::max({std::abs(g), std::abs(fd), 1e-6});
      const double rel = std::abs(g - fd) / denom;
      report.max_rel_error = std::max(report.max_rel_error, rel);
      ++report.n_checked;
    }
  }
  report.pass = report.max_rel_error <= tol;
  return report;
}

}  // namespace sdelab
