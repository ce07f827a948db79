#include "sdelab/tape.hpp"

#include <cmath>
#include <cstddef>

#include "sdelab/error.hpp"

namespace sdelab {

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kConstant: return "constant";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kScalarMul: return "scalar_mul";
    case OpKind::kMul: return "mul";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kConcatLast: return "concat_last";
    case OpKind::kRelu: return "relu";
    case OpKind::kTanh: return "tanh";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kLog: return "log";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kSquaredNorm: return "squared_norm";
    case OpKind::kCrossEntropyLogits: return "cross_entropy_with_logits";
  }
  return "?";
}

namespace {

bool is_bias_broadcast(const Tensor& a, const Tensor& b) {
  return a.rank() == 2 && b.rank() == 1 && a.cols() == b.dim(0);
}

void softmax_rows(const double* in, double* out, int rows, int cols) {
  for (int r = 0; r < rows; ++r) {
    const double* x = in + static_cast<std::ptrdiff_t>(r) * cols;
    double* y = out + static_cast<std::ptrdiff_t>(r) * cols;
    double m = x[0];
    for (int c = 1; c < cols; ++c) m = std::max(m, x[c]);
    double z = 0.0;
    for (int c = 0; c < cols; ++c) {
      y[c] = std::exp(x[c] - m);
      z += y[c];
    }
    for (int c = 0; c < cols; ++c) y[c] /= z;
  }
}

// Forward evaluation of a single node from its parents' values. Shared by op
// construction and replay so both follow exactly the same arithmetic.
Tensor eval_node(const TapeNode& n, const Tensor* a, const Tensor* b, Tensor* aux_out) {
  switch (n.kind) {
    case OpKind::kLeaf:
    case OpKind::kConstant:
      return n.value;
    case OpKind::kAdd: {
      if (a->same_shape(*b)) {
        Tensor out = *a;
        for (int i = 0; i < out.numel(); ++i) out[i] += (*b)[i];
        return out;
      }
      // [r,c] + [c]
      Tensor out = *a;
      const int rows = a->rows(), cols = a->cols();
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) out.at(r, c) += (*b)[c];
      return out;
    }
    case OpKind::kSub: {
      Tensor out = *a;
      for (int i = 0; i < out.numel(); ++i) out[i] -= (*b)[i];
      return out;
    }
    case OpKind::kScalarMul: {
      Tensor out = *a;
      for (int i = 0; i < out.numel(); ++i) out[i] *= n.scalar;
      return out;
    }
    case OpKind::kMul: {
      Tensor out = *a;
      for (int i = 0; i < out.numel(); ++i) out[i] *= (*b)[i];
      return out;
    }
    case OpKind::kMatMul: {
      const int m = a->rows(), k = a->cols(), p = b->cols();
      Tensor out({m, p});
      const double* A = a->data();
      const double* B = b->data();
      double* C = out.data();
      for (int i = 0; i < m; ++i) {
        double* Ci = C + static_cast<std::ptrdiff_t>(i) * p;
        const double* Ai = A + static_cast<std::ptrdiff_t>(i) * k;
        for (int kk = 0; kk < k; ++kk) {
          const double aik = Ai[kk];
          const double* Bk = B + static_cast<std::ptrdiff_t>(kk) * p;
          for (int j = 0; j < p; ++j) Ci[j] += aik * Bk[j];
        }
      }
      return out;
    }
    case OpKind::kConcatLast: {
      if (a->rank() == 1) {
        std::vector<double> d(a->raw());
        d.insert(d.end(), b->raw().begin(), b->raw().end());
        return Tensor::vector(std::move(d));
      }
      const int rows = a->rows(), ca = a->cols(), cb = b->cols();
      Tensor out({rows, ca + cb});
      for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < ca; ++c) out.at(r, c) = a->at(r, c);
        for (int c = 0; c < cb; ++c) out.at(r, ca + c) = b->at(r, c);
      }
      return out;
    }
    case OpKind::kRelu: {
      Tensor out = *a;
      for (int i = 0; i < out.numel(); ++i) out[i] = out[i] > 0.0 ? out[i] : 0.0;
      return out;
    }
    case OpKind::kTanh: {
      Tensor out = *a;
      for (int i = 0; i < out.numel(); ++i) out[i] = std::tanh(out[i]);
      return out;
    }
    case OpKind::kSoftmax: {
      Tensor out = *a;
      const int cols = a->rank() == 2 ? a->cols() : a->numel();
      const int rows = a->numel() / cols;
      softmax_rows(a->data(), out.data(), rows, cols);
      return out;
    }
    case OpKind::kLog: {
      Tensor out = *a;
      for (int i = 0; i < out.numel(); ++i) out[i] = std::log(out[i]);
      return out;
    }
    case OpKind::kSum: {
      double s = 0.0;
      for (int i = 0; i < a->numel(); ++i) s += (*a)[i];
      return Tensor::scalar(s);
    }
    case OpKind::kMean: {
      double s = 0.0;
      for (int i = 0; i < a->numel(); ++i) s += (*a)[i];
      return Tensor::scalar(s / a->numel());
    }
    case OpKind::kSquaredNorm: {
      double s = 0.0;
      for (int i = 0; i < a->numel(); ++i) s += (*a)[i] * (*a)[i];
      return Tensor::scalar(s);
    }
    case OpKind::kCrossEntropyLogits: {
      const int cols = a->rank() == 2 ? a->cols() : a->numel();
      const int rows = a->numel() / cols;
      Tensor probs = *a;
      softmax_rows(a->data(), probs.data(), rows, cols);
      Tensor out({rows});
      for (int r = 0; r < rows; ++r) {
        const double* x = a->data() + static_cast<std::ptrdiff_t>(r) * cols;
        double m = x[0];
        for (int c = 1; c < cols; ++c) m = std::max(m, x[c]);
        double z = 0.0;
        for (int c = 0; c < cols; ++c) z += std::exp(x[c] - m);
        out[r] = m + std::log(z) - x[n.targets[static_cast<std::size_t>(r)]];
      }
      if (aux_out) *aux_out = std::move(probs);
      return out;
    }
  }
  throw Error("eval_node: unreachable");
}

}  // namespace

Tape::NodeId Tape::push(TapeNode node) {
  nodes_.push_back(std::move(node));
  return static_cast<NodeId>(nodes_.size() - 1);
}

Tape::NodeId Tape::leaf(Tensor v) {
  TapeNode n;
  n.kind = OpKind::kLeaf;
  n.value = std::move(v);
  NodeId id = push(std::move(n));
  leaves_.push_back(id);
  return id;
}

Tape::NodeId Tape::constant(Tensor v) {
  TapeNode n;
  n.kind = OpKind::kConstant;
  n.value = std::move(v);
  return push(std::move(n));
}

Tape::NodeId Tape::add(NodeId a, NodeId b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  if (!va.same_shape(vb) && !is_bias_broadcast(va, vb))
    throw ShapeError("add", va.shape(), vb.shape());
  TapeNode n;
  n.kind = OpKind::kAdd;
  n.a = a;
  n.b = b;
  n.value = eval_node(n, &va, &vb, nullptr);
  return push(std::move(n));
}

Tape::NodeId Tape::sub(NodeId a, NodeId b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  if (!va.same_shape(vb)) throw ShapeError("sub", va.shape(), vb.shape());
  TapeNode n;
  n.kind = OpKind::kSub;
  n.a = a;
  n.b = b;
  n.value = eval_node(n, &va, &vb, nullptr);
  return push(std::move(n));
}

Tape::NodeId Tape::scalar_mul(double c, NodeId a) {
  TapeNode n;
  n.kind = OpKind::kScalarMul;
  n.a = a;
  n.scalar = c;
  n.value = eval_node(n, &value(a), nullptr, nullptr);
  return push(std::move(n));
}

Tape::NodeId Tape::mul(NodeId a, NodeId b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  if (!va.same_shape(vb)) throw ShapeError("mul", va.shape(), vb.shape());
  TapeNode n;
  n.kind = OpKind::kMul;
  n.a = a;
  n.b = b;
  n.value = eval_node(n, &va, &vb, nullptr);
  return push(std::move(n));
}

Tape::NodeId Tape::matmul(NodeId a, NodeId b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  if (va.rank() != 2 || vb.rank() != 2 || va.cols() != vb.rows())
    throw ShapeError("matmul", va.shape(), vb.shape());
  TapeNode n;
  n.kind = OpKind::kMatMul;
  n.a = a;
  n.b = b;
  n.value = eval_node(n, &va, &vb, nullptr);
  return push(std::move(n));
}

Tape::NodeId Tape::concat_last(NodeId a, NodeId b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  const bool ok = (va.rank() == 1 && vb.rank() == 1) ||
                  (va.rank() == 2 && vb.rank() == 2 && va.rows() == vb.rows());
  if (!ok) throw ShapeError("concat_last", va.shape(), vb.shape());
  TapeNode n;
  n.kind = OpKind::kConcatLast;
  n.a = a;
  n.b = b;
  n.value = eval_node(n, &va, &vb, nullptr);
  return push(std::move(n));
}

Tape::NodeId Tape::relu(NodeId a) {
  TapeNode n;
  n.kind = OpKind::kRelu;
  n.a = a;
  n.value = eval_node(n, &value(a), nullptr, nullptr);
  return push(std::move(n));
}

Tape::NodeId Tape::tanh(NodeId a) {
  TapeNode n;
  n.kind = OpKind::kTanh;
  n.a = a;
  n.value = eval_node(n, &value(a), nullptr, nullptr);
  return push(std::move(n));
}

Tape::NodeId Tape::softmax(NodeId a) {
  if (value(a).rank() > 2) throw ShapeError("softmax", "rank must be 1 or 2");
  TapeNode n;
  n.kind = OpKind::kSoftmax;
  n.a = a;
  n.value = eval_node(n, &value(a), nullptr, nullptr);
  return push(std::move(n));
}

Tape::NodeId Tape::log(NodeId a) {
  TapeNode n;
  n.kind = OpKind::kLog;
  n.a = a;
  n.value = eval_node(n, &value(a), nullptr, nullptr);
  if (!n.value.all_finite())
    throw Error("log: non-finite result (non-positive input)");
  return push(std::move(n));
}

Tape::NodeId Tape::sum(NodeId a) {
  TapeNode n;
  n.kind = OpKind::kSum;
  n.a = a;
  n.value = eval_node(n, &value(a), nullptr, nullptr);
  return push(std::move(n));
}

Tape::NodeId Tape::mean(NodeId a) {
  TapeNode n;
  n.kind = OpKind::kMean;
  n.a = a;
  n.value = eval_node(n, &value(a), nullptr, nullptr);
  return push(std::move(n));
}

Tape::NodeId Tape::squared_norm(NodeId a) {
  TapeNode n;
  n.kind = OpKind::kSquaredNorm;
  n.a = a;
  n.value = eval_node(n, &value(a), nullptr, nullptr);
  return push(std::move(n));
}

Tape::NodeId Tape::cross_entropy_with_logits(NodeId logits, std::vector<int> targets) {
  const Tensor& v = value(logits);
  const int cols = v.rank() == 2 ? v.cols() : v.numel();
  const int rows = v.numel() / cols;
  if (v.rank() > 2 || static_cast<int>(targets.size()) != rows)
    throw ShapeError("cross_entropy_with_logits",
                     "targets length " + std::to_string(targets.size()) +
                         " vs batch " + std::to_string(rows));
  for (int t : targets)
    if (t < 0 || t >= cols)
      throw ShapeError("cross_entropy_with_logits",
                       "target class " + std::to_string(t) + " out of range");
  TapeNode n;
  n.kind = OpKind::kCrossEntropyLogits;
  n.a = logits;
  n.targets = std::move(targets);
  n.value = eval_node(n, &v, nullptr, &n.aux);
  return push(std::move(n));
}

Gradients Tape::backward(NodeId output) const {
  const std::size_t out = static_cast<std::size_t>(output);
  if (out >= nodes_.size()) throw Error("backward: bad node id");
  if (nodes_[out].value.numel() != 1)
    throw ShapeError("backward", "output must be scalar, got " +
                                     shape_str(nodes_[out].value.shape()));

  std::vector<Tensor> adj(nodes_.size());
  std::vector<bool> touched(nodes_.size(), false);
  auto bump = [&](NodeId id) -> Tensor& {
    const auto i = static_cast<std::size_t>(id);
    if (!touched[i]) {
      adj[i] = Tensor(nodes_[i].value.shape());
      touched[i] = true;
    }
    return adj[i];
  };

  bump(output)[0] = 1.0;

  for (std::int32_t id = output; id >= 0; --id) {
    const auto i = static_cast<std::size_t>(id);
    if (!touched[i]) continue;
    const TapeNode& n = nodes_[i];
    const Tensor& g = adj[i];
    switch (n.kind) {
      case OpKind::kLeaf:
      case OpKind::kConstant:
        break;
      case OpKind::kAdd: {
        Tensor& ga = bump(n.a);
        for (int j = 0; j < g.numel(); ++j) ga[j] += g[j];
        Tensor& gb = bump(n.b);
        if (gb.same_shape(g)) {
          for (int j = 0; j < g.numel(); ++j) gb[j] += g[j];
        } else {  // bias broadcast: column sums
          const int rows = g.rows(), cols = g.cols();
          for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c) gb[c] += g.at(r, c);
        }
        break;
      }
      case OpKind::kSub: {
        Tensor& ga = bump(n.a);
        for (int j = 0; j < g.numel(); ++j) ga[j] += g[j];
        Tensor& gb = bump(n.b);
        for (int j = 0; j < g.numel(); ++j) gb[j] -= g[j];
        break;
      }
      case OpKind::kScalarMul: {
        Tensor& ga = bump(n.a);
        for (int j = 0; j < g.numel(); ++j) ga[j] += n.scalar * g[j];
        break;
      }
      case OpKind::kMul: {
        const Tensor& va = nodes_[static_cast<std::size_t>(n.a)].value;
        const Tensor& vb = nodes_[static_cast<std::size_t>(n.b)].value;
        Tensor& ga = bump(n.a);
        for (int j = 0; j < g.numel(); ++j) ga[j] += g[j] * vb[j];
        Tensor& gb = bump(n.b);
        for (int j = 0; j < g.numel(); ++j) gb[j] += g[j] * va[j];
        break;
      }
      case OpKind::kMatMul: {
        const Tensor& A = nodes_[static_cast<std::size_t>(n.a)].value;
        const Tensor& B = nodes_[static_cast<std::size_t>(n.b)].value;
        const int m = A.rows(), k = A.cols(), p = B.cols();
        const double* Gd = g.data();
        const double* Bd = B.data();
        const double* Ad = A.data();
        Tensor& ga = bump(n.a);  // g . B^T
        double* gad = ga.data();
        for (int r = 0; r < m; ++r) {
          const double* Gr = Gd + static_cast<std::ptrdiff_t>(r) * p;
          double* gar = gad + static_cast<std::ptrdiff_t>(r) * k;
          for (int c = 0; c < k; ++c) {
            const double* Bc = Bd + static_cast<std::ptrdiff_t>(c) * p;
            double s = 0.0;
            for (int j = 0; j < p; ++j) s += Gr[j] * Bc[j];
            gar[c] += s;
          }
        }
        Tensor& gb = bump(n.b);  // A^T . g
        double* gbd = gb.data();
        for (int r = 0; r < m; ++r) {
          const double* Ar = Ad + static_cast<std::ptrdiff_t>(r) * k;
          const double* Gr = Gd + static_cast<std::ptrdiff_t>(r) * p;
          for (int c = 0; c < k; ++c) {
            const double a_rc = Ar[c];
            double* gbc = gbd + static_cast<std::ptrdiff_t>(c) * p;
            for (int j = 0; j < p; ++j) gbc[j] += a_rc * Gr[j];
          }
        }
        break;
      }
      case OpKind::kConcatLast: {
        const Tensor& va = nodes_[static_cast<std::size_t>(n.a)].value;
        Tensor& ga = bump(n.a);
        Tensor& gb = bump(n.b);
        if (va.rank() == 1) {
          const int na = va.numel();
          for (int j = 0; j < na; ++j) ga[j] += g[j];
          for (int j = 0; j < gb.numel(); ++j) gb[j] += g[na + j];
        } else {
          const int rows = va.rows(), ca = va.cols(), cb = gb.cols();
          for (int r = 0; r < rows; ++r) {
            for (int c = 0; c < ca; ++c) ga.at(r, c) += g.at(r, c);
            for (int c = 0; c < cb; ++c) gb.at(r, c) += g.at(r, ca + c);
          }
        }
        break;
      }
      case OpKind::kRelu: {
        const Tensor& va = nodes_[static_cast<std::size_t>(n.a)].value;
        Tensor& ga = bump(n.a);
        // Subgradient at the kink is 0.
        for (int j = 0; j < g.numel(); ++j) ga[j] += va[j] > 0.0 ? g[j] : 0.0;
        break;
      }
      case OpKind::kTanh: {
        Tensor& ga = bump(n.a);
        for (int j = 0; j < g.numel(); ++j) {
          const double y = n.value[j];
          ga[j] += g[j] * (1.0 - y * y);
        }
        break;
      }
      case OpKind::kSoftmax: {
        const Tensor& y = n.value;
        const int cols = y.rank() == 2 ? y.cols() : y.numel();
        const int rows = y.numel() / cols;
        Tensor& ga = bump(n.a);
        for (int r = 0; r < rows; ++r) {
          double dot = 0.0;
          for (int c = 0; c < cols; ++c) dot += g[r * cols + c] * y[r * cols + c];
          for (int c = 0; c < cols; ++c)
            ga[r * cols + c] += y[r * cols + c] * (g[r * cols + c] - dot);
        }
        break;
      }
      case OpKind::kLog: {
        const Tensor& va = nodes_[static_cast<std::size_t>(n.a)].value;
        Tensor& ga = bump(n.a);
        for (int j = 0; j < g.numel(); ++j) ga[j] += g[j] / va[j];
        break;
      }
      case OpKind::kSum: {
        Tensor& ga = bump(n.a);
        for (int j = 0; j < ga.numel(); ++j) ga[j] += g[0];
        break;
      }
      case OpKind::kMean: {
        Tensor& ga = bump(n.a);
        const double s = g[0] / ga.numel();
        for (int j = 0; j < ga.numel(); ++j) ga[j] += s;
        break;
      }
      case OpKind::kSquaredNorm: {
        const Tensor& va = nodes_[static_cast<std::size_t>(n.a)].value;
        Tensor& ga = bump(n.a);
        for (int j = 0; j < ga.numel(); ++j) ga[j] += 2.0 * g[0] * va[j];
        break;
      }
      case OpKind::kCrossEntropyLogits: {
        const Tensor& probs = n.aux;
        const int cols = probs.rank() == 2 ? probs.cols() : probs.numel();
        const int rows = probs.numel() / cols;
        Tensor& ga = bump(n.a);
        for (int r = 0; r < rows; ++r) {
          const double gr = g[r];
          for (int c = 0; c < cols; ++c) ga[r * cols + c] += gr * probs[r * cols + c];
          ga[r * cols + n.targets[static_cast<std::size_t>(r)]] -= gr;
        }
        break;
      }
    }
  }

  // Materialize zeros for untouched nodes so lookups always have a shape.
  for (std::size_t i = 0; i < nodes_.size(); ++i)
    if (!touched[i]) adj[i] = Tensor(nodes_[i].value.shape());
  return Gradients(std::move(adj));
}

bool Tape::replay_matches() const {
  for (const TapeNode& n : nodes_) {
    if (n.kind == OpKind::kLeaf || n.kind == OpKind::kConstant) continue;
    const Tensor* a = n.a >= 0 ? &nodes_[static_cast<std::size_t>(n.a)].value : nullptr;
    const Tensor* b = n.b >= 0 ? &nodes_[static_cast<std::size_t>(n.b)].value : nullptr;
    Tensor again = eval_node(n, a, b, nullptr);
    if (!again.same_shape(n.value)) return false;
    for (int i = 0; i < again.numel(); ++i)
      if (again[i] != n.value[i]) return false;
  }
  return true;
}

bool Tape::has_relu_kink(double tol) const {
  for (const TapeNode& n : nodes_) {
    if (n.kind != OpKind::kRelu) continue;
    const Tensor& in = nodes_[static_cast<std::size_t>(n.a)].value;
    for (int i = 0; i < in.numel(); ++i)
      if (std::abs(in[i]) <= tol) return true;
  }
  return false;
}

}  // namespace sdelab
