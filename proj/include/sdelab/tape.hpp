#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sdelab/tensor.hpp"

namespace sdelab {

enum class OpKind {
  kLeaf,       // trainable parameter (entry point)
  kConstant,   // data / noise; gradients computed but not an entry point
  kAdd,        // same shape, or [r,c] + [c] row broadcast (bias)
  kSub,
  kScalarMul,  // compile-time scalar times tensor
  kMul,        // elementwise
  kMatMul,     // [m,k] x [k,n]
  kConcatLast,
  kRelu,
  kTanh,
  kSoftmax,    // last axis
  kLog,
  kSum,        // full reduction -> scalar
  kMean,
  kSquaredNorm,
  kCrossEntropyLogits,  // per-sample -log softmax(logits)[target]
};

const char* op_name(OpKind kind);

struct TapeNode {
  OpKind kind;
  std::int32_t a = -1;
  std::int32_t b = -1;
  double scalar = 0.0;          // kScalarMul coefficient
  std::vector<int> targets;     // kCrossEntropyLogits class indices
  Tensor value;
  Tensor aux;                   // cached softmax probs for cross-entropy
};

// Gradients of one backward pass, indexed by node id. Nodes that were not on
// any path to the output report zeros.
class Gradients {
 public:
  explicit Gradients(std::vector<Tensor> adjoints) : adj_(std::move(adjoints)) {}
  const Tensor& at(std::int32_t id) const { return adj_[static_cast<std::size_t>(id)]; }

 private:
  std::vector<Tensor> adj_;
};

// Append-only record of a forward computation. Parent indices always precede
// the node, so the node list is a topological order by construction. All
// reductions run in fixed sequential order, which makes values and gradients
// bit-reproducible for identical inputs.
class Tape {
 public:
  using NodeId = std::int32_t;

  NodeId leaf(Tensor v);
  NodeId constant(Tensor v);

  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId scalar_mul(double c, NodeId a);
  NodeId mul(NodeId a, NodeId b);
  NodeId matmul(NodeId a, NodeId b);
  NodeId concat_last(NodeId a, NodeId b);
  NodeId relu(NodeId a);
  NodeId tanh(NodeId a);
  NodeId softmax(NodeId a);
  NodeId log(NodeId a);
  NodeId sum(NodeId a);
  NodeId mean(NodeId a);
  NodeId squared_norm(NodeId a);
  NodeId cross_entropy_with_logits(NodeId logits, std::vector<int> targets);

  const Tensor& value(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  const TapeNode& node(NodeId id) const { return nodes_[static_cast<std::size_t>(id)]; }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<NodeId>& leaves() const { return leaves_; }

  // Reverse accumulation from a scalar output. Throws on non-scalar output.
  Gradients backward(NodeId output) const;

  // Recomputes every non-leaf value from its parents and compares bit-exactly.
  bool replay_matches() const;

  // True when any relu input seen on this tape lies within tol of the kink.
  bool has_relu_kink(double tol) const;

 private:
  NodeId push(TapeNode node);
  std::vector<TapeNode> nodes_;
  std::vector<NodeId> leaves_;
};

}  // namespace sdelab
