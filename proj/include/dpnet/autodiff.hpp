// Tape-based reverse-mode differentiation. The graph is an append-only node
// list rebuilt each forward pass; backward walks it in reverse append order,
// which is a valid topological order by construction.
//
// Backward rules are themselves written as tensor ops, so running a backward
// pass with create_graph=true records the gradient computation and a second
// backward through it yields exact higher-order terms (needed by the
// unrolled hypergradient mode).
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "dpnet/tensor.hpp"

namespace dpnet {

// Per-parent gradient contributions; entries for parents with need=false may
// be left undefined.
using Vjp = std::function<std::vector<Tensor>(const Tensor& gout,
                                              const std::vector<bool>& need)>;

struct Node {
  const char* op;
  std::vector<std::int64_t> parents;  // -1 marks constant inputs
  std::weak_ptr<TensorData> out;
  Vjp vjp;  // null for leaves
};

class Tape {
 public:
  static Tape& active();

  bool recording() const { return recording_; }
  std::uint64_t generation() const { return gen_; }
  std::size_t size() const { return nodes_.size(); }

  // Drops all nodes and invalidates prior node ids.
  void reset();

  // Registers a leaf node for a grad-requiring tensor (idempotent).
  std::int64_t ensure_leaf(const Tensor& t);
  // Live node id of t, or -1.
  std::int64_t node_of(const Tensor& t) const;

  // Appends an op node if recording and any input is graph-connected;
  // otherwise returns out untouched.
  Tensor record(const char* op, const std::vector<Tensor>& inputs, Tensor out,
                Vjp vjp);

  const Node& node(std::int64_t id) const { return nodes_[id]; }

 private:
  friend struct RecordGuard;
  friend std::vector<Tensor> grad_impl(const Tensor&, const std::vector<Tensor>&,
                                       bool, bool);
  std::vector<Node> nodes_;
  bool recording_ = true;
  std::uint64_t gen_ = 1;
};

// RAII toggle for recording; construct with false to run ops untracked.
struct RecordGuard {
  explicit RecordGuard(bool on) : prev_(Tape::active().recording_) {
    Tape::active().recording_ = on;
  }
  ~RecordGuard() { Tape::active().recording_ = prev_; }

 private:
  bool prev_;
};

// Accumulates d(loss)/d(leaf) into every grad-requiring leaf's grad buffer.
void backward(const Tensor& loss);

// Returns d(loss)/d(input) per input (zeros for inputs the loss does not
// reach). With create_graph the returned tensors are graph-connected and can
// be differentiated again.
std::vector<Tensor> grad(const Tensor& loss, const std::vector<Tensor>& inputs,
                         bool create_graph = false);

// Branch-signature monitor used by the finite-difference checker: piecewise
// ops feed one bit per element while active; two evaluations with different
// signatures crossed a kink, so their central difference is invalid.
namespace kink {
void begin();
std::uint64_t end();
bool active();
void observe(bool branch);
}  // namespace kink

}  // namespace dpnet
