#include "dpnet/autodiff.hpp"

#include "dpnet/ops.hpp"

namespace dpnet {

Tape& Tape::active() {
  static Tape tape;
  return tape;
}

void Tape::reset() {
  nodes_.clear();
  ++gen_;
}

std::int64_t Tape::node_of(const Tensor& t) const {
  if (!t.defined()) return -1;
  const TensorData* d = t.raw();
  return (d->tape_gen == gen_) ? d->node : -1;
}

std::int64_t Tape::ensure_leaf(const Tensor& t) {
  std::int64_t id = node_of(t);
  if (id >= 0) return id;
  if (!t.requires_grad()) return -1;
  nodes_.push_back(Node{"leaf", {}, t.data(), nullptr});
  id = static_cast<std::int64_t>(nodes_.size()) - 1;
  t.raw()->node = id;
  t.raw()->tape_gen = gen_;
  return id;
}

Tensor Tape::record(const char* op, const std::vector<Tensor>& inputs, Tensor out,
                    Vjp vjp) {
  if (!recording_) return out;
  std::vector<std::int64_t> parents(inputs.size(), -1);
  bool connected = false;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    std::int64_t id = inputs[i].requires_grad() ? ensure_leaf(inputs[i])
                                                : node_of(inputs[i]);
    parents[i] = id;
    connected = connected || id >= 0;
  }
  if (!connected) return out;
  nodes_.push_back(Node{op, std::move(parents), out.data(), std::move(vjp)});
  out.raw()->node = static_cast<std::int64_t>(nodes_.size()) - 1;
  out.raw()->tape_gen = gen_;
  out.raw()->requires_grad = true;
  return out;
}

std::vector<Tensor> grad_impl(const Tensor& loss, const std::vector<Tensor>& inputs,
                              bool create_graph, bool deposit_all_leaves) {
  Tape& tape = Tape::active();
  if (loss.numel() != 1)
    throw ShapeError("backward: loss must be a single element, shape " +
                     shape_str(loss.shape()));
  std::int64_t root = tape.node_of(loss);
  if (root < 0)
    throw UsageError("backward: tensor is not part of the active graph");

  const std::size_t n0 = static_cast<std::size_t>(root) + 1;

  // Sources of interest: requested inputs, or every grad-requiring leaf.
  std::vector<char> need(n0, 0);
  if (deposit_all_leaves) {
    for (std::size_t i = 0; i < n0; ++i) {
      const Node& nd = tape.nodes_[i];
      if (nd.vjp) continue;
      auto d = nd.out.lock();
      if (d && d->requires_grad) need[i] = 1;
    }
  } else {
    for (const Tensor& t : inputs) {
      std::int64_t id = tape.node_of(t);
      if (id >= 0 && static_cast<std::size_t>(id) < n0) need[id] = 1;
    }
  }
  for (std::size_t i = 0; i < n0; ++i) {
    if (need[i]) continue;
    for (std::int64_t p : tape.nodes_[i].parents)
      if (p >= 0 && need[p]) {
        need[i] = 1;
        break;
      }
  }

  std::vector<char> reach(n0, 0);
  {
    std::vector<std::int64_t> stack{root};
    reach[root] = 1;
    while (!stack.empty()) {
      std::int64_t i = stack.back();
      stack.pop_back();
      for (std::int64_t p : tape.nodes_[i].parents)
        if (p >= 0 && !reach[p]) {
          reach[p] = 1;
          stack.push_back(p);
        }
    }
  }

  std::vector<Tensor> gmap(n0);
  gmap[root] = Tensor::full(loss.shape(), 1.0);
  {
    RecordGuard rg(create_graph);
    for (std::int64_t i = root; i >= 0; --i) {
      if (!reach[i] || !need[i] || !gmap[i].defined()) continue;
      const Node& nd = tape.nodes_[i];
      if (!nd.vjp) continue;
      std::vector<bool> pneed(nd.parents.size(), false);
      bool any = false;
      for (std::size_t j = 0; j < nd.parents.size(); ++j) {
        std::int64_t p = nd.parents[j];
        pneed[j] = p >= 0 && reach[p] && need[p];
        any = any || pneed[j];
      }
      if (!any) continue;
      std::vector<Tensor> contribs = nd.vjp(gmap[i], pneed);
      for (std::size_t j = 0; j < nd.parents.size(); ++j) {
        if (!pneed[j] || !contribs[j].defined()) continue;
        std::int64_t p = nd.parents[j];
        gmap[p] = gmap[p].defined() ? add(gmap[p], contribs[j]) : contribs[j];
      }
    }
  }

  if (deposit_all_leaves) {
    for (std::size_t i = 0; i < n0; ++i) {
      if (!need[i] || !gmap[i].defined() || tape.nodes_[i].vjp) continue;
      if (auto d = tape.nodes_[i].out.lock()) {
        if (d->grad.empty()) d->grad.assign(d->values.size(), 0.0);
        const auto& gv = gmap[i].values();
        for (std::size_t k = 0; k < gv.size(); ++k) d->grad[k] += gv[k];
      }
    }
    return {};
  }

  std::vector<Tensor> out;
  out.reserve(inputs.size());
  for (const Tensor& t : inputs) {
    std::int64_t id = tape.node_of(t);
    if (id >= 0 && static_cast<std::size_t>(id) < n0 && gmap[id].defined())
      out.push_back(gmap[id]);
    else
      out.push_back(Tensor::zeros(t.shape()));
  }
  return out;
}

void backward(const Tensor& loss) { grad_impl(loss, {}, false, true); }

std::vector<Tensor> grad(const Tensor& loss, const std::vector<Tensor>& inputs,
                         bool create_graph) {
  return grad_impl(loss, inputs, create_graph, false);
}

namespace kink {
namespace {
struct Monitor {
  bool on = false;
  std::uint64_t sig = 1469598103934665603ull;
};
Monitor g_monitor;
}  // namespace

void begin() {
  g_monitor.on = true;
  g_monitor.sig = 1469598103934665603ull;
}

std::uint64_t end() {
  g_monitor.on = false;
  return g_monitor.sig;
}

bool active() { return g_monitor.on; }

void observe(bool branch) {
  g_monitor.sig ^= branch ? 0x9e3779b97f4a7c15ull : 0x2545f4914f6cdd1dull;
  g_monitor.sig *= 1099511628211ull;
}
}  // namespace kink

}  // namespace dpnet
