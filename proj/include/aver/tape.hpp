#pragma once

// Reverse-mode autodiff tape. Operations append nodes in creation order,
// which is already a topological order because an op can only consume
// tensors that exist. backward() walks the recorded nodes once, in reverse,
// seeds d(loss)/d(loss) = 1, and accumulates gradients into every leaf's
// grad buffer (zero for leaves the loss does not reach).
//
// A tape is single use: a second backward() on the same tape is an error.
// Ops record a node only when at least one input is tracked, so forward
// passes over frozen networks cost no tape memory at all.

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "aver/errors.hpp"
#include "aver/tensor.hpp"

namespace aver {

template <typename T>
class TapeT {
 public:
  TapeT() : serial_(next_serial()) {}
  TapeT(const TapeT&) = delete;
  TapeT& operator=(const TapeT&) = delete;

  std::uint64_t serial() const { return serial_; }
  std::size_t node_count() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  // Registers a parameter (or input) whose gradient is wanted. The returned
  // tensor shares the argument's value and grad buffers. Registering the same
  // tensor twice is allowed; its gradient contributions add up.
  TensorT<T> leaf(TensorT<T>& param) {
    require(!consumed_, "tape already consumed by backward");
    Node node;
    node.numel = param.numel();
    node.leaf_sink = param.grad_buffer();
    nodes_.push_back(std::move(node));
    const NodeId id = static_cast<NodeId>(nodes_.size() - 1);
    return param.with_node(id, serial_);
  }

  // Returns the node id of `t` on this tape, kNoNode if untracked. A tensor
  // tracked by a different tape is a wiring bug and is rejected.
  NodeId node_on(const TensorT<T>& t) const {
    if (!t.tracked()) return kNoNode;
    require(t.tape_serial() == serial_, "tensor belongs to a different tape");
    return t.node();
  }

  // Records an op node and binds the output tensor to it. `backward` receives
  // the tape and the node's own id; it must route grad_of(self) into the
  // node's inputs via accumulate().
  TensorT<T> emit(TensorT<T> value, std::vector<NodeId> inputs,
                  std::function<void(TapeT&, NodeId)> backward) {
    require(!consumed_, "tape already consumed by backward");
    Node node;
    node.numel = value.numel();
    node.inputs = std::move(inputs);
    node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    const NodeId id = static_cast<NodeId>(nodes_.size() - 1);
    return value.with_node(id, serial_);
  }

  const std::vector<T>& grad_of(NodeId id) const {
    const Node& n = node_at(id);
    require(!n.grad.empty(), "gradient of node ", id, " not available");
    return n.grad;
  }

  // Accumulates into a node's gradient; ignores untracked inputs (kNoNode).
  void accumulate(NodeId id, const T* g, std::size_t n) {
    if (id == kNoNode) return;
    Node& node = node_at(id);
    require(n == node.numel, "gradient size mismatch on node ", id);
    if (node.grad.empty()) node.grad.assign(node.numel, T(0));
    for (std::size_t i = 0; i < n; ++i) node.grad[i] += g[i];
  }

  void accumulate(NodeId id, const std::vector<T>& g) { accumulate(id, g.data(), g.size()); }

  // Reverse sweep from `loss`. Fills the grad buffer of every leaf.
  void backward(const TensorT<T>& loss) {
    require(!consumed_, "backward called twice on the same tape");
    require(loss.tracked(), "loss is not tracked by any tape; nothing to differentiate");
    require(loss.tape_serial() == serial_, "loss belongs to a different tape");
    require(loss.numel() == 1, "backward requires a scalar loss, got ", shape_str(loss.shape()));
    consumed_ = true;

    const NodeId loss_id = loss.node();
    std::vector<char> reachable(nodes_.size(), 0);
    reachable[static_cast<std::size_t>(loss_id)] = 1;
    // Creation order is topological, so one reverse pass settles reachability.
    for (NodeId id = loss_id; id >= 0; --id) {
      if (!reachable[static_cast<std::size_t>(id)]) continue;
      for (NodeId in : nodes_[static_cast<std::size_t>(id)].inputs) {
        if (in != kNoNode) reachable[static_cast<std::size_t>(in)] = 1;
      }
    }

    node_at(loss_id).grad.assign(1, T(1));
    for (NodeId id = loss_id; id >= 0; --id) {
      Node& node = nodes_[static_cast<std::size_t>(id)];
      if (!reachable[static_cast<std::size_t>(id)] || !node.backward) continue;
      if (node.grad.empty()) node.grad.assign(node.numel, T(0));
      node.backward(*this, id);
    }

    // Publish leaf gradients. Zero first so that (a) leaves the loss never
    // reaches report exact zeros and (b) a parameter registered as several
    // leaf nodes sums its contributions.
    for (const Node& node : nodes_) {
      if (node.leaf_sink) node.leaf_sink->assign(node.leaf_sink->size(), T(0));
    }
    for (const Node& node : nodes_) {
      if (!node.leaf_sink || node.grad.empty()) continue;
      for (std::size_t i = 0; i < node.numel; ++i) (*node.leaf_sink)[i] += node.grad[i];
    }
  }

 private:
  struct Node {
    std::vector<NodeId> inputs;
    std::size_t numel = 0;
    std::vector<T> grad;
    std::function<void(TapeT&, NodeId)> backward;   // empty for leaves
    std::shared_ptr<std::vector<T>> leaf_sink;      // set for leaves
  };

  Node& node_at(NodeId id) {
    require(id >= 0 && static_cast<std::size_t>(id) < nodes_.size(), "node id ", id,
            " out of range");
    return nodes_[static_cast<std::size_t>(id)];
  }
  const Node& node_at(NodeId id) const { return const_cast<TapeT*>(this)->node_at(id); }

  static std::uint64_t next_serial() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1);
  }

  std::vector<Node> nodes_;
  bool consumed_ = false;
  std::uint64_t serial_ = 0;
};

template <typename T>
void backward(TapeT<T>& tape, const TensorT<T>& loss) {
  tape.backward(loss);
}

using Tape = TapeT<float>;
using Tape64 = TapeT<double>;

}  // namespace aver
