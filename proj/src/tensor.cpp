#include "vloc/tensor.hpp"

#include <unordered_set>

namespace vloc {

void backward(const Tensor& output) {
  if (!output.defined()) throw Error("backward: undefined tensor");
  if (output.size() != 1) throw ShapeError("backward: output must be scalar");
  if (!output.requires_grad()) return; // no requires_grad leaf is reachable

  // Iterative post-order DFS over the requires_grad subgraph.
  std::vector<detail::Node*> topo;
  std::unordered_set<detail::Node*> visited;
  struct Frame {
    detail::Node* node;
    std::size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({output.node(), 0});
  visited.insert(output.node());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      detail::Node* p = f.node->parents[f.next_parent++].node();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      topo.push_back(f.node);
      stack.pop_back();
    }
  }

  // Interior gradients are per-pass scratch; leaves accumulate across calls.
  for (detail::Node* n : topo) {
    if (n->is_leaf()) {
      n->grad_ref();
    } else {
      n->grad.assign(n->values.size(), 0.0);
    }
  }
  output.node()->grad_ref()[0] += 1.0;

  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
}

} // namespace vloc
