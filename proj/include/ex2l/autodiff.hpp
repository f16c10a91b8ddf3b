#pragma once

// Reverse-mode autodiff over NDArray. Nodes form a DAG through shared_ptr
// parent links; values are computed eagerly at construction and the tape is
// whatever the caller keeps alive. backward() accumulates into the grad
// slots of requires-grad leaves (adds; callers zero explicitly, normally via
// the optimizer step). grad_of() answers first-order gradient-of-intermediate
// queries without touching grad slots and without creating nodes.

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "ex2l/ndarray.hpp"

namespace ex2l::ad {

struct Node;
using NodePtr = std::shared_ptr<Node>;

// Accumulates (+=) this node's out-gradient into parent buffers. The pointer
// for a parent is null when its gradient is not required; implementations
// must skip it.
using BackwardFn =
    std::function<void(const Node& self, const NDArray& gout,
                       const std::vector<NDArray*>& parent_grads)>;

struct Node {
  NDArray value;
  NDArray grad;  // leaf accumulator; empty until first backward touches it
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  BackwardFn backward_fn;  // null for leaves and constants
  const char* op = "leaf";
  std::uint64_t id = 0;  // creation serial; parents always have smaller ids
};

// Monotone counter of nodes ever created; lets tests assert that a query
// did not extend the graph.
std::uint64_t nodes_created();

// ---- leaves ----------------------------------------------------------
NodePtr constant(NDArray v);
NodePtr param(NDArray v);  // requires-grad leaf with persistent identity

// ---- elementwise -----------------------------------------------------
NodePtr add(NodePtr a, NodePtr b);
NodePtr sub(NodePtr a, NodePtr b);
NodePtr mul(NodePtr a, NodePtr b);
NodePtr div_eps(NodePtr a, NodePtr b, double eps);  // a / (b + eps)
NodePtr add_scalar(NodePtr a, double c);
NodePtr mul_scalar(NodePtr a, double c);  // c == 0 contributes no gradient
NodePtr abs_val(NodePtr a);
NodePtr sqrt_val(NodePtr a);              // grad guarded near 0
NodePtr log_eps(NodePtr a, double eps);   // ln(a + eps)
NodePtr relu(NodePtr a);

// ---- reductions & row broadcasting (first axis = batch) --------------
NodePtr sum_all(NodePtr a);   // -> scalar
NodePtr mean_all(NodePtr a);  // -> scalar
NodePtr sum_rows(NodePtr a);  // B x rest -> B
NodePtr sub_rows(NodePtr a, NodePtr s);                 // a(b,i) - s(b)
NodePtr mul_rows(NodePtr a, NodePtr s);                 // a(b,i) * s(b)
NodePtr div_rows_eps(NodePtr a, NodePtr s, double eps); // a(b,i) / (s(b)+eps)
NodePtr dot_const(NodePtr a, NDArray w);  // sum(w*a) -> scalar, w constant

// Per-row L1 normalization with the uniform fallback for all-zero rows.
// Rows sum to 1 exactly; gradients of fallback rows are zero.
NodePtr l1_normalize_rows(NodePtr a, double eps);

NodePtr reshape(NodePtr a, std::vector<std::size_t> shape);

// ---- network layers ---------------------------------------------------
// x: B x Cin x H x W, w: Cout x Cin x kh x kw, b: Cout
NodePtr conv2d(NodePtr x, NodePtr w, NodePtr b, int stride, int pad);
NodePtr maxpool2(NodePtr x);  // 2x2, stride 2
// x: B x D, w: M x D, b: M -> B x M
NodePtr dense(NodePtr x, NodePtr w, NodePtr b);

// ---- logit selection & losses -----------------------------------------
// Binary head: per-sample logit when target==1, negated when target==0.
NodePtr select_signed(NodePtr logits, const std::vector<int>& targets);
// Multiclass head: the target-class logit per sample.
NodePtr select_class(NodePtr logits, const std::vector<int>& targets);

NodePtr bce_with_logits(NodePtr logits, const std::vector<int>& targets);      // mean
NodePtr bce_per_example(NodePtr logits, const std::vector<int>& targets);      // B
NodePtr cce_with_logits(NodePtr logits, const std::vector<int>& targets);      // mean
NodePtr cce_per_example(NodePtr logits, const std::vector<int>& targets);      // B

// ---- attribution support ----------------------------------------------
// act: B x K x H x W, channel_weights: B x K constants ->
//   out(b,h,w) = sum_k channel_weights(b,k) * act(b,k,h,w)
NodePtr scale_channels_sum(NodePtr act, NDArray channel_weights);

// ---- gradient queries ---------------------------------------------------
// Accumulate d(root)/d(leaf) into every reachable requires-grad leaf.
void backward(const NodePtr& root);

// d(root)/d(target) as a plain array. First-order only: no nodes are
// created, no grad slot is read or written. Throws UsageError when target is
// not reachable from root.
NDArray grad_of(const NodePtr& root, const NodePtr& target);

// Number of worker threads used by the batched kernels (conv/dense).
// Results are bit-deterministic for a fixed count. Default 1.
void set_kernel_threads(int n);
int kernel_threads();

}  // namespace ex2l::ad
