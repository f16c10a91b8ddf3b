#pragma once

// Grad-CAM: per-channel importance weights from the capture-layer activation
// gradient, and detached-weight heatmaps. Weights are plain arrays (constants
// w.r.t. the graph); the heatmap node stays attached through the activations,
// so a similarity penalty on heatmaps reaches the conv parameters without any
// second-order terms.

#include <string>
#include <vector>

#include "ex2l/autodiff.hpp"
#include "ex2l/ndarray.hpp"
#include "ex2l/network.hpp"

namespace ex2l {

enum class HeadKind { Binary, Multiclass };

// Per-sample target scalars: multiclass picks the target-class logit; binary
// heads emit one logit, selected as +s for target 1 and -s for target 0 so
// the scalar always grows with confidence in the target class.
ad::NodePtr target_logit(ad::NodePtr logits, const std::vector<int>& targets,
                         HeadKind head);

// alpha(b,k) = mean over pixels of d(target)/d(A^k_b). `target` may be the
// per-sample vector (summed internally; samples do not mix) or an
// already-summed scalar.
NDArray cam_weights(const ForwardTrace& trace, const ad::NodePtr& target);

// ReLU(sum_k alpha_k A^k) as a graph node, B x H x W.
ad::NodePtr heatmap(const ForwardTrace& trace, const NDArray& weights);

// One sample's map as a plain H x W array.
NDArray heatmap_slice(const ad::NodePtr& maps, std::size_t sample);

// 8-bit grayscale PGM (P5, maxval 255), min-max normalized per map;
// constant and all-zero maps export as all-zero pixels.
void export_heatmap(const NDArray& map, const std::string& path);

}  // namespace ex2l
