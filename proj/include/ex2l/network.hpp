#pragma once

// Small sequential CNNs: layer descriptions, parameter store, forward
// tracing with a designated capture layer for attribution, plain SGD, and
// the finite-difference gradient checker.

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ex2l/autodiff.hpp"
#include "ex2l/ndarray.hpp"
#include "ex2l/rng.hpp"

namespace ex2l {

enum class LayerKind { Conv2d, Relu, MaxPool2, Flatten, Dense };

struct LayerSpec {
  LayerKind kind{};
  int in_ch = 0, out_ch = 0, kernel = 0, pad = 0, stride = 1;  // conv2d
  int in_dim = 0, out_dim = 0;                                 // dense

  static LayerSpec conv(int in_ch, int out_ch, int kernel, int pad, int stride = 1) {
    LayerSpec s;
    s.kind = LayerKind::Conv2d;
    s.in_ch = in_ch; s.out_ch = out_ch; s.kernel = kernel; s.pad = pad; s.stride = stride;
    return s;
  }
  static LayerSpec relu() { return {LayerKind::Relu}; }
  static LayerSpec maxpool2() { return {LayerKind::MaxPool2}; }
  static LayerSpec flatten() { return {LayerKind::Flatten}; }
  static LayerSpec dense(int in_dim, int out_dim) {
    LayerSpec s;
    s.kind = LayerKind::Dense;
    s.in_dim = in_dim; s.out_dim = out_dim;
    return s;
  }
};

struct ForwardTrace {
  ad::NodePtr input;
  std::vector<ad::NodePtr> layer_outputs;
  ad::NodePtr activation;  // capture-layer output, B x K x H x W
  ad::NodePtr latent;      // flattened pre-head features, B x d
  ad::NodePtr logits;      // B x n_logits
};

class Network {
 public:
  Network() = default;

  // Parameters have persistent identity through shared nodes, so copying a
  // Network would alias them; move instead.
  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;
  Network(Network&&) = default;
  Network& operator=(Network&&) = default;

  // Validates that consecutive layer shapes compose on the given input
  // geometry and that the capture layer emits a rank-3-per-sample map.
  // Parameters are Kaiming-uniform (fan-in), biases zero, drawn from rng.
  Network(std::vector<LayerSpec> layers, int capture_layer,
          std::size_t in_ch, std::size_t in_h, std::size_t in_w, Rng& rng);

  // Graph-building forward over a B x C x H x W batch; the returned trace
  // keeps the graph alive for any number of backward/grad_of passes.
  ForwardTrace forward(const NDArray& batch) const;

  const std::vector<LayerSpec>& layers() const { return layers_; }
  int capture_layer() const { return capture_layer_; }
  std::size_t n_logits() const { return n_logits_; }
  std::size_t latent_dim() const { return latent_dim_; }
  std::size_t in_channels() const { return in_ch_; }
  std::size_t in_height() const { return in_h_; }
  std::size_t in_width() const { return in_w_; }

  std::vector<ad::NodePtr>& params() { return params_; }
  const std::vector<ad::NodePtr>& params() const { return params_; }
  const std::vector<std::string>& param_names() const { return param_names_; }
  std::size_t param_count() const;

  std::vector<NDArray> snapshot() const;
  void restore(const std::vector<NDArray>& snap);

  // "conv2d:3:8:3:1:1 relu maxpool2 ... | capture=4 in=3x28x28" round trip
  std::string arch_string() const;
  static Network from_arch_string(const std::string& arch, Rng& rng);

 private:
  std::vector<LayerSpec> layers_;
  int capture_layer_ = -1;
  std::size_t in_ch_ = 0, in_h_ = 0, in_w_ = 0;
  std::size_t n_logits_ = 0, latent_dim_ = 0;
  int latent_layer_ = -1;
  std::vector<ad::NodePtr> params_;
  std::vector<std::string> param_names_;
  std::vector<int> layer_param_index_;  // first param index per layer, -1 if none
};

// The desk-scale default: two conv/relu/pool blocks, capture at the second
// relu (pre-pool), one dense head.
Network make_default_cnn(std::size_t in_ch, std::size_t in_h, std::size_t in_w,
                         std::size_t n_logits, std::uint64_t seed);

// p <- p - lr * (grad + weight_decay * p); grad slots zeroed afterwards.
void sgd_step(Network& net, double lr, double weight_decay);
void zero_grad(Network& net);

struct GradCheckReport {
  double max_rel_err = 0.0;
  double tol = 0.0;
  int n_checked = 0;
  bool pass = false;
};

// Central finite differences against the analytic gradient over a random
// parameter subsample. build_loss must rebuild the scalar loss graph from
// the current parameter values on every call.
GradCheckReport finite_diff_check(std::span<const ad::NodePtr> params,
                                  const std::function<ad::NodePtr()>& build_loss,
                                  double eps = 1e-5, double tol = 1e-4,
                                  int max_probes = 120, std::uint64_t seed = 0);

}  // namespace ex2l
