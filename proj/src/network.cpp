#include "ex2l/network.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace ex2l {

namespace {

struct Dims {
  std::size_t c, h, w;  // rank-3 per-sample geometry
  bool flat = false;
  std::size_t d = 0;  // valid when flat
};

NDArray kaiming_uniform(std::vector<std::size_t> shape, std::size_t fan_in, Rng& rng) {
  NDArray a(std::move(shape));
  double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (std::size_t i = 0; i < a.numel(); ++i) a[i] = rng.uniform(-bound, bound);
  return a;
}

}  // namespace

Network::Network(std::vector<LayerSpec> layers, int capture_layer,
                 std::size_t in_ch, std::size_t in_h, std::size_t in_w, Rng& rng)
    : layers_(std::move(layers)),
      capture_layer_(capture_layer),
      in_ch_(in_ch),
      in_h_(in_h),
      in_w_(in_w) {
  if (layers_.empty()) throw ConfigError("network: no layers");
  // capture_layer -1 builds a net without an attribution tap
  if (capture_layer_ < -1 || capture_layer_ >= static_cast<int>(layers_.size()))
    throw ConfigError("network: capture layer index out of range");

  Dims d{in_ch, in_h, in_w};
  for (std::size_t li = 0; li < layers_.size(); ++li) {
    LayerSpec& l = layers_[li];
    layer_param_index_.push_back(-1);
    switch (l.kind) {
      case LayerKind::Conv2d: {
        if (d.flat) throw ConfigError("network: conv2d after flatten");
        if (static_cast<std::size_t>(l.in_ch) != d.c)
          throw ConfigError("network: conv2d layer " + std::to_string(li) +
                            " expects " + std::to_string(l.in_ch) + " channels, got " +
                            std::to_string(d.c));
        int ho = (static_cast<int>(d.h) + 2 * l.pad - l.kernel) / l.stride + 1;
        int wo = (static_cast<int>(d.w) + 2 * l.pad - l.kernel) / l.stride + 1;
        if (ho < 1 || wo < 1) throw ConfigError("network: conv2d output collapses");
        std::size_t fan_in = static_cast<std::size_t>(l.in_ch) * l.kernel * l.kernel;
        layer_param_index_.back() = static_cast<int>(params_.size());
        params_.push_back(ad::param(kaiming_uniform(
            {static_cast<std::size_t>(l.out_ch), static_cast<std::size_t>(l.in_ch),
             static_cast<std::size_t>(l.kernel), static_cast<std::size_t>(l.kernel)},
            fan_in, rng)));
        params_.push_back(ad::param(NDArray::zeros({static_cast<std::size_t>(l.out_ch)})));
        param_names_.push_back("layer" + std::to_string(li) + ".conv.w");
        param_names_.push_back("layer" + std::to_string(li) + ".conv.b");
        d = Dims{static_cast<std::size_t>(l.out_ch), static_cast<std::size_t>(ho),
                 static_cast<std::size_t>(wo)};
        break;
      }
      case LayerKind::Relu:
        break;
      case LayerKind::MaxPool2:
        if (d.flat) throw ConfigError("network: maxpool2 after flatten");
        if (d.h % 2 || d.w % 2) throw ConfigError("network: maxpool2 needs even extents");
        d.h /= 2;
        d.w /= 2;
        break;
      case LayerKind::Flatten:
        if (d.flat) throw ConfigError("network: repeated flatten");
        d.flat = true;
        d.d = d.c * d.h * d.w;
        latent_layer_ = static_cast<int>(li);
        latent_dim_ = d.d;
        break;
      case LayerKind::Dense: {
        if (!d.flat) throw ConfigError("network: dense before flatten");
        if (static_cast<std::size_t>(l.in_dim) != d.d)
          throw ConfigError("network: dense layer " + std::to_string(li) + " expects " +
                            std::to_string(l.in_dim) + " inputs, got " + std::to_string(d.d));
        layer_param_index_.back() = static_cast<int>(params_.size());
        params_.push_back(ad::param(kaiming_uniform(
            {static_cast<std::size_t>(l.out_dim), static_cast<std::size_t>(l.in_dim)},
            static_cast<std::size_t>(l.in_dim), rng)));
        params_.push_back(ad::param(NDArray::zeros({static_cast<std::size_t>(l.out_dim)})));
        param_names_.push_back("layer" + std::to_string(li) + ".dense.w");
        param_names_.push_back("layer" + std::to_string(li) + ".dense.b");
        d.d = static_cast<std::size_t>(l.out_dim);
        break;
      }
    }
    if (static_cast<int>(li) == capture_layer_ && d.flat)
      throw ConfigError("network: capture layer must be rank-3 per sample");
  }
  if (!d.flat) throw ConfigError("network: head must end in flatten + dense");
  if (latent_layer_ < 0) throw ConfigError("network: missing flatten layer");
  n_logits_ = d.d;
}

ForwardTrace Network::forward(const NDArray& batch) const {
  const auto& s = batch.shape();
  if (s.size() != 4 || s[1] != in_ch_ || s[2] != in_h_ || s[3] != in_w_)
    throw ConfigError("forward: batch shape " + NDArray::shape_string(s) +
                      " does not match network input " +
                      NDArray::shape_string({0, in_ch_, in_h_, in_w_}));
  ForwardTrace t;
  t.input = ad::constant(batch);
  ad::NodePtr x = t.input;
  for (std::size_t li = 0; li < layers_.size(); ++li) {
    const LayerSpec& l = layers_[li];
    switch (l.kind) {
      case LayerKind::Conv2d: {
        int pi = layer_param_index_[li];
        x = ad::conv2d(x, params_[pi], params_[pi + 1], l.stride, l.pad);
        break;
      }
      case LayerKind::Relu:
        x = ad::relu(x);
        break;
      case LayerKind::MaxPool2:
        x = ad::maxpool2(x);
        break;
      case LayerKind::Flatten: {
        std::size_t b = x->value.shape()[0];
        x = ad::reshape(x, {b, x->value.numel() / b});
        t.latent = x;
        break;
      }
      case LayerKind::Dense: {
        int pi = layer_param_index_[li];
        x = ad::dense(x, params_[pi], params_[pi + 1]);
        break;
      }
    }
    t.layer_outputs.push_back(x);
    if (static_cast<int>(li) == capture_layer_) {
      if (!x->value.all_finite())
        throw DataError("forward: non-finite capture activation");
      t.activation = x;
    }
  }
  t.logits = x;
  return t;
}

std::size_t Network::param_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p->value.numel();
  return n;
}

std::vector<NDArray> Network::snapshot() const {
  std::vector<NDArray> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p->value);
  return out;
}

void Network::restore(const std::vector<NDArray>& snap) {
  if (snap.size() != params_.size())
    throw UsageError("restore: snapshot arity mismatch");
  for (std::size_t i = 0; i < snap.size(); ++i) {
    if (!snap[i].same_shape(params_[i]->value))
      throw UsageError("restore: shape mismatch at parameter " + std::to_string(i));
    params_[i]->value = snap[i];
  }
}

std::string Network::arch_string() const {
  std::ostringstream os;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const LayerSpec& l = layers_[i];
    if (i) os << " ";
    switch (l.kind) {
      case LayerKind::Conv2d:
        os << "conv2d:" << l.in_ch << ":" << l.out_ch << ":" << l.kernel << ":"
           << l.pad << ":" << l.stride;
        break;
      case LayerKind::Relu: os << "relu"; break;
      case LayerKind::MaxPool2: os << "maxpool2"; break;
      case LayerKind::Flatten: os << "flatten"; break;
      case LayerKind::Dense: os << "dense:" << l.in_dim << ":" << l.out_dim; break;
    }
  }
  os << " | capture=" << capture_layer_ << " in=" << in_ch_ << "x" << in_h_ << "x" << in_w_;
  return os.str();
}

Network Network::from_arch_string(const std::string& arch, Rng& rng) {
  auto bar = arch.find('|');
  if (bar == std::string::npos) throw DataError("arch string: missing '|' section");
  std::istringstream body(arch.substr(0, bar));
  std::vector<LayerSpec> layers;
  std::string tok;
  auto ints_after = [](const std::string& t) {
    std::vector<int> out;
    std::size_t pos = t.find(':');
    while (pos != std::string::npos) {
      std::size_t next = t.find(':', pos + 1);
      out.push_back(std::stoi(t.substr(pos + 1, next - pos - 1)));
      pos = next;
    }
    return out;
  };
  while (body >> tok) {
    if (tok.rfind("conv2d:", 0) == 0) {
      auto v = ints_after(tok);
      if (v.size() != 5) throw DataError("arch string: bad conv2d: " + tok);
      layers.push_back(LayerSpec::conv(v[0], v[1], v[2], v[3], v[4]));
    } else if (tok == "relu") {
      layers.push_back(LayerSpec::relu());
    } else if (tok == "maxpool2") {
      layers.push_back(LayerSpec::maxpool2());
    } else if (tok == "flatten") {
      layers.push_back(LayerSpec::flatten());
    } else if (tok.rfind("dense:", 0) == 0) {
      auto v = ints_after(tok);
      if (v.size() != 2) throw DataError("arch string: bad dense: " + tok);
      layers.push_back(LayerSpec::dense(v[0], v[1]));
    } else {
      throw DataError("arch string: unknown layer: " + tok);
    }
  }
  int capture = -1;
  std::size_t ic = 0, ih = 0, iw = 0;
  std::istringstream tail(arch.substr(bar + 1));
  while (tail >> tok) {
    if (tok.rfind("capture=", 0) == 0) capture = std::stoi(tok.substr(8));
    else if (tok.rfind("in=", 0) == 0) {
      if (std::sscanf(tok.c_str() + 3, "%zux%zux%zu", &ic, &ih, &iw) != 3)
        throw DataError("arch string: bad input spec: " + tok);
    }
  }
  if (capture < 0 || ic == 0) throw DataError("arch string: incomplete tail");
  return Network(std::move(layers), capture, ic, ih, iw, rng);
}

Network make_default_cnn(std::size_t in_ch, std::size_t in_h, std::size_t in_w,
                         std::size_t n_logits, std::uint64_t seed) {
  std::size_t flat = 16 * (in_h / 4) * (in_w / 4);
  std::vector<LayerSpec> layers = {
      LayerSpec::conv(static_cast<int>(in_ch), 8, 3, 1),
      LayerSpec::relu(),
      LayerSpec::maxpool2(),
      LayerSpec::conv(8, 16, 3, 1),
      LayerSpec::relu(),  // capture: final conv block, pre-pool
      LayerSpec::maxpool2(),
      LayerSpec::flatten(),
      LayerSpec::dense(static_cast<int>(flat), static_cast<int>(n_logits)),
  };
  Rng rng(seed);
  return Network(std::move(layers), 4, in_ch, in_h, in_w, rng);
}

void sgd_step(Network& net, double lr, double weight_decay) {
  for (auto& p : net.params()) {
    if (p->grad.numel() == 0) p->grad = NDArray::zeros(p->value.shape());
    for (std::size_t i = 0; i < p->value.numel(); ++i) {
      p->value[i] -= lr * (p->grad[i] + weight_decay * p->value[i]);
      p->grad[i] = 0.0;
    }
  }
}

void zero_grad(Network& net) {
  for (auto& p : net.params()) p->grad.fill(0.0);
}

GradCheckReport finite_diff_check(std::span<const ad::NodePtr> params,
                                  const std::function<ad::NodePtr()>& build_loss,
                                  double eps, double tol, int max_probes,
                                  std::uint64_t seed) {
  // analytic gradients from a single backward on clean slots
  std::vector<NDArray> saved_grads;
  for (const auto& p : params) {
    saved_grads.push_back(p->grad);
    p->grad = NDArray::zeros(p->value.shape());
  }
  ad::backward(build_loss());
  std::vector<NDArray> analytic;
  for (const auto& p : params) analytic.push_back(p->grad);
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->grad = saved_grads[i];

  std::size_t total = 0;
  for (const auto& p : params) total += p->value.numel();
  Rng rng(seed);

  GradCheckReport rep;
  rep.tol = tol;
  int probes = std::min<int>(max_probes, static_cast<int>(total));
  for (int k = 0; k < probes; ++k) {
    std::size_t flat = rng.uniform_index(total);
    std::size_t pi = 0;
    while (flat >= params[pi]->value.numel()) flat -= params[pi++]->value.numel();
    double& slot = params[pi]->value[flat];
    double orig = slot;
    slot = orig + eps;
    double lp = build_loss()->value[0];
    slot = orig - eps;
    double lm = build_loss()->value[0];
    slot = orig;
    double fd = (lp - lm) / (2.0 * eps);
    double an = analytic[pi][flat];
    double rel = std::fabs(an - fd) / std::max({std::fabs(an), std::fabs(fd), 1e-6});
    rep.max_rel_err = std::max(rep.max_rel_err, rel);
    ++rep.n_checked;
  }
  rep.pass = rep.max_rel_err < tol;
  return rep;
}

}  // namespace ex2l
