#include "ex2l/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <thread>
#include <unordered_map>
#include <unordered_set>

namespace ex2l::ad {

namespace {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<Mat>;
using ConstMatMap = Eigen::Map<const Mat>;

std::atomic<std::uint64_t> g_serial{0};
std::atomic<int> g_threads{1};

NodePtr make_node(NDArray value, std::vector<NodePtr> parents, BackwardFn fn,
                  const char* op) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->parents = std::move(parents);
  n->backward_fn = std::move(fn);
  n->op = op;
  n->id = g_serial.fetch_add(1, std::memory_order_relaxed) + 1;
  return n;
}

void check_same_shape(const NodePtr& a, const NodePtr& b, const char* op) {
  if (!a->value.same_shape(b->value))
    throw UsageError(std::string(op) + ": shape mismatch " +
                     NDArray::shape_string(a->value.shape()) + " vs " +
                     NDArray::shape_string(b->value.shape()));
}

std::size_t row_count(const NDArray& a) { return a.shape().front(); }
std::size_t row_width(const NDArray& a) { return a.numel() / a.shape().front(); }

void check_rows_arg(const NodePtr& a, const NodePtr& s, const char* op) {
  if (a->value.rank() < 2 || s->value.rank() != 1 ||
      s->value.numel() != row_count(a->value))
    throw UsageError(std::string(op) + ": expects B x rest and B operands");
}

// Fixed chunking over [0, n): results must stay bit-identical for a given
// thread count, so boundaries depend only on (n, threads).
void parallel_chunks(std::size_t n, const std::function<void(std::size_t lo, std::size_t hi, int chunk)>& fn) {
  int t = g_threads.load(std::memory_order_relaxed);
  if (t <= 1 || n <= 1) {
    fn(0, n, 0);
    return;
  }
  int chunks = static_cast<int>(std::min<std::size_t>(t, n));
  std::size_t q = n / chunks, r = n % chunks;
  std::vector<std::thread> workers;
  std::size_t lo = 0;
  for (int c = 0; c < chunks; ++c) {
    std::size_t hi = lo + q + (static_cast<std::size_t>(c) < r ? 1 : 0);
    workers.emplace_back(fn, lo, hi, c);
    lo = hi;
  }
  for (auto& w : workers) w.join();
}

int chunk_count(std::size_t n) {
  int t = g_threads.load(std::memory_order_relaxed);
  return t <= 1 || n <= 1 ? 1 : static_cast<int>(std::min<std::size_t>(t, n));
}

}  // namespace

std::uint64_t nodes_created() { return g_serial.load(std::memory_order_relaxed); }

void set_kernel_threads(int n) { g_threads.store(n < 1 ? 1 : n); }
int kernel_threads() { return g_threads.load(); }

// ---------------------------------------------------------------------
// leaves
// ---------------------------------------------------------------------

NodePtr constant(NDArray v) { return make_node(std::move(v), {}, nullptr, "const"); }

NodePtr param(NDArray v) {
  auto n = make_node(std::move(v), {}, nullptr, "param");
  n->requires_grad = true;
  n->grad = NDArray::zeros(n->value.shape());
  return n;
}

// ---------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------

NodePtr add(NodePtr a, NodePtr b) {
  check_same_shape(a, b, "add");
  NDArray out(a->value.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] + b->value[i];
  return make_node(std::move(out), {std::move(a), std::move(b)},
                   [](const Node&, const NDArray& g, const std::vector<NDArray*>& pg) {
                     for (int p = 0; p < 2; ++p)
                       if (pg[p])
                         for (std::size_t i = 0; i < g.numel(); ++i) (*pg[p])[i] += g[i];
                   },
                   "add");
}

NodePtr sub(NodePtr a, NodePtr b) {
  check_same_shape(a, b, "sub");
  NDArray out(a->value.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] - b->value[i];
  return make_node(std::move(out), {std::move(a), std::move(b)},
                   [](const Node&, const NDArray& g, const std::vector<NDArray*>& pg) {
                     if (pg[0])
                       for (std::size_t i = 0; i < g.numel(); ++i) (*pg[0])[i] += g[i];
                     if (pg[1])
                       for (std::size_t i = 0; i < g.numel(); ++i) (*pg[1])[i] -= g[i];
                   },
                   "sub");
}

NodePtr mul(NodePtr a, NodePtr b) {
  check_same_shape(a, b, "mul");
  NDArray out(a->value.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] * b->value[i];
  return make_node(std::move(out), {std::move(a), std::move(b)},
                   [](const Node& self, const NDArray& g, const std::vector<NDArray*>& pg) {
                     const NDArray& av = self.parents[0]->value;
                     const NDArray& bv = self.parents[1]->value;
                     if (pg[0])
                       for (std::size_t i = 0; i < g.numel(); ++i) (*pg[0])[i] += g[i] * bv[i];
                     if (pg[1])
                       for (std::size_t i = 0; i < g.numel(); ++i) (*pg[1])[i] += g[i] * av[i];
                   },
                   "mul");
}

NodePtr div_eps(NodePtr a, NodePtr b, double eps) {
  check_same_shape(a, b, "div_eps");
  NDArray out(a->value.shape());
  for (std::size_t i = 0; i < out.numel(); ++i)
    out[i] = a->value[i] / (b->value[i] + eps);
  return make_node(std::move(out), {std::move(a), std::move(b)},
                   [eps](const Node& self, const NDArray& g, const std::vector<NDArray*>& pg) {
                     const NDArray& bv = self.parents[1]->value;
                     const NDArray& ov = self.value;
                     if (pg[0])
                       for (std::size_t i = 0; i < g.numel(); ++i)
                         (*pg[0])[i] += g[i] / (bv[i] + eps);
                     if (pg[1])
                       for (std::size_t i = 0; i < g.numel(); ++i)
                         (*pg[1])[i] -= g[i] * ov[i] / (bv[i] + eps);
                   },
                   "div_eps");
}

NodePtr add_scalar(NodePtr a, double c) {
  NDArray out(a->value.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] + c;
  return make_node(std::move(out), {std::move(a)},
                   [](const Node&, const NDArray& g, const std::vector<NDArray*>& pg) {
                     if (pg[0])
                       for (std::size_t i = 0; i < g.numel(); ++i) (*pg[0])[i] += g[i];
                   },
                   "add_scalar");
}

NodePtr mul_scalar(NodePtr a, double c) {
  NDArray out(a->value.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] * c;
  return make_node(std::move(out), {std::move(a)},
                   [c](const Node&, const NDArray& g, const std::vector<NDArray*>& pg) {
                     // exact zero coefficient contributes nothing; keeps a
                     // zero-weighted objective term bit-neutral
                     if (pg[0] && c != 0.0)
                       for (std::size_t i = 0; i < g.numel(); ++i) (*pg[0])[i] += g[i] * c;
                   },
                   "mul_scalar");
}

NodePtr abs_val(NodePtr a) {
  NDArray out(a->value.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::fabs(a->value[i]);
  return make_node(std::move(out), {std::move(a)},
                   [](const Node& self, const NDArray& g, const std::vector<NDArray*>& pg) {
                     if (!pg[0]) return;
                     const NDArray& av = self.parents[0]->value;
                     for (std::size_t i = 0; i < g.numel(); ++i) {
                       double s = av[i] > 0.0 ? 1.0 : (av[i] < 0.0 ? -1.0 : 0.0);
                       (*pg[0])[i] += g[i] * s;
                     }
                   },
                   "abs");
}

NodePtr sqrt_val(NodePtr a) {
  NDArray out(a->value.shape());
  for (std::size_t i = 0; i < out.numel(); ++i)
    out[i] = std::sqrt(a->value[i] > 0.0 ? a->value[i] : 0.0);
  return make_node(std::move(out), {std::move(a)},
                   [](const Node& self, const NDArray& g, const std::vector<NDArray*>& pg) {
                     if (!pg[0]) return;
                     const NDArray& ov = self.value;
                     for (std::size_t i = 0; i < g.numel(); ++i)
                       (*pg[0])[i] += g[i] * 0.5 / std::max(ov[i], 1e-12);
                   },
                   "sqrt");
}

NodePtr log_eps(NodePtr a, double eps) {
  NDArray out(a->value.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::log(a->value[i] + eps);
  return make_node(std::move(out), {std::move(a)},
                   [eps](const Node& self, const NDArray& g, const std::vector<NDArray*>& pg) {
                     if (!pg[0]) return;
                     const NDArray& av = self.parents[0]->value;
                     for (std::size_t i = 0; i < g.numel(); ++i)
                       (*pg[0])[i] += g[i] / (av[i] + eps);
                   },
                   "log_eps");
}

NodePtr relu(NodePtr a) {
  NDArray out(a->value.shape());
  for (std::size_t i = 0; i < out.numel(); ++i)
    out[i] = a->value[i] > 0.0 ? a->value[i] : 0.0;
  return make_node(std::move(out), {std::move(a)},
                   [](const Node& self, const NDArray& g, const std::vector<NDArray*>& pg) {
                     if (!pg[0]) return;
                     const NDArray& ov = self.value;
                     for (std::size_t i = 0; i < g.numel(); ++i)
                       if (ov[i] > 0.0) (*pg[0])[i] += g[i];
                   },
                   "relu");
}

// ---------------------------------------------------------------------
// reductions and row broadcasting
// ---------------------------------------------------------------------

NodePtr sum_all(NodePtr a) {
  NDArray out = NDArray::scalar(a->value.sum());
  return make_node(std::move(out), {std::move(a)},
                   [](const Node&, const NDArray& g, const std::vector<NDArray*>& pg) {
                     if (!pg[0]) return;
                     for (std::size_t i = 0; i < pg[0]->numel(); ++i) (*pg[0])[i] += g[0];
                   },
                   "sum_all");
}

NodePtr mean_all(NodePtr a) {
  double n = static_cast<double>(a->value.numel());
  NDArray out = NDArray::scalar(a->value.sum() / n);
  return make_node(std::move(out), {std::move(a)},
                   [n](const Node&, const NDArray& g, const std::vector<NDArray*>& pg) {
                     if (!pg[0]) return;
                     double gi = g[0] / n;
                     for (std::size_t i = 0; i < pg[0]->numel(); ++i) (*pg[0])[i] += gi;
                   },
                   "mean_all");
}

NodePtr sum_rows(NodePtr a) {
  if (a->value.rank() < 2) throw UsageError("sum_rows: expects rank >= 2");
  std::size_t rows = row_count(a->value), cols = row_width(a->value);
  NDArray out({rows});
  for (std::size_t b = 0; b < rows; ++b) {
    double s = 0.0;
    const double* base = a->value.data() + b * cols;
    for (std::size_t i = 0; i < cols; ++i) s += base[i];
    out[b] = s;
  }
  return make_node(std::move(out), {std::move(a)},
                   [cols](const Node&, const NDArray& g, const std::vector<NDArray*>& pg) {
                     if (!pg[0]) return;
                     for (std::size_t b = 0; b < g.numel(); ++b) {
                       double* base = pg[0]->data() + b * cols;
                       for (std::size_t i = 0; i < cols; ++i) base[i] += g[b];
                     }
                   },
                   "sum_rows");
}

NodePtr sub_rows(NodePtr a, NodePtr s) {
  check_rows_arg(a, s, "sub_rows");
  std::size_t rows = row_count(a->value), cols = row_width(a->value);
  NDArray out(a->value.shape());
  for (std::size_t b = 0; b < rows; ++b)
    for (std::size_t i = 0; i < cols; ++i)
      out[b * cols + i] = a->value[b * cols + i] - s->value[b];
  return make_node(std::move(out), {std::move(a), std::move(s)},
                   [cols](const Node&, const NDArray& g, const std::vector<NDArray*>& pg) {
                     std::size_t rows = g.numel() / cols;
                     if (pg[0])
                       for (std::size_t i = 0; i < g.numel(); ++i) (*pg[0])[i] += g[i];
                     if (pg[1])
                       for (std::size_t b = 0; b < rows; ++b) {
                         double acc = 0.0;
                         for (std::size_t i = 0; i < cols; ++i) acc += g[b * cols + i];
                         (*pg[1])[b] -= acc;
                       }
                   },
                   "sub_rows");
}

NodePtr mul_rows(NodePtr a, NodePtr s) {
  check_rows_arg(a, s, "mul_rows");
  std::size_t rows = row_count(a->value), cols = row_width(a->value);
  NDArray out(a->value.shape());
  for (std::size_t b = 0; b < rows; ++b)
    for (std::size_t i = 0; i < cols; ++i)
      out[b * cols + i] = a->value[b * cols + i] * s->value[b];
  return make_node(std::move(out), {std::move(a), std::move(s)},
                   [cols](const Node& self, const NDArray& g, const std::vector<NDArray*>& pg) {
                     std::size_t rows = g.numel() / cols;
                     const NDArray& av = self.parents[0]->value;
                     const NDArray& sv = self.parents[1]->value;
                     if (pg[0])
                       for (std::size_t b = 0; b < rows; ++b)
                         for (std::size_t i = 0; i < cols; ++i)
                           (*pg[0])[b * cols + i] += g[b * cols + i] * sv[b];
                     if (pg[1])
                       for (std::size_t b = 0; b < rows; ++b) {
                         double acc = 0.0;
                         for (std::size_t i = 0; i < cols; ++i)
                           acc += g[b * cols + i] * av[b * cols + i];
                         (*pg[1])[b] += acc;
                       }
                   },
                   "mul_rows");
}

NodePtr div_rows_eps(NodePtr a, NodePtr s, double eps) {
  check_rows_arg(a, s, "div_rows_eps");
  std::size_t rows = row_count(a->value), cols = row_width(a->value);
  NDArray out(a->value.shape());
  for (std::size_t b = 0; b < rows; ++b)
    for (std::size_t i = 0; i < cols; ++i)
      out[b * cols + i] = a->value[b * cols + i] / (s->value[b] + eps);
  return make_node(std::move(out), {std::move(a), std::move(s)},
                   [cols, eps](const Node& self, const NDArray& g, const std::vector<NDArray*>& pg) {
                     std::size_t rows = g.numel() / cols;
                     const NDArray& sv = self.parents[1]->value;
                     const NDArray& ov = self.value;
                     if (pg[0])
                       for (std::size_t b = 0; b < rows; ++b)
                         for (std::size_t i = 0; i < cols; ++i)
                           (*pg[0])[b * cols + i] += g[b * cols + i] / (sv[b] + eps);
                     if (pg[1])
                       for (std::size_t b = 0; b < rows; ++b) {
                         double acc = 0.0;
                         for (std::size_t i = 0; i < cols; ++i)
                           acc += g[b * cols + i] * ov[b * cols + i];
                         (*pg[1])[b] -= acc / (sv[b] + eps);
                       }
                   },
                   "div_rows_eps");
}

NodePtr dot_const(NodePtr a, NDArray w) {
  if (!a->value.same_shape(w)) throw UsageError("dot_const: shape mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < w.numel(); ++i) acc += a->value[i] * w[i];
  auto wp = std::make_shared<NDArray>(std::move(w));
  return make_node(NDArray::scalar(acc), {std::move(a)},
                   [wp](const Node&, const NDArray& g, const std::vector<NDArray*>& pg) {
                     if (!pg[0]) return;
                     for (std::size_t i = 0; i < wp->numel(); ++i)
                       (*pg[0])[i] += g[0] * (*wp)[i];
                   },
                   "dot_const");
}

NodePtr l1_normalize_rows(NodePtr a, double eps) {
  if (a->value.rank() < 2) throw UsageError("l1_normalize_rows: expects rank >= 2");
  std::size_t rows = row_count(a->value), cols = row_width(a->value);
  NDArray out(a->value.shape());
  auto sums = std::make_shared<std::vector<double>>(rows);
  for (std::size_t b = 0; b < rows; ++b) {
    const double* base = a->value.data() + b * cols;
    double s = 0.0;
    for (std::size_t i = 0; i < cols; ++i) s += base[i];
    (*sums)[b] = s;
    double* obase = out.data() + b * cols;
    if (s <= 0.0) {
      // all-zero map: uniform fallback, zero gradient
      double u = 1.0 / static_cast<double>(cols);
      for (std::size_t i = 0; i < cols; ++i) obase[i] = u;
    } else {
      for (std::size_t i = 0; i < cols; ++i) obase[i] = base[i] / s;
    }
  }
  return make_node(std::move(out), {std::move(a)},
                   [cols, eps, sums](const Node& self, const NDArray& g,
                                     const std::vector<NDArray*>& pg) {
                     if (!pg[0]) return;
                     std::size_t rows = g.numel() / cols;
                     const NDArray& pv = self.value;
                     for (std::size_t b = 0; b < rows; ++b) {
                       double s = (*sums)[b];
                       if (s <= 0.0) continue;
                       double dot = 0.0;
                       for (std::size_t i = 0; i < cols; ++i)
                         dot += g[b * cols + i] * pv[b * cols + i];
                       for (std::size_t i = 0; i < cols; ++i)
                         (*pg[0])[b * cols + i] += (g[b * cols + i] - dot) / (s + eps);
                     }
                   },
                   "l1_normalize");
}

NodePtr reshape(NodePtr a, std::vector<std::size_t> shape) {
  NDArray out = a->value.reshaped(shape);
  return make_node(std::move(out), {std::move(a)},
                   [](const Node&, const NDArray& g, const std::vector<NDArray*>& pg) {
                     if (!pg[0]) return;
                     for (std::size_t i = 0; i < g.numel(); ++i) (*pg[0])[i] += g[i];
                   },
                   "reshape");
}

// ---------------------------------------------------------------------
// conv / pool / dense
// ---------------------------------------------------------------------

namespace {

struct ConvGeom {
  int cin, h, w, cout, kh, kw, stride, pad, ho, wo;
  std::size_t k() const { return static_cast<std::size_t>(cin) * kh * kw; }
  std::size_t out_hw() const { return static_cast<std::size_t>(ho) * wo; }
};

// Scatter one sample into a K x (Ho*Wo) patch matrix.
void im2col(const double* x, const ConvGeom& g, double* col) {
  std::size_t n_cols = g.out_hw();
  for (int ci = 0; ci < g.cin; ++ci) {
    const double* plane = x + static_cast<std::size_t>(ci) * g.h * g.w;
    for (int ki = 0; ki < g.kh; ++ki)
      for (int kj = 0; kj < g.kw; ++kj) {
        double* row = col + ((static_cast<std::size_t>(ci) * g.kh + ki) * g.kw + kj) * n_cols;
        for (int oh = 0; oh < g.ho; ++oh) {
          int ih = oh * g.stride + ki - g.pad;
          double* dst = row + static_cast<std::size_t>(oh) * g.wo;
          if (ih < 0 || ih >= g.h) {
            std::memset(dst, 0, sizeof(double) * g.wo);
            continue;
          }
          const double* src = plane + static_cast<std::size_t>(ih) * g.w;
          for (int ow = 0; ow < g.wo; ++ow) {
            int iw = ow * g.stride + kj - g.pad;
            dst[ow] = (iw >= 0 && iw < g.w) ? src[iw] : 0.0;
          }
        }
      }
  }
}

// Accumulate a K x (Ho*Wo) gradient matrix back into one input sample.
void col2im_add(const double* col, const ConvGeom& g, double* gx) {
  std::size_t n_cols = g.out_hw();
  for (int ci = 0; ci < g.cin; ++ci) {
    double* plane = gx + static_cast<std::size_t>(ci) * g.h * g.w;
    for (int ki = 0; ki < g.kh; ++ki)
      for (int kj = 0; kj < g.kw; ++kj) {
        const double* row = col + ((static_cast<std::size_t>(ci) * g.kh + ki) * g.kw + kj) * n_cols;
        for (int oh = 0; oh < g.ho; ++oh) {
          int ih = oh * g.stride + ki - g.pad;
          if (ih < 0 || ih >= g.h) continue;
          double* dst = plane + static_cast<std::size_t>(ih) * g.w;
          const double* src = row + static_cast<std::size_t>(oh) * g.wo;
          for (int ow = 0; ow < g.wo; ++ow) {
            int iw = ow * g.stride + kj - g.pad;
            if (iw >= 0 && iw < g.w) dst[iw] += src[ow];
          }
        }
      }
  }
}

}  // namespace

NodePtr conv2d(NodePtr x, NodePtr w, NodePtr b, int stride, int pad) {
  const auto& xs = x->value.shape();
  const auto& ws = w->value.shape();
  if (xs.size() != 4 || ws.size() != 4 || b->value.rank() != 1)
    throw UsageError("conv2d: expects x[B,C,H,W], w[O,C,kh,kw], b[O]");
  if (ws[1] != xs[1] || b->value.numel() != ws[0])
    throw UsageError("conv2d: channel mismatch");
  ConvGeom g;
  g.cin = static_cast<int>(xs[1]);
  g.h = static_cast<int>(xs[2]);
  g.w = static_cast<int>(xs[3]);
  g.cout = static_cast<int>(ws[0]);
  g.kh = static_cast<int>(ws[2]);
  g.kw = static_cast<int>(ws[3]);
  g.stride = stride;
  g.pad = pad;
  g.ho = (g.h + 2 * pad - g.kh) / stride + 1;
  g.wo = (g.w + 2 * pad - g.kw) / stride + 1;
  if (g.ho < 1 || g.wo < 1) throw UsageError("conv2d: kernel larger than padded input");

  std::size_t B = xs[0], K = g.k(), HW = g.out_hw();
  std::size_t in_sz = x->value.numel() / B;
  std::size_t out_sz = static_cast<std::size_t>(g.cout) * HW;
  NDArray out({B, static_cast<std::size_t>(g.cout),
               static_cast<std::size_t>(g.ho), static_cast<std::size_t>(g.wo)});

  {
    const double* xd = x->value.data();
    const double* wd = w->value.data();
    const double* bd = b->value.data();
    double* od = out.data();
    parallel_chunks(B, [&](std::size_t lo, std::size_t hi, int) {
      std::vector<double> col(K * HW);
      ConstMatMap Wm(wd, g.cout, static_cast<Eigen::Index>(K));
      for (std::size_t s = lo; s < hi; ++s) {
        im2col(xd + s * in_sz, g, col.data());
        ConstMatMap Cm(col.data(), static_cast<Eigen::Index>(K),
                       static_cast<Eigen::Index>(HW));
        MatMap Om(od + s * out_sz, g.cout, static_cast<Eigen::Index>(HW));
        Om.noalias() = Wm * Cm;
        for (int co = 0; co < g.cout; ++co) Om.row(co).array() += bd[co];
      }
    });
  }

  BackwardFn fn = [g](const Node& self, const NDArray& gout,
                      const std::vector<NDArray*>& pg) {
    const NDArray& xv = self.parents[0]->value;
    const NDArray& wv = self.parents[1]->value;
    std::size_t B = xv.shape()[0];
    std::size_t K = g.k(), HW = g.out_hw();
    std::size_t in_sz = xv.numel() / B;
    std::size_t out_sz = static_cast<std::size_t>(g.cout) * HW;

    int chunks = chunk_count(B);
    std::vector<std::vector<double>> gw_part, gb_part;
    if (pg[1]) gw_part.assign(chunks, std::vector<double>(wv.numel(), 0.0));
    if (pg[2]) gb_part.assign(chunks, std::vector<double>(g.cout, 0.0));

    parallel_chunks(B, [&](std::size_t lo, std::size_t hi, int c) {
      std::vector<double> col(K * HW);
      std::vector<double> dcol(pg[0] ? K * HW : 0);
      ConstMatMap Wm(wv.data(), g.cout, static_cast<Eigen::Index>(K));
      for (std::size_t s = lo; s < hi; ++s) {
        ConstMatMap Gm(gout.data() + s * out_sz, g.cout, static_cast<Eigen::Index>(HW));
        if (pg[1] || pg[0]) im2col(xv.data() + s * in_sz, g, col.data());
        if (pg[1]) {
          ConstMatMap Cm(col.data(), static_cast<Eigen::Index>(K),
                         static_cast<Eigen::Index>(HW));
          MatMap GWm(gw_part[c].data(), g.cout, static_cast<Eigen::Index>(K));
          GWm.noalias() += Gm * Cm.transpose();
        }
        if (pg[2]) {
          for (int co = 0; co < g.cout; ++co)
            gb_part[c][co] += Gm.row(co).sum();
        }
        if (pg[0]) {
          MatMap Dm(dcol.data(), static_cast<Eigen::Index>(K),
                    static_cast<Eigen::Index>(HW));
          Dm.noalias() = Wm.transpose() * Gm;
          col2im_add(dcol.data(), g, pg[0]->data() + s * in_sz);
        }
      }
    });

    // deterministic chunk-ordered reduction
    if (pg[1])
      for (int c = 0; c < chunks; ++c)
        for (std::size_t i = 0; i < pg[1]->numel(); ++i) (*pg[1])[i] += gw_part[c][i];
    if (pg[2])
      for (int c = 0; c < chunks; ++c)
        for (int co = 0; co < g.cout; ++co) (*pg[2])[co] += gb_part[c][co];
  };

  return make_node(std::move(out), {std::move(x), std::move(w), std::move(b)},
                   std::move(fn), "conv2d");
}

NodePtr maxpool2(NodePtr x) {
  const auto& xs = x->value.shape();
  if (xs.size() != 4) throw UsageError("maxpool2: expects B x C x H x W");
  std::size_t B = xs[0], C = xs[1], H = xs[2], W = xs[3];
  if (H % 2 || W % 2) throw UsageError("maxpool2: odd spatial extent");
  std::size_t Ho = H / 2, Wo = W / 2;
  NDArray out({B, C, Ho, Wo});
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(out.numel());
  const double* xd = x->value.data();
  std::size_t oi = 0;
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const double* plane = xd + bc * H * W;
    for (std::size_t oh = 0; oh < Ho; ++oh)
      for (std::size_t ow = 0; ow < Wo; ++ow, ++oi) {
        std::size_t i0 = (2 * oh) * W + 2 * ow;
        std::size_t cand[4] = {i0, i0 + 1, i0 + W, i0 + W + 1};
        std::size_t best = cand[0];
        for (int k = 1; k < 4; ++k)
          if (plane[cand[k]] > plane[best]) best = cand[k];
        out[oi] = plane[best];
        (*argmax)[oi] = static_cast<std::uint32_t>(bc * H * W + best);
      }
  }
  return make_node(std::move(out), {std::move(x)},
                   [argmax](const Node&, const NDArray& g, const std::vector<NDArray*>& pg) {
                     if (!pg[0]) return;
                     for (std::size_t i = 0; i < g.numel(); ++i)
                       (*pg[0])[(*argmax)[i]] += g[i];
                   },
                   "maxpool2");
}

NodePtr dense(NodePtr x, NodePtr w, NodePtr b) {
  const auto& xs = x->value.shape();
  const auto& ws = w->value.shape();
  if (xs.size() != 2 || ws.size() != 2 || b->value.rank() != 1)
    throw UsageError("dense: expects x[B,D], w[M,D], b[M]");
  if (ws[1] != xs[1] || b->value.numel() != ws[0])
    throw UsageError("dense: dimension mismatch");
  std::size_t B = xs[0], D = xs[1], M = ws[0];
  NDArray out({B, M});
  {
    ConstMatMap Xm(x->value.data(), static_cast<Eigen::Index>(B), static_cast<Eigen::Index>(D));
    ConstMatMap Wm(w->value.data(), static_cast<Eigen::Index>(M), static_cast<Eigen::Index>(D));
    MatMap Om(out.data(), static_cast<Eigen::Index>(B), static_cast<Eigen::Index>(M));
    Om.noalias() = Xm * Wm.transpose();
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t j = 0; j < M; ++j) out[i * M + j] += b->value[j];
  }
  return make_node(std::move(out), {std::move(x), std::move(w), std::move(b)},
                   [B, D, M](const Node& self, const NDArray& g, const std::vector<NDArray*>& pg) {
                     ConstMatMap Gm(g.data(), static_cast<Eigen::Index>(B), static_cast<Eigen::Index>(M));
                     ConstMatMap Xm(self.parents[0]->value.data(), static_cast<Eigen::Index>(B), static_cast<Eigen::Index>(D));
                     ConstMatMap Wm(self.parents[1]->value.data(), static_cast<Eigen::Index>(M), static_cast<Eigen::Index>(D));
                     if (pg[0]) {
                       MatMap GX(pg[0]->data(), static_cast<Eigen::Index>(B), static_cast<Eigen::Index>(D));
                       GX.noalias() += Gm * Wm;
                     }
                     if (pg[1]) {
                       MatMap GW(pg[1]->data(), static_cast<Eigen::Index>(M), static_cast<Eigen::Index>(D));
                       GW.noalias() += Gm.transpose() * Xm;
                     }
                     if (pg[2])
                       for (std::size_t i = 0; i < B; ++i)
                         for (std::size_t j = 0; j < M; ++j) (*pg[2])[j] += g[i * M + j];
                   },
                   "dense");
}

// ---------------------------------------------------------------------
// logit selection, losses
// ---------------------------------------------------------------------

namespace {

const NDArray& as_flat_logits(const NodePtr& logits, std::size_t n) {
  const auto& s = logits->value.shape();
  bool ok = (s.size() == 1 && s[0] == n) ||
            (s.size() == 2 && s[0] == n && s[1] == 1);
  if (!ok) throw UsageError("binary head: expected B or B x 1 logits");
  return logits->value;
}

double sigmoid(double s) {
  return s >= 0.0 ? 1.0 / (1.0 + std::exp(-s)) : std::exp(s) / (1.0 + std::exp(s));
}

}  // namespace

NodePtr select_signed(NodePtr logits, const std::vector<int>& targets) {
  std::size_t B = targets.size();
  const NDArray& lv = as_flat_logits(logits, B);
  NDArray out({B});
  for (std::size_t i = 0; i < B; ++i) {
    if (targets[i] != 0 && targets[i] != 1)
      throw DataError("select_signed: binary target out of range: " + std::to_string(targets[i]));
    out[i] = targets[i] == 1 ? lv[i] : -lv[i];
  }
  auto t = std::make_shared<std::vector<int>>(targets);
  return make_node(std::move(out), {std::move(logits)},
                   [t](const Node&, const NDArray& g, const std::vector<NDArray*>& pg) {
                     if (!pg[0]) return;
                     for (std::size_t i = 0; i < g.numel(); ++i)
                       (*pg[0])[i] += (*t)[i] == 1 ? g[i] : -g[i];
                   },
                   "select_signed");
}

NodePtr select_class(NodePtr logits, const std::vector<int>& targets) {
  const auto& s = logits->value.shape();
  if (s.size() != 2) throw UsageError("select_class: expects B x K logits");
  std::size_t B = s[0], K = s[1];
  if (targets.size() != B) throw UsageError("select_class: target count mismatch");
  NDArray out({B});
  for (std::size_t i = 0; i < B; ++i) {
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= K)
      throw DataError("select_class: class index out of range: " + std::to_string(targets[i]));
    out[i] = logits->value[i * K + targets[i]];
  }
  auto t = std::make_shared<std::vector<int>>(targets);
  return make_node(std::move(out), {std::move(logits)},
                   [t, K](const Node&, const NDArray& g, const std::vector<NDArray*>& pg) {
                     if (!pg[0]) return;
                     for (std::size_t i = 0; i < g.numel(); ++i)
                       (*pg[0])[i * K + (*t)[i]] += g[i];
                   },
                   "select_class");
}

namespace {

NodePtr bce_impl(NodePtr logits, const std::vector<int>& targets, bool mean) {
  std::size_t B = targets.size();
  const NDArray& lv = as_flat_logits(logits, B);
  for (int t : targets)
    if (t != 0 && t != 1) throw DataError("bce_with_logits: targets must be binary");
  // stable form: max(s,0) - s*y + log(1 + exp(-|s|))
  NDArray per({B});
  for (std::size_t i = 0; i < B; ++i) {
    double s = lv[i], y = targets[i];
    per[i] = std::max(s, 0.0) - s * y + std::log1p(std::exp(-std::fabs(s)));
  }
  NDArray out = mean ? NDArray::scalar(per.sum() / static_cast<double>(B)) : std::move(per);
  auto t = std::make_shared<std::vector<int>>(targets);
  return make_node(std::move(out), {std::move(logits)},
                   [t, mean, B](const Node& self, const NDArray& g, const std::vector<NDArray*>& pg) {
                     if (!pg[0]) return;
                     const NDArray& lv = self.parents[0]->value;
                     for (std::size_t i = 0; i < B; ++i) {
                       double d = sigmoid(lv[i]) - (*t)[i];
                       (*pg[0])[i] += mean ? g[0] * d / static_cast<double>(B) : g[i] * d;
                     }
                   },
                   mean ? "bce_mean" : "bce_per_example");
}

NodePtr cce_impl(NodePtr logits, const std::vector<int>& targets, bool mean) {
  const auto& s = logits->value.shape();
  if (s.size() != 2) throw UsageError("cce_with_logits: expects B x K logits");
  std::size_t B = s[0], K = s[1];
  if (targets.size() != B) throw UsageError("cce_with_logits: target count mismatch");
  auto probs = std::make_shared<NDArray>(NDArray({B, K}));
  NDArray per({B});
  for (std::size_t i = 0; i < B; ++i) {
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= K)
      throw DataError("cce_with_logits: class index out of range: " + std::to_string(targets[i]));
    const double* row = logits->value.data() + i * K;
    double m = row[0];
    for (std::size_t k = 1; k < K; ++k) m = std::max(m, row[k]);
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) z += std::exp(row[k] - m);
    double lse = m + std::log(z);
    for (std::size_t k = 0; k < K; ++k) (*probs)[i * K + k] = std::exp(row[k] - lse);
    per[i] = lse - row[targets[i]];
  }
  NDArray out = mean ? NDArray::scalar(per.sum() / static_cast<double>(B)) : std::move(per);
  auto t = std::make_shared<std::vector<int>>(targets);
  return make_node(std::move(out), {std::move(logits)},
                   [t, probs, mean, B, K](const Node&, const NDArray& g, const std::vector<NDArray*>& pg) {
                     if (!pg[0]) return;
                     for (std::size_t i = 0; i < B; ++i) {
                       double gi = mean ? g[0] / static_cast<double>(B) : g[i];
                       for (std::size_t k = 0; k < K; ++k) {
                         double d = (*probs)[i * K + k] - (static_cast<std::size_t>((*t)[i]) == k ? 1.0 : 0.0);
                         (*pg[0])[i * K + k] += gi * d;
                       }
                     }
                   },
                   mean ? "cce_mean" : "cce_per_example");
}

}  // namespace

NodePtr bce_with_logits(NodePtr logits, const std::vector<int>& targets) {
  return bce_impl(std::move(logits), targets, true);
}
NodePtr bce_per_example(NodePtr logits, const std::vector<int>& targets) {
  return bce_impl(std::move(logits), targets, false);
}
NodePtr cce_with_logits(NodePtr logits, const std::vector<int>& targets) {
  return cce_impl(std::move(logits), targets, true);
}
NodePtr cce_per_example(NodePtr logits, const std::vector<int>& targets) {
  return cce_impl(std::move(logits), targets, false);
}

NodePtr scale_channels_sum(NodePtr act, NDArray channel_weights) {
  const auto& as = act->value.shape();
  if (as.size() != 4) throw UsageError("scale_channels_sum: expects B x K x H x W");
  std::size_t B = as[0], K = as[1], HW = as[2] * as[3];
  if (channel_weights.shape() != std::vector<std::size_t>{B, K})
    throw UsageError("scale_channels_sum: weights must be B x K");
  NDArray out({B, as[2], as[3]});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t k = 0; k < K; ++k) {
      double wk = channel_weights[b * K + k];
      const double* src = act->value.data() + (b * K + k) * HW;
      double* dst = out.data() + b * HW;
      for (std::size_t i = 0; i < HW; ++i) dst[i] += wk * src[i];
    }
  auto wp = std::make_shared<NDArray>(std::move(channel_weights));
  return make_node(std::move(out), {std::move(act)},
                   [wp, K, HW](const Node&, const NDArray& g, const std::vector<NDArray*>& pg) {
                     if (!pg[0]) return;
                     std::size_t B = g.numel() / HW;
                     for (std::size_t b = 0; b < B; ++b)
                       for (std::size_t k = 0; k < K; ++k) {
                         double wk = (*wp)[b * K + k];
                         const double* src = g.data() + b * HW;
                         double* dst = pg[0]->data() + (b * K + k) * HW;
                         for (std::size_t i = 0; i < HW; ++i) dst[i] += wk * src[i];
                       }
                   },
                   "scale_channels_sum");
}

// ---------------------------------------------------------------------
// traversal
// ---------------------------------------------------------------------

namespace {

std::vector<Node*> reachable_from(Node* root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{root};
  seen.insert(root);
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents)
      if (seen.insert(p.get()).second) stack.push_back(p.get());
  }
  return order;
}

// Propagate d(root)/d(node) for every node satisfying or leading to the
// base predicate. Returns the gradient map.
std::unordered_map<Node*, NDArray> propagate(
    Node* root, const std::vector<Node*>& nodes,
    const std::function<bool(const Node*)>& base, Node* keep) {
  std::vector<Node*> asc(nodes);
  std::sort(asc.begin(), asc.end(),
            [](const Node* a, const Node* b) { return a->id < b->id; });
  std::unordered_map<Node*, bool> needs;
  needs.reserve(asc.size());
  for (Node* n : asc) {
    bool v = base(n);
    if (!v)
      for (const auto& p : n->parents)
        if (needs[p.get()]) {
          v = true;
          break;
        }
    needs[n] = v;
  }

  std::unordered_map<Node*, NDArray> gmap;
  gmap.reserve(asc.size());
  gmap.emplace(root, NDArray::full(root->value.shape(), 1.0));

  for (auto it = asc.rbegin(); it != asc.rend(); ++it) {
    Node* n = *it;
    auto git = gmap.find(n);
    if (git == gmap.end()) continue;
    if (n->backward_fn && !n->parents.empty()) {
      std::vector<NDArray*> ptrs(n->parents.size(), nullptr);
      for (std::size_t i = 0; i < n->parents.size(); ++i) {
        Node* p = n->parents[i].get();
        if (!needs[p]) continue;
        auto pit = gmap.find(p);
        if (pit == gmap.end())
          pit = gmap.emplace(p, NDArray::zeros(p->value.shape())).first;
        ptrs[i] = &pit->second;
      }
      n->backward_fn(*n, git->second, ptrs);
    }
    // free intermediates as soon as their out-gradient is consumed
    if (n != keep && !n->requires_grad && n->backward_fn) gmap.erase(n);
  }
  return gmap;
}

}  // namespace

void backward(const NodePtr& root) {
  if (root->value.numel() != 1)
    throw UsageError("backward: root must be a scalar");
  auto nodes = reachable_from(root.get());
  auto gmap = propagate(root.get(), nodes,
                        [](const Node* n) { return n->requires_grad; }, nullptr);
  for (Node* n : nodes) {
    if (!n->requires_grad) continue;
    auto it = gmap.find(n);
    if (it == gmap.end()) continue;
    if (n->grad.numel() == 0) n->grad = NDArray::zeros(n->value.shape());
    for (std::size_t i = 0; i < n->grad.numel(); ++i) n->grad[i] += it->second[i];
  }
}

NDArray grad_of(const NodePtr& root, const NodePtr& target) {
  if (root->value.numel() != 1)
    throw UsageError("grad_of: root must be a scalar");
  auto nodes = reachable_from(root.get());
  bool found = false;
  for (Node* n : nodes)
    if (n == target.get()) {
      found = true;
      break;
    }
  if (!found) throw UsageError("grad_of: target not reachable from root");
  Node* t = target.get();
  auto gmap = propagate(root.get(), nodes,
                        [t](const Node* n) { return n == t; }, t);
  auto it = gmap.find(t);
  if (it == gmap.end()) return NDArray::zeros(target->value.shape());
  return std::move(it->second);
}

}  // namespace ex2l::ad
