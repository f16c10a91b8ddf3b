#include "ex2l/similarity.hpp"

#include <algorithm>
#include <array>
#include <cmath>

namespace ex2l {

namespace {

using ad::NodePtr;

const std::array<std::pair<SimKind, const char*>, 11> kKindNames = {{
    {SimKind::Cosine, "cosine"},
    {SimKind::Ncc, "ncc"},
    {SimKind::NegJsDiv, "neg-js-div"},
    {SimKind::NegJsd, "neg-jsd"},
    {SimKind::NegKl, "neg-kl"},
    {SimKind::NegMae, "neg-mae"},
    {SimKind::NegMse, "neg-mse"},
    {SimKind::NegRmse, "neg-rmse"},
    {SimKind::SoftDice, "soft-dice"},
    {SimKind::SoftIou, "soft-iou"},
    {SimKind::Ssim, "ssim"},
}};

NodePtr flat_rows(NodePtr x) {
  const auto& s = x->value.shape();
  if (s.size() == 2) return ad::reshape(std::move(x), {1, s[0] * s[1]});
  if (s.size() == 3) return ad::reshape(std::move(x), {s[0], s[1] * s[2]});
  throw UsageError("similarity: expects H x W or B x H x W maps");
}

// D_KL(p || q) per row, epsilon inside the logs.
NodePtr kl_rows(NodePtr p, NodePtr q, double eps) {
  auto diff = ad::sub(ad::log_eps(p, eps), ad::log_eps(q, eps));
  return ad::sum_rows(ad::mul(p, diff));
}

NodePtr js_div_rows(NodePtr p, NodePtr q, double eps) {
  auto m = ad::mul_scalar(ad::add(p, q), 0.5);
  return ad::add(ad::mul_scalar(kl_rows(p, m, eps), 0.5),
                 ad::mul_scalar(kl_rows(q, m, eps), 0.5));
}

NodePtr centered(NodePtr x, double inv_n) {
  auto mean = ad::mul_scalar(ad::sum_rows(x), inv_n);
  return ad::sub_rows(x, mean);
}

}  // namespace

SimKind sim_kind_from_string(const std::string& name) {
  for (const auto& [kind, n] : kKindNames)
    if (name == n) return kind;
  std::string valid;
  for (const auto& [kind, n] : kKindNames) valid += std::string(" ") + n;
  throw ConfigError("unknown similarity kind '" + name + "'; valid:" + valid);
}

const std::string& sim_kind_name(SimKind kind) {
  static const std::array<std::string, 11> names = [] {
    std::array<std::string, 11> a;
    for (const auto& [k, n] : kKindNames) a[static_cast<int>(k)] = n;
    return a;
  }();
  return names[static_cast<int>(kind)];
}

const std::vector<SimKind>& all_sim_kinds() {
  static const std::vector<SimKind> kinds = [] {
    std::vector<SimKind> v;
    for (const auto& [k, n] : kKindNames) v.push_back(k);
    return v;
  }();
  return kinds;
}

ad::NodePtr l1_normalize(ad::NodePtr map, double epsilon) {
  return ad::l1_normalize_rows(flat_rows(std::move(map)), epsilon);
}

ad::NodePtr evaluate(const SimilarityFn& fn, ad::NodePtr a, ad::NodePtr b) {
  if (!a->value.same_shape(b->value))
    throw UsageError("similarity: heatmap shape mismatch " +
                     NDArray::shape_string(a->value.shape()) + " vs " +
                     NDArray::shape_string(b->value.shape()));
  a = flat_rows(std::move(a));
  b = flat_rows(std::move(b));
  const std::size_t B = a->value.shape()[0];
  const std::size_t n = a->value.shape()[1];
  const double inv_n = 1.0 / static_cast<double>(n);
  const double eps = fn.epsilon;

  NodePtr per;  // per-sample similarity, shape B
  switch (fn.kind) {
    case SimKind::NegMae:
      per = ad::mul_scalar(ad::sum_rows(ad::abs_val(ad::sub(a, b))), -inv_n);
      break;
    case SimKind::NegMse: {
      auto d = ad::sub(a, b);
      per = ad::mul_scalar(ad::sum_rows(ad::mul(d, d)), -inv_n);
      break;
    }
    case SimKind::NegRmse: {
      auto d = ad::sub(a, b);
      auto mse = ad::mul_scalar(ad::sum_rows(ad::mul(d, d)), inv_n);
      per = ad::mul_scalar(ad::sqrt_val(mse), -1.0);
      break;
    }
    case SimKind::SoftIou: {
      auto inter = ad::sum_rows(ad::mul(a, b));
      auto uni = ad::sum_rows(ad::sub(ad::add(a, b), ad::mul(a, b)));
      per = ad::div_eps(inter, uni, eps);
      break;
    }
    case SimKind::SoftDice: {
      auto inter = ad::sum_rows(ad::mul(a, b));
      auto denom = ad::add(ad::sum_rows(a), ad::sum_rows(b));
      per = ad::div_eps(ad::mul_scalar(inter, 2.0), denom, eps);
      break;
    }
    case SimKind::NegKl: {
      auto p = ad::l1_normalize_rows(b, eps);  // reference: confounder map
      auto q = ad::l1_normalize_rows(a, eps);
      per = ad::mul_scalar(kl_rows(p, q, eps), -1.0);
      break;
    }
    case SimKind::NegJsDiv: {
      auto p = ad::l1_normalize_rows(b, eps);
      auto q = ad::l1_normalize_rows(a, eps);
      per = ad::mul_scalar(js_div_rows(p, q, eps), -1.0);
      break;
    }
    case SimKind::NegJsd: {
      auto p = ad::l1_normalize_rows(b, eps);
      auto q = ad::l1_normalize_rows(a, eps);
      per = ad::mul_scalar(ad::sqrt_val(js_div_rows(p, q, eps)), -1.0);
      break;
    }
    case SimKind::Cosine: {
      auto p = ad::l1_normalize_rows(a, eps);
      auto q = ad::l1_normalize_rows(b, eps);
      auto num = ad::sum_rows(ad::mul(p, q));
      auto den = ad::mul(ad::sqrt_val(ad::sum_rows(ad::mul(p, p))),
                         ad::sqrt_val(ad::sum_rows(ad::mul(q, q))));
      per = ad::div_eps(num, den, eps);
      break;
    }
    case SimKind::Ncc: {
      auto ca = centered(a, inv_n);
      auto cb = centered(b, inv_n);
      auto num = ad::sum_rows(ad::mul(ca, cb));
      auto den = ad::mul(ad::sqrt_val(ad::sum_rows(ad::mul(ca, ca))),
                         ad::sqrt_val(ad::sum_rows(ad::mul(cb, cb))));
      per = ad::div_eps(num, den, eps);
      break;
    }
    case SimKind::Ssim: {
      // per-sample dynamic range, detached
      NDArray c1v({B}), c2v({B}), c3v({B});
      for (std::size_t r = 0; r < B; ++r) {
        double mx = 1e-8;
        for (std::size_t i = 0; i < n; ++i)
          mx = std::max({mx, a->value[r * n + i], b->value[r * n + i]});
        double c1 = fn.ssim.k1 * mx, c2 = fn.ssim.k2 * mx;
        c1v[r] = c1 * c1;
        c2v[r] = c2 * c2;
        c3v[r] = c2 * c2 / 2.0;
      }
      auto c1 = ad::constant(c1v);
      auto c2 = ad::constant(c2v);
      auto c3 = ad::constant(c3v);
      const double inv_n1 = n > 1 ? 1.0 / static_cast<double>(n - 1) : 0.0;
      auto ma = ad::mul_scalar(ad::sum_rows(a), inv_n);
      auto mb = ad::mul_scalar(ad::sum_rows(b), inv_n);
      auto ca = ad::sub_rows(a, ma);
      auto cb = ad::sub_rows(b, mb);
      auto va = ad::mul_scalar(ad::sum_rows(ad::mul(ca, ca)), inv_n1);
      auto vb = ad::mul_scalar(ad::sum_rows(ad::mul(cb, cb)), inv_n1);
      auto cov = ad::mul_scalar(ad::sum_rows(ad::mul(ca, cb)), inv_n1);
      auto sa = ad::sqrt_val(va);
      auto sb = ad::sqrt_val(vb);
      auto lum = ad::div_eps(ad::add(ad::mul_scalar(ad::mul(ma, mb), 2.0), c1),
                             ad::add(ad::add(ad::mul(ma, ma), ad::mul(mb, mb)), c1), 0.0);
      auto con = ad::div_eps(ad::add(ad::mul_scalar(ad::mul(sa, sb), 2.0), c2),
                             ad::add(ad::add(va, vb), c2), 0.0);
      auto str = ad::div_eps(ad::add(cov, c3), ad::add(ad::mul(sa, sb), c3), 0.0);
      per = ad::mul(ad::mul(lum, con), str);
      break;
    }
  }
  return ad::mean_all(per);
}

double evaluate_value(const SimilarityFn& fn, const NDArray& a, const NDArray& b) {
  return evaluate(fn, ad::constant(a), ad::constant(b))->value[0];
}

}  // namespace ex2l
