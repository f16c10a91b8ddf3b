#pragma once

// The eleven heatmap similarity functions. Every kind is expressed in its
// "higher = more similar" form (distance kinds carry their additive
// inverse), so a trainer always minimizes lambda_sim * evaluate(...).
// Distributional kinds (kl, js-div, jsd, cosine) consume L1-normalized maps;
// pixel kinds consume raw maps.

#include <string>
#include <vector>

#include "ex2l/autodiff.hpp"
#include "ex2l/ndarray.hpp"

namespace ex2l {

enum class SimKind {
  NegMae,
  NegMse,
  NegRmse,
  SoftIou,
  NegKl,
  NegJsDiv,
  NegJsd,
  Cosine,
  Ncc,
  Ssim,
  SoftDice,
};

struct SsimConfig {
  double k1 = 0.01;
  double k2 = 0.03;
  // alpha = beta = gamma = 1; dynamic range = max over both maps (>= 1e-8),
  // treated as a constant.
};

struct SimilarityFn {
  SimKind kind = SimKind::NegMae;
  double epsilon = 1e-8;
  SsimConfig ssim{};
};

// CLI/config vocabulary; unknown names raise ConfigError.
SimKind sim_kind_from_string(const std::string& name);
const std::string& sim_kind_name(SimKind kind);
const std::vector<SimKind>& all_sim_kinds();  // alphabetical by name

// Per-row L1 normalization (uniform fallback for all-zero maps). Input
// shape H x W or B x H x W; rows sum to 1.
ad::NodePtr l1_normalize(ad::NodePtr map, double epsilon = 1e-8);

// S(a, b) where a is the label-model heatmap and b the confounder-model
// heatmap (the one asymmetric kind, neg-kl, uses b as the reference).
// Inputs of shape H x W or B x H x W; batches return the batch mean.
ad::NodePtr evaluate(const SimilarityFn& fn, ad::NodePtr a, ad::NodePtr b);

// Value-only convenience for plain arrays.
double evaluate_value(const SimilarityFn& fn, const NDArray& a, const NDArray& b);

}  // namespace ex2l
