#pragma once

// Evaluation: average accuracy, worst-group accuracy, per-group accuracies,
// and the linear-kernel mean-map discrepancy used as a latent diagnostic.

#include <optional>
#include <string>
#include <vector>

#include "ex2l/datagen.hpp"
#include "ex2l/ndarray.hpp"

namespace ex2l {

struct GroupAccuracy {
  int group = 0;
  int count = 0;
  int correct = 0;
  double accuracy = 0.0;
};

struct MetricsReport {
  std::string split;
  double aa = 0.0;
  double wga = 0.0;  // min accuracy over non-empty groups
  std::vector<GroupAccuracy> groups;  // one entry per group id, empty included
  double mean_loss = 0.0;
  std::optional<double> mmd_label, mmd_confounder, mmd_env;
};

// preds[i] is the predicted label for examples[i].
MetricsReport accuracy_report(const std::vector<int>& preds, const Dataset& data,
                              std::string split);

// Squared distance between mean latent vectors (rows are samples). With
// scale_by_dim the value is divided by the latent width so magnitudes stay
// comparable across widths; orderings are unaffected.
double linear_mmd(const NDArray& a, const NDArray& b, bool scale_by_dim = true);

enum class Partition { ByLabel, ByConfounder, ByEnv };

Partition partition_from_string(const std::string& name);
const std::string& partition_name(Partition p);

// Linear MMD between the partition's parts: two parts directly, more parts
// as the mean of all pairwise values. Throws UsageError with fewer than two
// non-empty parts.
double mmd_partition(const NDArray& latents, const Dataset& data, Partition p,
                     bool scale_by_dim = true);

}  // namespace ex2l
