#include "ex2l/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace ex2l {

MetricsReport accuracy_report(const std::vector<int>& preds, const Dataset& data,
                              std::string split) {
  if (data.size() == 0) throw UsageError("accuracy_report: empty dataset");
  if (preds.size() != data.size())
    throw UsageError("accuracy_report: prediction/example count mismatch");

  MetricsReport rep;
  rep.split = std::move(split);
  rep.groups.resize(data.n_groups());
  for (int g = 0; g < data.n_groups(); ++g) rep.groups[g].group = g;

  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Example& ex = data.examples[i];
    bool ok = preds[i] == ex.label;
    correct += ok;
    rep.groups[ex.group].count += 1;
    rep.groups[ex.group].correct += ok;
  }
  rep.aa = static_cast<double>(correct) / static_cast<double>(data.size());

  double wga = 1.0;
  for (auto& g : rep.groups) {
    if (g.count == 0) continue;  // empty groups excluded from the min
    g.accuracy = static_cast<double>(g.correct) / static_cast<double>(g.count);
    wga = std::min(wga, g.accuracy);
  }
  rep.wga = wga;
  return rep;
}

double linear_mmd(const NDArray& a, const NDArray& b, bool scale_by_dim) {
  if (a.rank() != 2 || b.rank() != 2)
    throw UsageError("linear_mmd: expects n x d latent matrices");
  if (a.shape()[1] != b.shape()[1])
    throw UsageError("linear_mmd: latent width mismatch");
  std::size_t na = a.shape()[0], nb = b.shape()[0], d = a.shape()[1];
  if (na == 0 || nb == 0) throw UsageError("linear_mmd: empty batch");

  double dist = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < na; ++i) ma += a[i * d + j];
    for (std::size_t i = 0; i < nb; ++i) mb += b[i * d + j];
    double gap = ma / static_cast<double>(na) - mb / static_cast<double>(nb);
    dist += gap * gap;
  }
  return scale_by_dim ? dist / static_cast<double>(d) : dist;
}

Partition partition_from_string(const std::string& name) {
  if (name == "by-label") return Partition::ByLabel;
  if (name == "by-confounder") return Partition::ByConfounder;
  if (name == "by-env") return Partition::ByEnv;
  throw UsageError("unknown partition '" + name +
                   "'; valid: by-label by-confounder by-env");
}

const std::string& partition_name(Partition p) {
  static const std::string names[] = {"by-label", "by-confounder", "by-env"};
  return names[static_cast<int>(p)];
}

double mmd_partition(const NDArray& latents, const Dataset& data, Partition p,
                     bool scale_by_dim) {
  if (latents.rank() != 2 || latents.shape()[0] != data.size())
    throw UsageError("mmd_partition: latents must be n x d over the dataset");
  std::size_t d = latents.shape()[1];

  std::map<int, std::vector<std::size_t>> parts;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Example& ex = data.examples[i];
    int key = p == Partition::ByLabel ? ex.label
              : p == Partition::ByConfounder ? ex.confounder
                                             : ex.env;
    parts[key].push_back(i);
  }
  if (parts.size() < 2)
    throw UsageError("mmd_partition: needs at least two non-empty parts for " +
                     partition_name(p));

  auto gather = [&](const std::vector<std::size_t>& idx) {
    NDArray m({idx.size(), d});
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t j = 0; j < d; ++j) m[r * d + j] = latents[idx[r] * d + j];
    return m;
  };

  std::vector<NDArray> mats;
  mats.reserve(parts.size());
  for (const auto& [key, idx] : parts) mats.push_back(gather(idx));

  double acc = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < mats.size(); ++i)
    for (std::size_t j = i + 1; j < mats.size(); ++j) {
      acc += linear_mmd(mats[i], mats[j], scale_by_dim);
      ++pairs;
    }
  return acc / static_cast<double>(pairs);
}

}  // namespace ex2l
