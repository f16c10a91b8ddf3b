#include "ex2l/gradcam.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

namespace ex2l {

ad::NodePtr target_logit(ad::NodePtr logits, const std::vector<int>& targets,
                         HeadKind head) {
  if (head == HeadKind::Binary) return ad::select_signed(std::move(logits), targets);
  return ad::select_class(std::move(logits), targets);
}

NDArray cam_weights(const ForwardTrace& trace, const ad::NodePtr& target) {
  if (!trace.activation)
    throw UsageError("cam_weights: trace has no captured activation");
  ad::NodePtr scalar = target->value.numel() == 1 ? target : ad::sum_all(target);
  NDArray g = ad::grad_of(scalar, trace.activation);  // B x K x H x W
  const auto& s = g.shape();
  std::size_t B = s[0], K = s[1], P = s[2] * s[3];
  NDArray alpha({B, K});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t k = 0; k < K; ++k) {
      const double* src = g.data() + (b * K + k) * P;
      double acc = 0.0;
      for (std::size_t i = 0; i < P; ++i) acc += src[i];
      alpha[b * K + k] = acc / static_cast<double>(P);
    }
  if (!alpha.all_finite()) throw DataError("cam_weights: non-finite weights");
  return alpha;
}

ad::NodePtr heatmap(const ForwardTrace& trace, const NDArray& weights) {
  if (!trace.activation)
    throw UsageError("heatmap: trace has no captured activation");
  return ad::relu(ad::scale_channels_sum(trace.activation, weights));
}

NDArray heatmap_slice(const ad::NodePtr& maps, std::size_t sample) {
  const auto& s = maps->value.shape();
  if (s.size() != 3) throw UsageError("heatmap_slice: expects B x H x W");
  if (sample >= s[0]) throw UsageError("heatmap_slice: sample out of range");
  NDArray out({s[1], s[2]});
  std::size_t hw = s[1] * s[2];
  const double* src = maps->value.data() + sample * hw;
  for (std::size_t i = 0; i < hw; ++i) out[i] = src[i];
  return out;
}

void export_heatmap(const NDArray& map, const std::string& path) {
  if (map.rank() != 2) throw UsageError("export_heatmap: expects H x W");
  if (!map.all_finite()) throw DataError("export_heatmap: non-finite values");
  std::size_t h = map.shape()[0], w = map.shape()[1];
  double lo = map[0], hi = map[0];
  for (std::size_t i = 0; i < map.numel(); ++i) {
    lo = std::min(lo, map[i]);
    hi = std::max(hi, map[i]);
  }
  double range = hi - lo;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("export_heatmap: cannot open " + path);
  out << "P5\n" << w << " " << h << "\n255\n";
  for (std::size_t i = 0; i < map.numel(); ++i) {
    int px = range > 0.0
                 ? static_cast<int>(std::floor(255.0 * (map[i] - lo) / range))
                 : 0;
    out.put(static_cast<char>(px < 0 ? 0 : (px > 255 ? 255 : px)));
  }
  if (!out) throw DataError("export_heatmap: write failed for " + path);
}

}  // namespace ex2l
