#pragma once

// Deterministic group-annotated synthetic data: a colored-glyph recipe with
// an environment-controlled color/label correlation, a texture/glyph recipe
// driven by per-environment group-proportion tables, an MNIST IDX ingester
// for the real-glyph path, and the two batch samplers.
//
// Every generator is a pure function of (seed, example index); regeneration
// is bit-identical.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ex2l/ndarray.hpp"
#include "ex2l/rng.hpp"

namespace ex2l {

struct Example {
  NDArray image;  // C x H x W in [0,1]
  int label = 0;
  int confounder = 0;
  int group = 0;  // group = confounder * n_labels + label
  int env = 0;
};

inline int group_encode(int confounder, int label, int n_labels) {
  return confounder * n_labels + label;
}
inline std::pair<int, int> group_decode(int group, int n_labels) {
  return {group / n_labels, group % n_labels};
}

struct Dataset {
  std::vector<Example> examples;
  int n_labels = 2;
  int n_confounders = 2;

  int n_groups() const { return n_labels * n_confounders; }
  std::size_t size() const { return examples.size(); }

  // indices per group; empty vectors for empty groups
  std::vector<std::vector<int>> group_index() const;
};

// ---- colored-glyph recipe ----------------------------------------------
// Glyphs come from 10 procedural templates; base label = (template < 5 ? 0
// : 1), flipped with probability flip_p; the color confounder equals the
// label with probability env_corr; glyph pixels are tinted red (channel 0)
// or green (channel 1) on black. Images are 3 x 28 x 28.
std::vector<Example> gen_cmnist_style(std::size_t n, double env_corr,
                                      double flip_p, std::uint64_t seed,
                                      int env = 0);

// ---- IDX ingestion (real-glyph path) -------------------------------------
struct IdxDigits {
  std::vector<NDArray> images;  // 28 x 28 grayscale in [0,1]
  std::vector<int> labels;      // 0..9
};

IdxDigits load_mnist_idx(const std::string& images_path,
                         const std::string& labels_path);

// Same recipe as gen_cmnist_style with real glyphs; base label = digit < 5.
std::vector<Example> colorize_digits(const IdxDigits& digits, double env_corr,
                                     double flip_p, std::uint64_t seed,
                                     int env = 0);

// ---- group-proportion tables ---------------------------------------------
struct GroupTableRow {
  int env = 0;
  int confounder = 0;
  int label = 0;
  double proportion = 0.0;
};

struct GroupTable {
  std::vector<GroupTableRow> rows;
  int n_labels = 2;
  int n_confounders = 2;
  std::vector<int> env_ids() const;
  // throws DataError unless proportions per environment sum to 1 (1e-6)
  void validate() const;
};

// CSV columns: env,confounder,label,proportion. Proportions within 1e-3 of
// summing to 1 per environment are renormalized exactly; worse is an error.
GroupTable load_group_table_csv(const std::string& path);
void save_group_table_csv(const GroupTable& table, const std::string& path);

// Two-environment tables with land/water-style and demographic-style skews.
GroupTable builtin_waterbirds_table();
GroupTable builtin_celeba_table();
// Single environment, all groups equal.
GroupTable uniform_group_table(int n_labels, int n_confounders, int env = 0);

// Labels drive the glyph family, confounders drive the background texture.
std::vector<Example> gen_from_group_table(const GroupTable& table,
                                          std::size_t n_per_env,
                                          std::uint64_t seed);

// ---- samplers --------------------------------------------------------------
class Sampler {
 public:
  enum class Kind { Random, UniformGroup };

  Sampler(Kind kind, const Dataset& data, std::size_t batch_size,
          std::uint64_t seed);

  // Indices with replacement; an epoch is ceil(n / batch) draws by
  // convention, but the stream itself is unbounded.
  std::vector<int> next_batch();

  static std::size_t batches_per_epoch(std::size_t n, std::size_t batch) {
    return (n + batch - 1) / batch;
  }

 private:
  Kind kind_;
  std::size_t n_ = 0;
  std::size_t batch_;
  Rng rng_;
  std::vector<std::vector<int>> groups_;  // non-empty groups only
};

struct Batch {
  NDArray images;  // B x C x H x W
  std::vector<int> labels, confounders, groups;
};

Batch make_batch(const Dataset& data, const std::vector<int>& indices);

}  // namespace ex2l
