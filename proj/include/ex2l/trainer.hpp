#pragma once

// Training loops: the explanation-similarity objective over a label net and
// a concurrently trained confounder net, plus plain ERM and GroupDRO
// baselines. All three share the sampler stream, the net-seeding scheme and
// the epoch/early-stop/checkpoint protocol, so zero-coefficient reductions
// are exact.

#include <cstdint>
#include <string>
#include <vector>

#include "ex2l/datagen.hpp"
#include "ex2l/metrics.hpp"
#include "ex2l/network.hpp"
#include "ex2l/similarity.hpp"

namespace ex2l {

enum class Algorithm { Erm, GroupDro, Ex2l };

Algorithm algorithm_from_string(const std::string& name);
const std::string& algorithm_name(Algorithm a);

struct TrainConfig {
  Algorithm algorithm = Algorithm::Erm;
  SimilarityFn sim{};  // ex2l only
  Sampler::Kind sampling = Sampler::Kind::Random;
  double lambda_c = 1.0;
  double lambda_sim = 1.0;
  double groupdro_eta = 0.01;
  double label_lr = 0.1;
  double conf_lr = 0.1;
  double label_wd = 0.0;
  double conf_wd = 0.0;
  std::size_t batch_size = 128;
  int max_epochs = 50;
  int patience = 10;
  double min_delta = 1e-3;
  std::uint64_t seed = 42;
};

struct Checkpoint {
  int epoch = -1;
  std::vector<NDArray> label_params;
  std::vector<NDArray> conf_params;  // populated by the two-net objective
  double val_aa = 0.0;
  double val_wga = 0.0;
  double score = 0.0;  // (val_aa + val_wga) / 2
};

struct EpochStats {
  int epoch = 0;
  double label_loss = 0.0;
  double conf_loss = 0.0;
  double sim_loss = 0.0;
  double total_loss = 0.0;
  MetricsReport val;
  double train_seconds = 0.0;  // optimization phase only
  double total_seconds = 0.0;  // including validation
};

struct TrainResult {
  Checkpoint best;
  std::vector<EpochStats> history;
  int epochs_run = 0;
  bool stopped_early = false;
};

// Stops once `patience` consecutive epochs fail to improve the best score
// by more than min_delta.
class EarlyStopper {
 public:
  EarlyStopper(int patience, double min_delta)
      : patience_(patience), min_delta_(min_delta) {}

  bool update(double score) {
    if (score > best_ + min_delta_) {
      best_ = score;
      stale_ = 0;
    } else {
      ++stale_;
    }
    return stale_ >= patience_;
  }

  double best() const { return best_; }

 private:
  int patience_;
  double min_delta_;
  double best_ = -1e300;
  int stale_ = 0;
};

// Exponentiated-weights update: groups present in the batch (count > 0)
// scale by exp(eta * mean_loss), absent groups keep their weight, then the
// whole vector renormalizes. q stays a probability vector.
void groupdro_reweight(std::vector<double>& q, const std::vector<double>& mean_loss,
                       const std::vector<int>& counts, double eta);

// Deterministic net/sampler seeding shared by every algorithm: stream 1 for
// the label net, 2 for the confounder net, 3 for the sampler.
std::uint64_t label_net_seed(std::uint64_t seed);
std::uint64_t conf_net_seed(std::uint64_t seed);
std::uint64_t sampler_seed(std::uint64_t seed);

// Trains cfg.algorithm on `train`, validating per epoch on `val`.
// conf_net is required by the two-net objective, ignored otherwise.
// Networks are left at their final state; apply the returned checkpoint to
// evaluate the selected model.
TrainResult train(const TrainConfig& cfg, const Dataset& train,
                  const Dataset& val, Network& label_net, Network* conf_net);

// ---- evaluation helpers ----------------------------------------------
std::vector<int> predict(const Network& net, const Dataset& data,
                         std::size_t batch_size = 128);
NDArray compute_latents(const Network& net, const Dataset& data,
                        std::size_t batch_size = 128);
MetricsReport evaluate_split(const Network& net, const Dataset& data,
                             std::string split, std::size_t batch_size = 128);

// ---- randomized hyperparameter search ---------------------------------
struct SearchRange {
  double lo = 0.0, hi = 0.0;  // exponents when log10, raw bounds otherwise
  bool log10 = true;
};

struct SearchSpace {
  SearchRange label_lr{-5.0, -3.5};
  SearchRange conf_lr{-5.0, -3.5};
  SearchRange label_wd{-6.0, -2.0};
  SearchRange conf_wd{-6.0, -2.0};
  SearchRange lambda_c{-1.0, 2.0};
  SearchRange lambda_sim{-1.0, 2.0};
  SearchRange groupdro_eta{-1.0, 1.0};
};

struct TrialResult {
  int trial = 0;
  TrainConfig cfg;
  double val_aa = 0.0, val_wga = 0.0, score = 0.0;
  int best_epoch = -1;
};

TrainConfig draw_trial_config(const TrainConfig& base, const SearchSpace& space,
                              std::uint64_t seed, int trial);

// Trains `trials` drawn configs and returns them all, best first kept by
// the caller via best_trial(). parallel > 1 runs trials on worker threads.
std::vector<TrialResult> random_search(const TrainConfig& base,
                                       const SearchSpace& space, int trials,
                                       std::uint64_t seed, const Dataset& train,
                                       const Dataset& val, int parallel = 1);

// argmax validation score, earliest trial on ties
const TrialResult& best_trial(const std::vector<TrialResult>& trials);

// ---- similarity screening ------------------------------------------------
struct ScreenRow {
  SimKind kind{};
  Sampler::Kind sampling{};
  double train_wga = 0.0;
  double val_wga = 0.0;
};

// Trains the two-net objective for all 11 kinds x {random, uniform-group}
// at the budget carried by `base`; rows ordered by kind name, random first.
std::vector<ScreenRow> screening_harness(const TrainConfig& base,
                                         const Dataset& train, const Dataset& val,
                                         int parallel = 1);

}  // namespace ex2l
