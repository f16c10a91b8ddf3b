#include "ex2l/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <functional>
#include <thread>

#include "ex2l/gradcam.hpp"

namespace ex2l {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

HeadKind head_kind(const Network& net) {
  return net.n_logits() == 1 ? HeadKind::Binary : HeadKind::Multiclass;
}

ad::NodePtr task_loss(const Network& net, ad::NodePtr logits,
                      const std::vector<int>& targets) {
  if (net.n_logits() == 1) return ad::bce_with_logits(std::move(logits), targets);
  return ad::cce_with_logits(std::move(logits), targets);
}

ad::NodePtr per_example_loss(const Network& net, ad::NodePtr logits,
                             const std::vector<int>& targets) {
  if (net.n_logits() == 1) return ad::bce_per_example(std::move(logits), targets);
  return ad::cce_per_example(std::move(logits), targets);
}

std::vector<int> logits_to_preds(const NDArray& logits) {
  const auto& s = logits.shape();
  std::size_t B = s[0], K = s.size() == 2 ? s[1] : 1;
  std::vector<int> preds(B);
  if (K == 1) {
    for (std::size_t i = 0; i < B; ++i) preds[i] = logits[i] > 0.0 ? 1 : 0;
  } else {
    for (std::size_t i = 0; i < B; ++i) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < K; ++k)
        if (logits[i * K + k] > logits[i * K + best]) best = k;
      preds[i] = static_cast<int>(best);
    }
  }
  return preds;
}

}  // namespace

Algorithm algorithm_from_string(const std::string& name) {
  if (name == "erm") return Algorithm::Erm;
  if (name == "groupdro") return Algorithm::GroupDro;
  if (name == "ex2l") return Algorithm::Ex2l;
  throw ConfigError("unknown algorithm '" + name + "'; valid: erm groupdro ex2l");
}

const std::string& algorithm_name(Algorithm a) {
  static const std::string names[] = {"erm", "groupdro", "ex2l"};
  return names[static_cast<int>(a)];
}

std::uint64_t label_net_seed(std::uint64_t seed) { return hash_combine(seed, 1); }
std::uint64_t conf_net_seed(std::uint64_t seed) { return hash_combine(seed, 2); }
std::uint64_t sampler_seed(std::uint64_t seed) { return hash_combine(seed, 3); }

void groupdro_reweight(std::vector<double>& q, const std::vector<double>& mean_loss,
                       const std::vector<int>& counts, double eta) {
  double z = 0.0;
  for (std::size_t g = 0; g < q.size(); ++g) {
    if (counts[g] > 0) q[g] *= std::exp(eta * mean_loss[g]);
    z += q[g];
  }
  for (auto& w : q) w /= z;
}

// ---------------------------------------------------------------------
// evaluation helpers
// ---------------------------------------------------------------------

std::vector<int> predict(const Network& net, const Dataset& data,
                         std::size_t batch_size) {
  std::vector<int> preds;
  preds.reserve(data.size());
  for (std::size_t lo = 0; lo < data.size(); lo += batch_size) {
    std::size_t hi = std::min(lo + batch_size, data.size());
    std::vector<int> idx(hi - lo);
    for (std::size_t i = lo; i < hi; ++i) idx[i - lo] = static_cast<int>(i);
    Batch b = make_batch(data, idx);
    auto trace = net.forward(b.images);
    for (int p : logits_to_preds(trace.logits->value)) preds.push_back(p);
  }
  return preds;
}

NDArray compute_latents(const Network& net, const Dataset& data,
                        std::size_t batch_size) {
  NDArray out({data.size(), net.latent_dim()});
  std::size_t d = net.latent_dim();
  for (std::size_t lo = 0; lo < data.size(); lo += batch_size) {
    std::size_t hi = std::min(lo + batch_size, data.size());
    std::vector<int> idx(hi - lo);
    for (std::size_t i = lo; i < hi; ++i) idx[i - lo] = static_cast<int>(i);
    Batch b = make_batch(data, idx);
    auto trace = net.forward(b.images);
    const NDArray& z = trace.latent->value;
    for (std::size_t r = 0; r < hi - lo; ++r)
      for (std::size_t j = 0; j < d; ++j) out[(lo + r) * d + j] = z[r * d + j];
  }
  return out;
}

MetricsReport evaluate_split(const Network& net, const Dataset& data,
                             std::string split, std::size_t batch_size) {
  std::vector<int> preds;
  preds.reserve(data.size());
  double loss_acc = 0.0;
  for (std::size_t lo = 0; lo < data.size(); lo += batch_size) {
    std::size_t hi = std::min(lo + batch_size, data.size());
    std::vector<int> idx(hi - lo);
    for (std::size_t i = lo; i < hi; ++i) idx[i - lo] = static_cast<int>(i);
    Batch b = make_batch(data, idx);
    auto trace = net.forward(b.images);
    loss_acc += task_loss(net, trace.logits, b.labels)->value[0] *
                static_cast<double>(hi - lo);
    for (int p : logits_to_preds(trace.logits->value)) preds.push_back(p);
  }
  MetricsReport rep = accuracy_report(preds, data, std::move(split));
  rep.mean_loss = loss_acc / static_cast<double>(data.size());
  return rep;
}

// ---------------------------------------------------------------------
// training
// ---------------------------------------------------------------------

namespace {

struct StepStats {
  double label_loss = 0.0, conf_loss = 0.0, sim_loss = 0.0, total_loss = 0.0;
};

// One optimization step of the two-net objective (Algorithm: forward both
// nets, select true-class target scalars, detached-weight heatmaps,
// similarity penalty, single backward, one SGD step per net).
StepStats ex2l_step(const TrainConfig& cfg, const Batch& b, Network& label_net,
                    Network& conf_net) {
  auto trace_y = label_net.forward(b.images);
  auto trace_c = conf_net.forward(b.images);

  auto s_y = target_logit(trace_y.logits, b.labels, head_kind(label_net));
  auto s_c = target_logit(trace_c.logits, b.confounders, head_kind(conf_net));
  NDArray alpha_y = cam_weights(trace_y, s_y);
  NDArray alpha_c = cam_weights(trace_c, s_c);
  auto map_y = heatmap(trace_y, alpha_y);
  auto map_c = heatmap(trace_c, alpha_c);

  auto loss_y = task_loss(label_net, trace_y.logits, b.labels);
  auto loss_c = task_loss(conf_net, trace_c.logits, b.confounders);
  auto loss_sim = evaluate(cfg.sim, map_y, map_c);
  auto total = ad::add(loss_y, ad::add(ad::mul_scalar(loss_c, cfg.lambda_c),
                                       ad::mul_scalar(loss_sim, cfg.lambda_sim)));

  ad::backward(total);
  sgd_step(label_net, cfg.label_lr, cfg.label_wd);
  sgd_step(conf_net, cfg.conf_lr, cfg.conf_wd);

  return {loss_y->value[0], loss_c->value[0], loss_sim->value[0], total->value[0]};
}

StepStats erm_step(const TrainConfig& cfg, const Batch& b, Network& net) {
  auto trace = net.forward(b.images);
  auto loss = task_loss(net, trace.logits, b.labels);
  ad::backward(loss);
  sgd_step(net, cfg.label_lr, cfg.label_wd);
  return {loss->value[0], 0.0, 0.0, loss->value[0]};
}

StepStats groupdro_step(const TrainConfig& cfg, const Batch& b, Network& net,
                        std::vector<double>& q) {
  auto trace = net.forward(b.images);
  auto per = per_example_loss(net, trace.logits, b.labels);

  int n_groups = static_cast<int>(q.size());
  std::vector<double> group_loss(n_groups, 0.0);
  std::vector<int> count(n_groups, 0);
  for (std::size_t i = 0; i < b.groups.size(); ++i) {
    group_loss[b.groups[i]] += per->value[i];
    count[b.groups[i]] += 1;
  }
  for (int g = 0; g < n_groups; ++g)
    if (count[g] > 0) group_loss[g] /= count[g];
  groupdro_reweight(q, group_loss, count, cfg.groupdro_eta);

  NDArray wvec({b.groups.size()});
  for (std::size_t i = 0; i < b.groups.size(); ++i)
    wvec[i] = q[b.groups[i]] / static_cast<double>(count[b.groups[i]]);
  auto weighted = ad::dot_const(per, std::move(wvec));

  ad::backward(weighted);
  sgd_step(net, cfg.label_lr, cfg.label_wd);
  return {weighted->value[0], 0.0, 0.0, weighted->value[0]};
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const Dataset& train_set,
                  const Dataset& val_set, Network& label_net, Network* conf_net) {
  if (cfg.algorithm == Algorithm::Ex2l && conf_net == nullptr)
    throw ConfigError("train: the two-net objective needs a confounder network");
  if (cfg.algorithm == Algorithm::Ex2l || cfg.algorithm == Algorithm::GroupDro) {
    // both need annotations beyond the plain label
    for (const auto& ex : train_set.examples)
      if (ex.group < 0 || ex.group >= train_set.n_groups())
        throw ConfigError("train: group annotations out of range");
  }

  Sampler sampler(cfg.sampling, train_set, cfg.batch_size,
                  sampler_seed(cfg.seed));
  std::size_t steps_per_epoch =
      Sampler::batches_per_epoch(train_set.size(), cfg.batch_size);

  std::vector<double> q(static_cast<std::size_t>(train_set.n_groups()),
                        1.0 / train_set.n_groups());  // persists across epochs

  TrainResult result;
  EarlyStopper stopper(cfg.patience, cfg.min_delta);

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    auto t0 = Clock::now();
    StepStats acc;
    for (std::size_t step = 0; step < steps_per_epoch; ++step) {
      Batch b = make_batch(train_set, sampler.next_batch());
      StepStats s;
      switch (cfg.algorithm) {
        case Algorithm::Erm: s = erm_step(cfg, b, label_net); break;
        case Algorithm::GroupDro: s = groupdro_step(cfg, b, label_net, q); break;
        case Algorithm::Ex2l: s = ex2l_step(cfg, b, label_net, *conf_net); break;
      }
      acc.label_loss += s.label_loss;
      acc.conf_loss += s.conf_loss;
      acc.sim_loss += s.sim_loss;
      acc.total_loss += s.total_loss;
    }
    double train_secs = seconds_since(t0);

    EpochStats es;
    es.epoch = epoch;
    es.label_loss = acc.label_loss / steps_per_epoch;
    es.conf_loss = acc.conf_loss / steps_per_epoch;
    es.sim_loss = acc.sim_loss / steps_per_epoch;
    es.total_loss = acc.total_loss / steps_per_epoch;
    es.val = evaluate_split(label_net, val_set, "val", cfg.batch_size);
    es.train_seconds = train_secs;
    es.total_seconds = seconds_since(t0);

    double score = (es.val.aa + es.val.wga) / 2.0;
    if (score > result.best.score || result.best.epoch < 0) {
      result.best.epoch = epoch;
      result.best.label_params = label_net.snapshot();
      if (cfg.algorithm == Algorithm::Ex2l)
        result.best.conf_params = conf_net->snapshot();
      result.best.val_aa = es.val.aa;
      result.best.val_wga = es.val.wga;
      result.best.score = score;
    }

    result.history.push_back(std::move(es));
    result.epochs_run = epoch;
    if (stopper.update(score)) {
      result.stopped_early = true;
      break;
    }
  }
  return result;
}

// ---------------------------------------------------------------------
// randomized search
// ---------------------------------------------------------------------

namespace {

double draw_range(const SearchRange& r, Rng& rng) {
  double v = rng.uniform(r.lo, r.hi);
  return r.log10 ? std::pow(10.0, v) : v;
}

}  // namespace

TrainConfig draw_trial_config(const TrainConfig& base, const SearchSpace& space,
                              std::uint64_t seed, int trial) {
  TrainConfig cfg = base;
  Rng rng = Rng::fork(seed, static_cast<std::uint64_t>(trial));
  cfg.label_lr = draw_range(space.label_lr, rng);
  cfg.conf_lr = draw_range(space.conf_lr, rng);
  cfg.label_wd = draw_range(space.label_wd, rng);
  cfg.conf_wd = draw_range(space.conf_wd, rng);
  cfg.lambda_c = draw_range(space.lambda_c, rng);
  cfg.lambda_sim = draw_range(space.lambda_sim, rng);
  cfg.groupdro_eta = draw_range(space.groupdro_eta, rng);
  return cfg;
}

namespace {

TrialResult run_trial(int trial, const TrainConfig& cfg, const Dataset& train_set,
                      const Dataset& val_set) {
  std::size_t n_classes = 0;
  for (const auto& ex : train_set.examples)
    n_classes = std::max(n_classes, static_cast<std::size_t>(ex.label) + 1);
  std::size_t n_logits = n_classes <= 2 ? 1 : n_classes;
  const auto& img = train_set.examples.front().image.shape();

  Network label_net = make_default_cnn(img[0], img[1], img[2], n_logits,
                                       label_net_seed(cfg.seed));
  Network conf_net = make_default_cnn(
      img[0], img[1], img[2],
      train_set.n_confounders <= 2 ? 1 : train_set.n_confounders,
      conf_net_seed(cfg.seed));

  TrainConfig local = cfg;
  TrainResult r = train(local, train_set, val_set, label_net,
                        local.algorithm == Algorithm::Ex2l ? &conf_net : nullptr);
  TrialResult out;
  out.trial = trial;
  out.cfg = cfg;
  out.val_aa = r.best.val_aa;
  out.val_wga = r.best.val_wga;
  out.score = r.best.score;
  out.best_epoch = r.best.epoch;
  return out;
}

void run_indexed(std::vector<std::function<void()>>& jobs, int parallel) {
  if (parallel <= 1) {
    for (auto& j : jobs) j();
    return;
  }
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (;;) {
      std::size_t i = next.fetch_add(1);
      if (i >= jobs.size()) return;
      jobs[i]();
    }
  };
  std::vector<std::thread> pool;
  int n = std::min<int>(parallel, static_cast<int>(jobs.size()));
  for (int i = 0; i < n; ++i) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
}

}  // namespace

std::vector<TrialResult> random_search(const TrainConfig& base,
                                       const SearchSpace& space, int trials,
                                       std::uint64_t seed, const Dataset& train_set,
                                       const Dataset& val_set, int parallel) {
  if (trials < 1) throw ConfigError("random_search: trials must be >= 1");
  std::vector<TrialResult> results(trials);
  std::vector<std::function<void()>> jobs;
  for (int t = 0; t < trials; ++t) {
    jobs.push_back([&, t] {
      TrainConfig cfg = draw_trial_config(base, space, seed, t);
      results[t] = run_trial(t, cfg, train_set, val_set);
    });
  }
  run_indexed(jobs, parallel);
  return results;
}

const TrialResult& best_trial(const std::vector<TrialResult>& trials) {
  if (trials.empty()) throw UsageError("best_trial: no trials");
  const TrialResult* best = &trials.front();
  for (const auto& t : trials)
    if (t.score > best->score) best = &t;
  return *best;
}

// ---------------------------------------------------------------------
// screening
// ---------------------------------------------------------------------

std::vector<ScreenRow> screening_harness(const TrainConfig& base,
                                         const Dataset& train_set,
                                         const Dataset& val_set, int parallel) {
  std::vector<std::pair<SimKind, Sampler::Kind>> grid;
  for (SimKind kind : all_sim_kinds())
    for (auto sampling : {Sampler::Kind::Random, Sampler::Kind::UniformGroup})
      grid.emplace_back(kind, sampling);

  std::vector<ScreenRow> rows(grid.size());
  std::vector<std::function<void()>> jobs;
  const auto& img = train_set.examples.front().image.shape();
  for (std::size_t i = 0; i < grid.size(); ++i) {
    jobs.push_back([&, i] {
      TrainConfig cfg = base;
      cfg.algorithm = Algorithm::Ex2l;
      cfg.sim.kind = grid[i].first;
      cfg.sampling = grid[i].second;

      Network label_net = make_default_cnn(img[0], img[1], img[2], 1,
                                           label_net_seed(cfg.seed));
      Network conf_net = make_default_cnn(img[0], img[1], img[2], 1,
                                          conf_net_seed(cfg.seed));
      TrainResult r = train(cfg, train_set, val_set, label_net, &conf_net);
      label_net.restore(r.best.label_params);
      MetricsReport train_rep = evaluate_split(label_net, train_set, "train",
                                               cfg.batch_size);
      rows[i] = {grid[i].first, grid[i].second, train_rep.wga, r.best.val_wga};
    });
  }
  run_indexed(jobs, parallel);
  return rows;
}

}  // namespace ex2l
