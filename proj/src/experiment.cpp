#include "ex2l/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "ex2l/checkpoint.hpp"
#include "ex2l/gradcam.hpp"

namespace ex2l {

namespace fs = std::filesystem;

namespace {

std::string f6(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

std::string utc_now() {
  auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path);
  out << text;
  if (!out) throw DataError("write failed for " + path);
}

std::string sampling_name(Sampler::Kind k) {
  return k == Sampler::Kind::Random ? "random" : "uniform-group";
}

// the similarity column only applies to the two-net objective
std::string similarity_column(const TrainConfig& cfg) {
  return cfg.algorithm == Algorithm::Ex2l ? sim_kind_name(cfg.sim.kind) : "-";
}

std::uint64_t split_seed(std::uint64_t seed, int split, int env) {
  return hash_combine(seed, 100 * (split + 1) + static_cast<std::uint64_t>(env));
}

Dataset as_dataset(std::vector<Example> ex) {
  Dataset d;
  d.examples = std::move(ex);
  return d;
}

GroupTable resolve_group_table(const std::string& name) {
  if (name == "waterbirds") return builtin_waterbirds_table();
  if (name == "celeba") return builtin_celeba_table();
  return load_group_table_csv(name);
}

std::vector<Example> cmnist_split(const ExperimentConfig& cfg, std::uint64_t seed,
                                  int split, std::size_t total) {
  // train/val draw from the training environments, test from its own
  std::vector<Example> out;
  if (split == 2) {
    int env = static_cast<int>(cfg.env_corr_train.size());
    return gen_cmnist_style(total, cfg.env_corr_test, cfg.label_flip,
                            split_seed(seed, split, env), env);
  }
  std::size_t n_envs = cfg.env_corr_train.size();
  for (std::size_t e = 0; e < n_envs; ++e) {
    std::size_t n = total / n_envs + (e < total % n_envs ? 1 : 0);
    if (n == 0) continue;
    auto part = gen_cmnist_style(n, cfg.env_corr_train[e], cfg.label_flip,
                                 split_seed(seed, split, static_cast<int>(e)),
                                 static_cast<int>(e));
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

}  // namespace

DatasetBundle build_datasets(const ExperimentConfig& cfg, std::uint64_t seed) {
  DatasetBundle b;
  if (cfg.dataset == "synth-cmnist") {
    b.train = as_dataset(cmnist_split(cfg, seed, 0, cfg.train_n));
    b.val = as_dataset(cmnist_split(cfg, seed, 1, cfg.val_n));
    b.test = as_dataset(cmnist_split(cfg, seed, 2, cfg.test_n));
  } else if (cfg.dataset == "group-table") {
    GroupTable table = resolve_group_table(cfg.group_table);
    b.train = as_dataset(gen_from_group_table(table, cfg.train_per_env,
                                              split_seed(seed, 0, 0)));
    b.val = as_dataset(gen_from_group_table(table, cfg.val_per_env,
                                            split_seed(seed, 1, 0)));
    int test_env = table.env_ids().back() + 1;
    b.test = as_dataset(gen_from_group_table(
        uniform_group_table(table.n_labels, table.n_confounders, test_env),
        cfg.test_n, split_seed(seed, 2, 0)));
  } else if (cfg.dataset == "mnist-idx") {
    IdxDigits digits = load_mnist_idx(cfg.mnist_images, cfg.mnist_labels);
    std::size_t need = cfg.train_n + cfg.val_n + cfg.test_n;
    if (digits.images.size() < need)
      throw DataError("mnist-idx: need " + std::to_string(need) + " digits, file has " +
                      std::to_string(digits.images.size()));
    auto slice = [&](std::size_t lo, std::size_t n) {
      IdxDigits s;
      s.images.assign(digits.images.begin() + lo, digits.images.begin() + lo + n);
      s.labels.assign(digits.labels.begin() + lo, digits.labels.begin() + lo + n);
      return s;
    };
    std::size_t n_envs = cfg.env_corr_train.size();
    std::size_t off = 0;
    std::vector<Example> train;
    for (std::size_t e = 0; e < n_envs; ++e) {
      std::size_t n = cfg.train_n / n_envs + (e < cfg.train_n % n_envs ? 1 : 0);
      auto part = colorize_digits(slice(off, n), cfg.env_corr_train[e], cfg.label_flip,
                                  split_seed(seed, 0, static_cast<int>(e)),
                                  static_cast<int>(e));
      train.insert(train.end(), part.begin(), part.end());
      off += n;
    }
    b.train = as_dataset(std::move(train));
    std::vector<Example> val;
    for (std::size_t e = 0; e < n_envs; ++e) {
      std::size_t n = cfg.val_n / n_envs + (e < cfg.val_n % n_envs ? 1 : 0);
      auto part = colorize_digits(slice(off, n), cfg.env_corr_train[e], cfg.label_flip,
                                  split_seed(seed, 1, static_cast<int>(e)),
                                  static_cast<int>(e));
      val.insert(val.end(), part.begin(), part.end());
      off += n;
    }
    b.val = as_dataset(std::move(val));
    b.test = as_dataset(colorize_digits(slice(off, cfg.test_n), cfg.env_corr_test,
                                        cfg.label_flip,
                                        split_seed(seed, 2, static_cast<int>(n_envs)),
                                        static_cast<int>(n_envs)));
  } else {
    throw ConfigError("unknown dataset kind " + cfg.dataset);
  }
  return b;
}

DatasetBundle build_screen_datasets(const ExperimentConfig& cfg, std::uint64_t seed) {
  ExperimentConfig screen = cfg;
  screen.dataset = cfg.screen_dataset == "group-table" ? "group-table" : "synth-cmnist";
  screen.train_n = cfg.screen_train_n;
  screen.val_n = cfg.screen_val_n;
  screen.test_n = std::max<std::size_t>(cfg.screen_val_n, 64);
  screen.train_per_env = std::max<std::size_t>(cfg.screen_train_n / 2, 1);
  screen.val_per_env = std::max<std::size_t>(cfg.screen_val_n / 2, 1);
  return build_datasets(screen, seed);
}

// ---------------------------------------------------------------------
// metrics.csv
// ---------------------------------------------------------------------

std::string metrics_csv_header(int n_groups) {
  std::string h = "epoch,split,algorithm,similarity,sampling,aa,wga";
  for (int g = 0; g < n_groups; ++g) h += ",g" + std::to_string(g);
  h += ",mmd_y,mmd_c,mmd_env";
  return h;
}

namespace {

std::string metrics_row(int epoch, const MetricsReport& rep, const TrainConfig& cfg) {
  std::string row = std::to_string(epoch) + "," + rep.split + "," +
                    algorithm_name(cfg.algorithm) + "," + similarity_column(cfg) +
                    "," + sampling_name(cfg.sampling) + "," + f6(rep.aa) + "," +
                    f6(rep.wga);
  for (const auto& g : rep.groups)
    row += "," + (g.count > 0 ? f6(g.accuracy) : std::string());
  auto opt = [](const std::optional<double>& v) {
    return v ? f6(*v) : std::string();
  };
  row += "," + opt(rep.mmd_label) + "," + opt(rep.mmd_confounder) + "," +
         opt(rep.mmd_env);
  return row;
}

}  // namespace

SeedRunResult run_single_seed(const ExperimentConfig& cfg, std::uint64_t seed,
                              const TrainConfig& train_cfg) {
  DatasetBundle data = build_datasets(cfg, seed);
  const auto& img = data.train.examples.front().image.shape();

  TrainConfig tc = train_cfg;
  tc.seed = seed;

  SeedRunResult out;
  out.seed = seed;
  out.label_net = make_default_cnn(img[0], img[1], img[2], 1, label_net_seed(seed));
  Network conf_net = make_default_cnn(img[0], img[1], img[2], 1, conf_net_seed(seed));

  out.result = train(tc, data.train, data.val, out.label_net,
                     tc.algorithm == Algorithm::Ex2l ? &conf_net : nullptr);

  out.label_net.restore(out.result.best.label_params);
  if (tc.algorithm == Algorithm::Ex2l) {
    conf_net.restore(out.result.best.conf_params);
    out.conf_net = std::move(conf_net);
  }

  out.test_report = evaluate_split(out.label_net, data.test, "test", tc.batch_size);
  NDArray latents = compute_latents(out.label_net, data.test, tc.batch_size);
  auto try_mmd = [&](Partition p) -> std::optional<double> {
    try {
      return mmd_partition(latents, data.test, p);
    } catch (const UsageError&) {
      return std::nullopt;  // partition undefined on this split
    }
  };
  out.test_report.mmd_label = try_mmd(Partition::ByLabel);
  out.test_report.mmd_confounder = try_mmd(Partition::ByConfounder);
  out.test_report.mmd_env = try_mmd(Partition::ByEnv);

  std::ostringstream csv;
  csv << metrics_csv_header(data.train.n_groups()) << "\n";
  for (const auto& es : out.result.history)
    csv << metrics_row(es.epoch, es.val, tc) << "\n";
  csv << metrics_row(out.result.best.epoch, out.test_report, tc) << "\n";
  out.metrics_csv = csv.str();
  return out;
}

// ---------------------------------------------------------------------
// cmd_train
// ---------------------------------------------------------------------

namespace {

void export_sample_heatmaps(const ExperimentConfig& cfg, const SeedRunResult& run,
                            const Dataset& test, const std::string& dir) {
  int n = std::min<int>(cfg.export_heatmaps, static_cast<int>(test.size()));
  if (n <= 0) return;
  fs::create_directories(dir);
  std::vector<int> idx(n);
  for (int i = 0; i < n; ++i) idx[i] = i;
  Batch b = make_batch(test, idx);

  auto trace_y = run.label_net.forward(b.images);
  std::vector<int> preds;
  for (std::size_t i = 0; i < b.labels.size(); ++i)
    preds.push_back(trace_y.logits->value[i] > 0.0 ? 1 : 0);
  std::vector<int> target_y = cfg.gradcam_use_predicted ? preds : b.labels;
  auto maps_y = heatmap(trace_y, cam_weights(trace_y, target_logit(
                            trace_y.logits, target_y, HeadKind::Binary)));

  ad::NodePtr maps_c;
  if (run.conf_net) {
    auto trace_c = run.conf_net->forward(b.images);
    maps_c = heatmap(trace_c, cam_weights(trace_c, target_logit(
                         trace_c.logits, b.confounders, HeadKind::Binary)));
  }

  std::ostringstream index;
  index << "sample,y,y_hat,c,label_map_path,conf_map_path\n";
  for (int i = 0; i < n; ++i) {
    std::string label_path = dir + "/test_" + std::to_string(i) + "_label.pgm";
    export_heatmap(heatmap_slice(maps_y, i), label_path);
    std::string conf_path;
    if (maps_c) {
      conf_path = dir + "/test_" + std::to_string(i) + "_confounder.pgm";
      export_heatmap(heatmap_slice(maps_c, i), conf_path);
    }
    index << i << "," << b.labels[i] << "," << preds[i] << "," << b.confounders[i]
          << "," << label_path << "," << conf_path << "\n";
  }
  write_file(dir + "/index.csv", index.str());
}

void write_manifest(const ExperimentConfig& cfg, const std::string& started,
                    const std::vector<SeedRunResult>& runs) {
  std::ostringstream m;
  char hash[32];
  std::snprintf(hash, sizeof(hash), "%016llx",
                static_cast<unsigned long long>(cfg.config_hash()));
  m << "# run manifest (comments are metadata; the key = value body below\n";
  m << "# is a loadable config that replays this run bit-identically)\n";
  m << "# config_hash = " << hash << "\n";
  m << "# started_utc = " << started << "\n";
  m << "# finished_utc = " << utc_now() << "\n";
  for (const auto& r : runs) {
    m << "# seed " << r.seed << " epoch_seconds =";
    for (const auto& es : r.result.history) m << " " << f6(es.total_seconds);
    m << "\n";
  }
  m << cfg.echo();
  write_file(cfg.out_dir + "/manifest.txt", m.str());
}

}  // namespace

int cmd_train(const ExperimentConfig& cfg) {
  std::string started = utc_now();
  fs::create_directories(cfg.out_dir);
  ad::set_kernel_threads(cfg.threads);

  TrainConfig base = cfg.train;

  if (cfg.search_trials > 0) {
    // randomized search at the configured budget, then the seed protocol
    // with the winning draw
    DatasetBundle search_data = build_datasets(cfg, cfg.seeds.front());
    TrainConfig search_base = base;
    search_base.seed = cfg.seeds.front();
    if (cfg.parallel_trials > 1) ad::set_kernel_threads(1);
    auto trials = random_search(search_base, SearchSpace{}, cfg.search_trials,
                                hash_combine(cfg.seeds.front(), 77),
                                search_data.train, search_data.val,
                                cfg.parallel_trials);
    ad::set_kernel_threads(cfg.threads);
    std::ostringstream tcsv;
    tcsv << "trial,label_lr,conf_lr,label_wd,conf_wd,lambda_c,lambda_sim,"
            "groupdro_eta,val_aa,val_wga,score,best_epoch\n";
    for (const auto& t : trials) {
      char row[256];
      std::snprintf(row, sizeof(row),
                    "%d,%.8g,%.8g,%.8g,%.8g,%.8g,%.8g,%.8g,%.6f,%.6f,%.6f,%d\n",
                    t.trial, t.cfg.label_lr, t.cfg.conf_lr, t.cfg.label_wd,
                    t.cfg.conf_wd, t.cfg.lambda_c, t.cfg.lambda_sim,
                    t.cfg.groupdro_eta, t.val_aa, t.val_wga, t.score, t.best_epoch);
      tcsv << row;
    }
    write_file(cfg.out_dir + "/trials.csv", tcsv.str());
    const TrialResult& best = best_trial(trials);
    std::cout << "search: best trial " << best.trial << " (score "
              << f6(best.score) << ")\n";
    base = best.cfg;
  }

  std::vector<SeedRunResult> runs;
  for (std::uint64_t seed : cfg.seeds) {
    SeedRunResult run = run_single_seed(cfg, seed, base);
    std::string dir = cfg.out_dir + "/seed_" + std::to_string(seed);
    fs::create_directories(dir);
    write_file(dir + "/metrics.csv", run.metrics_csv);

    CheckpointFile ckpt;
    ckpt.nets.push_back(snapshot_net(run.label_net, "label"));
    if (run.conf_net)
      ckpt.nets.push_back(snapshot_net(*run.conf_net, "confounder"));
    save_checkpoint(ckpt, dir + "/checkpoint.bin");

    if (cfg.export_heatmaps > 0) {
      DatasetBundle data = build_datasets(cfg, seed);
      export_sample_heatmaps(cfg, run, data.test, dir + "/heatmaps");
    }

    std::cout << "seed " << seed << ": epochs " << run.result.epochs_run
              << ", best epoch " << run.result.best.epoch << ", val score "
              << f6(run.result.best.score) << ", test AA " << f6(run.test_report.aa)
              << ", test WGA " << f6(run.test_report.wga) << "\n";
    runs.push_back(std::move(run));
  }

  // mean +/- sample std over seeds
  auto stats = [&](auto get) {
    double mean = 0.0;
    for (const auto& r : runs) mean += get(r);
    mean /= static_cast<double>(runs.size());
    double var = 0.0;
    for (const auto& r : runs) var += (get(r) - mean) * (get(r) - mean);
    double sd = runs.size() > 1 ? std::sqrt(var / static_cast<double>(runs.size() - 1)) : 0.0;
    return std::pair<double, double>{mean, sd};
  };
  auto [aa_m, aa_s] = stats([](const SeedRunResult& r) { return r.test_report.aa; });
  auto [wga_m, wga_s] = stats([](const SeedRunResult& r) { return r.test_report.wga; });

  std::ostringstream sum;
  sum << "algorithm,similarity,sampling,n_seeds,test_aa_mean,test_aa_std,"
         "test_wga_mean,test_wga_std\n";
  sum << algorithm_name(base.algorithm) << "," << similarity_column(base) << ","
      << sampling_name(base.sampling) << "," << runs.size() << "," << f6(aa_m)
      << "," << f6(aa_s) << "," << f6(wga_m) << "," << f6(wga_s) << "\n";
  write_file(cfg.out_dir + "/summary.csv", sum.str());
  std::cout << "test AA " << f6(aa_m) << " +/- " << f6(aa_s) << ", test WGA "
            << f6(wga_m) << " +/- " << f6(wga_s) << " over " << runs.size()
            << " seeds\n";

  write_manifest(cfg, started, runs);
  return 0;
}

// ---------------------------------------------------------------------
// cmd_screen
// ---------------------------------------------------------------------

int cmd_screen(const ExperimentConfig& cfg) {
  fs::create_directories(cfg.out_dir);
  // trial-level parallelism only; kernels stay single-threaded for
  // bit-identical rows at any worker count
  ad::set_kernel_threads(1);

  DatasetBundle data = build_screen_datasets(cfg, cfg.seeds.front());
  TrainConfig base = cfg.train;
  base.seed = cfg.seeds.front();
  base.max_epochs = cfg.screen_max_epochs;
  base.patience = std::max(3, cfg.screen_max_epochs / 2);

  auto rows = screening_harness(base, data.train, data.val, cfg.parallel_trials);

  std::ostringstream csv;
  csv << "name,sampling,train_wga,val_wga\n";
  for (const auto& r : rows)
    csv << sim_kind_name(r.kind) << "," << sampling_name(r.sampling) << ","
        << f6(r.train_wga) << "," << f6(r.val_wga) << "\n";
  write_file(cfg.out_dir + "/screen.csv", csv.str());

  // top-3 unique kinds by validation WGA
  auto ranked = rows;
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const ScreenRow& a, const ScreenRow& b) {
                     return a.val_wga > b.val_wga;
                   });
  std::cout << "top kinds by val WGA:\n";
  std::vector<SimKind> seen;
  for (const auto& r : ranked) {
    if (std::find(seen.begin(), seen.end(), r.kind) != seen.end()) continue;
    seen.push_back(r.kind);
    std::cout << "  " << sim_kind_name(r.kind) << " (" << sampling_name(r.sampling)
              << ", val WGA " << f6(r.val_wga) << ")\n";
    if (seen.size() == 3) break;
  }
  return 0;
}

// ---------------------------------------------------------------------
// cmd_gradcam
// ---------------------------------------------------------------------

int cmd_gradcam(const ExperimentConfig& cfg, const std::string& checkpoint_path,
                int n_samples, const std::string& out_dir) {
  ad::set_kernel_threads(cfg.threads);
  CheckpointFile ckpt = load_checkpoint(checkpoint_path);
  const NetSnapshot* label_snap = ckpt.find("label");
  if (!label_snap) throw DataError(checkpoint_path + ": no label net");
  Network label_net = instantiate_net(*label_snap);
  std::optional<Network> conf_net;
  if (const NetSnapshot* cs = ckpt.find("confounder"))
    conf_net = instantiate_net(*cs);

  DatasetBundle data = build_datasets(cfg, cfg.seeds.front());
  SeedRunResult fake;
  fake.label_net = std::move(label_net);
  fake.conf_net = std::move(conf_net);
  ExperimentConfig local = cfg;
  local.export_heatmaps = n_samples;
  export_sample_heatmaps(local, fake, data.test, out_dir);
  std::cout << "wrote " << n_samples << " sample heatmap"
            << (fake.conf_net ? " pairs" : "s") << " to " << out_dir << "\n";
  return 0;
}

// ---------------------------------------------------------------------
// cmd_mmd
// ---------------------------------------------------------------------

int cmd_mmd(const ExperimentConfig& cfg, const std::string& checkpoint_path,
            const std::vector<std::string>& partitions) {
  ad::set_kernel_threads(cfg.threads);
  CheckpointFile ckpt = load_checkpoint(checkpoint_path);
  const NetSnapshot* label_snap = ckpt.find("label");
  if (!label_snap) throw DataError(checkpoint_path + ": no label net");
  Network net = instantiate_net(*label_snap);

  DatasetBundle data = build_datasets(cfg, cfg.seeds.front());
  NDArray latents = compute_latents(net, data.test, cfg.train.batch_size);

  std::ostringstream csv;
  csv << "# latents: test split, label model\n";
  csv << "partition,mmd\n";
  for (const auto& name : partitions) {
    Partition p = partition_from_string(name);
    double v = mmd_partition(latents, data.test, p);
    csv << name << "," << f6(v) << "\n";
  }
  fs::create_directories(cfg.out_dir);
  write_file(cfg.out_dir + "/mmd.csv", csv.str());
  std::cout << csv.str();
  return 0;
}

// ---------------------------------------------------------------------
// cmd_timeit
// ---------------------------------------------------------------------

int cmd_timeit(const ExperimentConfig& cfg) {
  fs::create_directories(cfg.out_dir);
  ad::set_kernel_threads(cfg.threads);
  DatasetBundle data = build_datasets(cfg, cfg.seeds.front());
  const auto& img = data.train.examples.front().image.shape();

  std::vector<std::string> algos = cfg.timeit_algorithms;
  std::sort(algos.begin(), algos.end());

  struct Row {
    std::string algo;
    double sec = 0.0;
  };
  std::vector<Row> rows;
  for (const auto& name : algos) {
    TrainConfig tc = cfg.train;
    tc.algorithm = algorithm_from_string(name);
    tc.seed = cfg.seeds.front();
    tc.max_epochs = cfg.timeit_epochs;
    tc.patience = cfg.timeit_epochs + 1;  // never stop early
    Network label_net = make_default_cnn(img[0], img[1], img[2], 1,
                                         label_net_seed(tc.seed));
    Network conf_net = make_default_cnn(img[0], img[1], img[2], 1,
                                        conf_net_seed(tc.seed));
    TrainResult r = train(tc, data.train, data.val, label_net,
                          tc.algorithm == Algorithm::Ex2l ? &conf_net : nullptr);
    double sec = 0.0;
    for (const auto& es : r.history) sec += es.train_seconds;
    rows.push_back({name, sec / static_cast<double>(r.history.size())});
  }

  double erm_sec = 0.0;
  for (const auto& r : rows)
    if (r.algo == "erm") erm_sec = r.sec;

  std::ostringstream csv;
  csv << "algorithm,time_epoch_s,ratio_vs_erm\n";
  for (const auto& r : rows) {
    csv << r.algo << "," << f6(r.sec) << ",";
    if (erm_sec > 0.0 && r.algo != "erm") csv << f6(r.sec / erm_sec);
    csv << "\n";
  }
  write_file(cfg.out_dir + "/timeit.csv", csv.str());
  std::cout << csv.str();
  return 0;
}

}  // namespace ex2l
