#pragma once

// Command engine behind the CLI verbs: dataset assembly from a config,
// seed-protocol training with metrics/manifest/checkpoint emission,
// similarity screening, heatmap export, latent MMD reports and per-epoch
// timing.

#include <optional>
#include <string>
#include <vector>

#include "ex2l/config.hpp"
#include "ex2l/trainer.hpp"

namespace ex2l {

struct DatasetBundle {
  Dataset train, val, test;
};

DatasetBundle build_datasets(const ExperimentConfig& cfg, std::uint64_t seed);
DatasetBundle build_screen_datasets(const ExperimentConfig& cfg, std::uint64_t seed);

struct SeedRunResult {
  std::uint64_t seed = 0;
  TrainResult result;
  MetricsReport test_report;
  Network label_net;                 // restored to the selected checkpoint
  std::optional<Network> conf_net;   // two-net objective only
  std::string metrics_csv;           // exactly what cmd_train writes
};

// One full training run for one seed, including the test-split report (MMD
// diagnostics filled where the partition is defined).
SeedRunResult run_single_seed(const ExperimentConfig& cfg, std::uint64_t seed,
                              const TrainConfig& train_cfg);

std::string metrics_csv_header(int n_groups);

// Verbs; return process exit codes (0 ok).
int cmd_train(const ExperimentConfig& cfg);
int cmd_screen(const ExperimentConfig& cfg);
int cmd_gradcam(const ExperimentConfig& cfg, const std::string& checkpoint_path,
                int n_samples, const std::string& out_dir);
int cmd_mmd(const ExperimentConfig& cfg, const std::string& checkpoint_path,
            const std::vector<std::string>& partitions);
int cmd_timeit(const ExperimentConfig& cfg);

}  // namespace ex2l
