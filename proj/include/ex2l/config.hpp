#pragma once

// Flat key = value experiment configuration with section headers, CLI
// overrides, collect-all validation, a canonical echo and a content hash.

#include <cstdint>
#include <string>
#include <vector>

#include "ex2l/trainer.hpp"

namespace ex2l {

struct ExperimentConfig {
  // dataset
  std::string dataset = "synth-cmnist";  // synth-cmnist | group-table | mnist-idx
  std::size_t train_n = 10000;
  std::size_t val_n = 2000;
  std::size_t test_n = 4000;
  std::vector<double> env_corr_train = {0.9, 0.8};
  double env_corr_test = 0.1;
  double label_flip = 0.25;
  std::string group_table = "waterbirds";  // builtin name or CSV path
  std::size_t train_per_env = 2500;
  std::size_t val_per_env = 500;
  std::string mnist_images;
  std::string mnist_labels;

  // training
  TrainConfig train;

  // run protocol
  std::vector<std::uint64_t> seeds = {42, 8, 777};
  std::string out_dir = "runs/out";
  int threads = 1;
  int export_heatmaps = 0;  // test samples to export after training
  int search_trials = 0;
  int parallel_trials = 1;
  bool gradcam_use_predicted = false;

  // screening budget
  std::string screen_dataset = "synth-cmnist";  // synth-cmnist | group-table
  std::size_t screen_train_n = 1536;
  std::size_t screen_val_n = 512;
  int screen_max_epochs = 8;

  int timeit_epochs = 2;
  std::vector<std::string> timeit_algorithms = {"erm", "ex2l", "groupdro"};

  // Defaults -> optional file -> overrides ("key=value" or "--key=value");
  // throws ConfigError listing every violation, not just the first.
  static ExperimentConfig load(const std::string& path,
                               const std::vector<std::string>& overrides);

  // Canonical echo: every resolved value, one key = value per line, fixed
  // order; itself loadable as a config file.
  std::string echo() const;
  std::uint64_t config_hash() const;  // FNV-1a over the echo
};

std::uint64_t fnv1a64(const std::string& text);

}  // namespace ex2l
