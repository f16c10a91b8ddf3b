#include "ex2l/config.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace ex2l {

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  std::string cell;
  while (std::getline(is, cell, ',')) out.push_back(trim(cell));
  return out;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

struct Applier {
  ExperimentConfig& cfg;
  std::vector<std::string> errors;

  void fail(const std::string& key, const std::string& why) {
    errors.push_back(key + ": " + why);
  }

  double num(const std::string& key, const std::string& v, double lo, double hi) {
    try {
      double d = std::stod(v);
      if (d < lo || d > hi)
        fail(key, "value " + v + " outside [" + fmt(lo) + ", " + fmt(hi) + "]");
      return d;
    } catch (const std::exception&) {
      fail(key, "not a number: " + v);
      return lo;
    }
  }

  long integer(const std::string& key, const std::string& v, long lo, long hi) {
    try {
      long d = std::stol(v);
      if (d < lo || d > hi)
        fail(key, "value " + v + " outside [" + std::to_string(lo) + ", " +
                      std::to_string(hi) + "]");
      return d;
    } catch (const std::exception&) {
      fail(key, "not an integer: " + v);
      return lo;
    }
  }

  void apply(const std::string& key, const std::string& value) {
    if (key == "dataset") {
      if (value != "synth-cmnist" && value != "group-table" && value != "mnist-idx")
        fail(key, "unknown dataset kind '" + value + "'");
      else
        cfg.dataset = value;
    } else if (key == "train_n") {
      cfg.train_n = static_cast<std::size_t>(integer(key, value, 1, 100000000));
    } else if (key == "val_n") {
      cfg.val_n = static_cast<std::size_t>(integer(key, value, 1, 100000000));
    } else if (key == "test_n") {
      cfg.test_n = static_cast<std::size_t>(integer(key, value, 1, 100000000));
    } else if (key == "env_corr_train") {
      std::vector<double> v;
      for (const auto& cell : split_csv(value)) v.push_back(num(key, cell, 0.0, 1.0));
      if (v.empty()) fail(key, "needs at least one environment correlation");
      else cfg.env_corr_train = v;
    } else if (key == "env_corr_test") {
      cfg.env_corr_test = num(key, value, 0.0, 1.0);
    } else if (key == "label_flip") {
      cfg.label_flip = num(key, value, 0.0, 1.0);
    } else if (key == "group_table") {
      cfg.group_table = value;
    } else if (key == "train_per_env") {
      cfg.train_per_env = static_cast<std::size_t>(integer(key, value, 1, 100000000));
    } else if (key == "val_per_env") {
      cfg.val_per_env = static_cast<std::size_t>(integer(key, value, 1, 100000000));
    } else if (key == "mnist_images") {
      cfg.mnist_images = value;
    } else if (key == "mnist_labels") {
      cfg.mnist_labels = value;
    } else if (key == "algorithm") {
      try {
        cfg.train.algorithm = algorithm_from_string(value);
      } catch (const ConfigError& e) {
        fail(key, e.what());
      }
    } else if (key == "similarity") {
      try {
        cfg.train.sim.kind = sim_kind_from_string(value);
      } catch (const ConfigError& e) {
        fail(key, e.what());
      }
    } else if (key == "sampling") {
      if (value == "random") cfg.train.sampling = Sampler::Kind::Random;
      else if (value == "uniform-group") cfg.train.sampling = Sampler::Kind::UniformGroup;
      else fail(key, "unknown sampling '" + value + "'; valid: random uniform-group");
    } else if (key == "lambda_c") {
      cfg.train.lambda_c = num(key, value, 0.0, 1e9);
    } else if (key == "lambda_sim") {
      cfg.train.lambda_sim = num(key, value, 0.0, 1e9);
    } else if (key == "groupdro_eta") {
      cfg.train.groupdro_eta = num(key, value, 1e-12, 1e9);
    } else if (key == "label_lr") {
      cfg.train.label_lr = num(key, value, 1e-12, 1e6);
    } else if (key == "conf_lr") {
      cfg.train.conf_lr = num(key, value, 1e-12, 1e6);
    } else if (key == "label_wd") {
      cfg.train.label_wd = num(key, value, 0.0, 1e6);
    } else if (key == "conf_wd") {
      cfg.train.conf_wd = num(key, value, 0.0, 1e6);
    } else if (key == "batch_size") {
      cfg.train.batch_size = static_cast<std::size_t>(integer(key, value, 1, 1000000));
    } else if (key == "max_epochs") {
      cfg.train.max_epochs = static_cast<int>(integer(key, value, 1, 1000000));
    } else if (key == "patience") {
      cfg.train.patience = static_cast<int>(integer(key, value, 1, 1000000));
    } else if (key == "min_delta") {
      cfg.train.min_delta = num(key, value, 0.0, 1.0);
    } else if (key == "sim_epsilon") {
      cfg.train.sim.epsilon = num(key, value, 1e-300, 1.0);
    } else if (key == "seeds") {
      std::vector<std::uint64_t> v;
      for (const auto& cell : split_csv(value)) {
        try {
          v.push_back(std::stoull(cell));
        } catch (const std::exception&) {
          fail(key, "not a seed: " + cell);
        }
      }
      if (v.empty()) fail(key, "needs at least one seed");
      else cfg.seeds = v;
    } else if (key == "out_dir") {
      cfg.out_dir = value;
    } else if (key == "threads") {
      cfg.threads = static_cast<int>(integer(key, value, 1, 256));
    } else if (key == "export_heatmaps") {
      cfg.export_heatmaps = static_cast<int>(integer(key, value, 0, 100000));
    } else if (key == "search_trials") {
      cfg.search_trials = static_cast<int>(integer(key, value, 0, 100000));
    } else if (key == "parallel_trials") {
      cfg.parallel_trials = static_cast<int>(integer(key, value, 1, 256));
    } else if (key == "gradcam_use_predicted") {
      cfg.gradcam_use_predicted = integer(key, value, 0, 1) != 0;
    } else if (key == "screen_dataset") {
      if (value != "synth-cmnist" && value != "group-table")
        fail(key, "unknown screen dataset '" + value + "'");
      else
        cfg.screen_dataset = value;
    } else if (key == "screen_train_n") {
      cfg.screen_train_n = static_cast<std::size_t>(integer(key, value, 1, 100000000));
    } else if (key == "screen_val_n") {
      cfg.screen_val_n = static_cast<std::size_t>(integer(key, value, 1, 100000000));
    } else if (key == "screen_max_epochs") {
      cfg.screen_max_epochs = static_cast<int>(integer(key, value, 1, 100000));
    } else if (key == "timeit_epochs") {
      cfg.timeit_epochs = static_cast<int>(integer(key, value, 1, 100000));
    } else if (key == "timeit_algorithms") {
      std::vector<std::string> v;
      for (const auto& cell : split_csv(value)) {
        if (cell != "erm" && cell != "groupdro" && cell != "ex2l")
          fail(key, "unknown algorithm '" + cell + "'");
        else
          v.push_back(cell);
      }
      if (v.empty()) fail(key, "needs at least one algorithm");
      else cfg.timeit_algorithms = v;
    } else {
      fail(key, "unknown key");
    }
  }
};

}  // namespace

std::uint64_t fnv1a64(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

ExperimentConfig ExperimentConfig::load(const std::string& path,
                                        const std::vector<std::string>& overrides) {
  ExperimentConfig cfg;
  Applier ap{cfg};

  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      std::string t = trim(line);
      if (t.empty() || t[0] == '#' || t[0] == '[') continue;
      std::size_t eq = t.find('=');
      if (eq == std::string::npos) {
        ap.errors.push_back(path + ":" + std::to_string(lineno) +
                            ": expected key = value, got '" + t + "'");
        continue;
      }
      ap.apply(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
  }

  for (const auto& ov : overrides) {
    std::string t = ov;
    if (t.rfind("--", 0) == 0) t = t.substr(2);
    std::size_t eq = t.find('=');
    if (eq == std::string::npos) {
      ap.errors.push_back("override '" + ov + "': expected key=value");
      continue;
    }
    ap.apply(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }

  if (cfg.dataset == "mnist-idx" &&
      (cfg.mnist_images.empty() || cfg.mnist_labels.empty()))
    ap.errors.push_back("mnist-idx dataset needs mnist_images and mnist_labels paths");

  if (!ap.errors.empty()) {
    std::string msg = "invalid configuration (" +
                      std::to_string(ap.errors.size()) + " problems):";
    for (const auto& e : ap.errors) msg += "\n  - " + e;
    throw ConfigError(msg);
  }
  return cfg;
}

std::string ExperimentConfig::echo() const {
  std::ostringstream os;
  os << "[dataset]\n";
  os << "dataset = " << dataset << "\n";
  os << "train_n = " << train_n << "\n";
  os << "val_n = " << val_n << "\n";
  os << "test_n = " << test_n << "\n";
  os << "env_corr_train = ";
  for (std::size_t i = 0; i < env_corr_train.size(); ++i)
    os << (i ? "," : "") << fmt(env_corr_train[i]);
  os << "\n";
  os << "env_corr_test = " << fmt(env_corr_test) << "\n";
  os << "label_flip = " << fmt(label_flip) << "\n";
  os << "group_table = " << group_table << "\n";
  os << "train_per_env = " << train_per_env << "\n";
  os << "val_per_env = " << val_per_env << "\n";
  os << "mnist_images = " << mnist_images << "\n";
  os << "mnist_labels = " << mnist_labels << "\n";
  os << "[train]\n";
  os << "algorithm = " << algorithm_name(train.algorithm) << "\n";
  os << "similarity = " << sim_kind_name(train.sim.kind) << "\n";
  os << "sampling = "
     << (train.sampling == Sampler::Kind::Random ? "random" : "uniform-group") << "\n";
  os << "lambda_c = " << fmt(train.lambda_c) << "\n";
  os << "lambda_sim = " << fmt(train.lambda_sim) << "\n";
  os << "groupdro_eta = " << fmt(train.groupdro_eta) << "\n";
  os << "label_lr = " << fmt(train.label_lr) << "\n";
  os << "conf_lr = " << fmt(train.conf_lr) << "\n";
  os << "label_wd = " << fmt(train.label_wd) << "\n";
  os << "conf_wd = " << fmt(train.conf_wd) << "\n";
  os << "batch_size = " << train.batch_size << "\n";
  os << "max_epochs = " << train.max_epochs << "\n";
  os << "patience = " << train.patience << "\n";
  os << "min_delta = " << fmt(train.min_delta) << "\n";
  os << "sim_epsilon = " << fmt(train.sim.epsilon) << "\n";
  os << "[run]\n";
  os << "seeds = ";
  for (std::size_t i = 0; i < seeds.size(); ++i) os << (i ? "," : "") << seeds[i];
  os << "\n";
  os << "out_dir = " << out_dir << "\n";
  os << "threads = " << threads << "\n";
  os << "export_heatmaps = " << export_heatmaps << "\n";
  os << "search_trials = " << search_trials << "\n";
  os << "parallel_trials = " << parallel_trials << "\n";
  os << "gradcam_use_predicted = " << (gradcam_use_predicted ? 1 : 0) << "\n";
  os << "screen_dataset = " << screen_dataset << "\n";
  os << "screen_train_n = " << screen_train_n << "\n";
  os << "screen_val_n = " << screen_val_n << "\n";
  os << "screen_max_epochs = " << screen_max_epochs << "\n";
  os << "timeit_epochs = " << timeit_epochs << "\n";
  os << "timeit_algorithms = ";
  for (std::size_t i = 0; i < timeit_algorithms.size(); ++i)
    os << (i ? "," : "") << timeit_algorithms[i];
  os << "\n";
  return os.str();
}

std::uint64_t ExperimentConfig::config_hash() const { return fnv1a64(echo()); }

}  // namespace ex2l
