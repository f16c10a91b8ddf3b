// Experiment runner. Verbs: train, screen, gradcam, mmd, timeit. Any config
// key can be overridden on the command line as --key=value; unknown keys are
// reported together with every other config problem.

#include <CLI11.hpp>

#include <iostream>
#include <string>
#include <vector>

#include "ex2l/experiment.hpp"

namespace {

std::vector<std::string> collect_overrides(CLI::App* sub) {
  std::vector<std::string> out;
  for (const auto& extra : sub->remaining()) out.push_back(extra);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"group-robust training with explanation-overlap regularization"};
  app.require_subcommand(1);

  std::string config_path, checkpoint_path, out_dir, partitions_arg = "by-label,by-confounder,by-env";
  int n_samples = 5;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "config file (key = value)");
    sub->allow_extras();  // --key=value config overrides
    return sub;
  };

  CLI::App* train = add_common(app.add_subcommand("train", "train across the seed list"));
  CLI::App* screen = add_common(app.add_subcommand("screen", "similarity-function screening table"));
  CLI::App* gradcam = add_common(app.add_subcommand("gradcam", "export heatmaps from a checkpoint"));
  gradcam->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
  gradcam->add_option("--n", n_samples, "number of test samples");
  gradcam->add_option("--out", out_dir, "output directory")->required();
  CLI::App* mmd = add_common(app.add_subcommand("mmd", "latent mean-map discrepancy report"));
  mmd->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
  mmd->add_option("--partitions", partitions_arg, "comma list: by-label,by-confounder,by-env");
  CLI::App* timeit = add_common(app.add_subcommand("timeit", "per-epoch wall clock per algorithm"));

  CLI11_PARSE(app, argc, argv);

  try {
    CLI::App* sub = app.get_subcommands().front();
    ex2l::ExperimentConfig cfg =
        ex2l::ExperimentConfig::load(config_path, collect_overrides(sub));

    if (sub == train) return ex2l::cmd_train(cfg);
    if (sub == screen) return ex2l::cmd_screen(cfg);
    if (sub == gradcam)
      return ex2l::cmd_gradcam(cfg, checkpoint_path, n_samples, out_dir);
    if (sub == mmd) {
      std::vector<std::string> parts;
      std::string cell;
      std::istringstream is(partitions_arg);
      while (std::getline(is, cell, ',')) parts.push_back(cell);
      return ex2l::cmd_mmd(cfg, checkpoint_path, parts);
    }
    if (sub == timeit) return ex2l::cmd_timeit(cfg);
    return 4;
  } catch (const ex2l::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ex2l::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
}
