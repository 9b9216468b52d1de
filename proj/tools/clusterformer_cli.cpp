#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "clusterformer/app.hpp"
#include "clusterformer/config.hpp"
#include "clusterformer/errors.hpp"

using namespace clusterformer;

namespace {

struct Flags {
  std::string config;
  std::map<std::string, std::string> values;
  std::vector<std::string> sets;
};

CLI::Option* add_value(CLI::App* app, Flags& flags, const std::string& flag, const std::string& key,
                       const std::string& help) {
  return app->add_option_function<std::string>(flag, [&flags, key](const std::string& v) { flags.values[key] = v; }, help);
}

void add_common(CLI::App* app, Flags& flags) {
  app->add_option("--config", flags.config, "Flat key=value file with run and model settings");
  add_value(app, flags, "--model", "model", "Model preset: tiny or swin_tiny");
  add_value(app, flags, "--data", "data", "Image directory or synthetic[:per_class=N,size=S,noise=X,classes=C,channels=1|3]");
  add_value(app, flags, "--out", "out", "Output directory");
  add_value(app, flags, "--seed", "seed", "Seed for data, weights and batch order");
  add_value(app, flags, "--precision", "precision", "single or double");
  add_value(app, flags, "--threads", "threads", "Evaluation threads");
  app->add_option("--set", flags.sets, "Extra key=value setting, repeatable");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Clustering transformer: train, evaluate, benchmark, visualize and gradient-check"};
  app.require_subcommand(1);
  Flags flags;

  auto* train = app.add_subcommand("train", "Train a model and write metrics.csv, best.ckpt, final.ckpt");
  add_common(train, flags);
  add_value(train, flags, "--epochs", "epochs", "Training epochs");
  add_value(train, flags, "--batch-size", "batch_size", "Samples per optimizer step");
  add_value(train, flags, "--lr", "lr", "Adam learning rate");
  add_value(train, flags, "--val-data", "val_data", "Held-out data: auto, none, or a source");

  auto* eval = app.add_subcommand("eval", "Report top-1 (and top-5) accuracy of a checkpoint");
  add_common(eval, flags);
  add_value(eval, flags, "--checkpoint", "checkpoint", "Checkpoint file");
  add_value(eval, flags, "--split", "split", "train or val");
  add_value(eval, flags, "--val-data", "val_data", "Held-out data: auto, none, or a source");

  auto* bench = app.add_subcommand("bench", "Time and count flops for clustering versus self-attention");
  add_common(bench, flags);
  add_value(bench, flags, "--mechanisms", "bench_mechanisms", "Comma list of rca, self_attention");
  add_value(bench, flags, "--hw", "bench_HW", "Comma list of token counts");
  add_value(bench, flags, "--k", "bench_K", "Comma list of center counts");
  add_value(bench, flags, "--d", "bench_D", "Comma list of widths");
  add_value(bench, flags, "--t", "bench_T", "Comma list of iteration counts");
  add_value(bench, flags, "--runs", "bench_runs", "Timed runs per point");

  auto* visualize = app.add_subcommand("visualize", "Render the final-stage assignment map as a P6 image");
  add_common(visualize, flags);
  add_value(visualize, flags, "--checkpoint", "checkpoint", "Checkpoint file (default: fresh weights)");
  add_value(visualize, flags, "--image", "image", "Input P5/P6 image");

  auto* gradcheck = app.add_subcommand("gradcheck", "Compare analytic and numeric gradients");
  add_common(gradcheck, flags);
  add_value(gradcheck, flags, "--scope", "scope", "ops, model or all");
  add_value(gradcheck, flags, "--inject-fault", "inject_fault", "")->group("");

  CLI11_PARSE(app, argc, argv);

  try {
    KeyValues overrides;
    for (const auto& s : flags.sets) {
      const auto kv = parse_key_values(s);
      if (kv.empty()) throw ConfigError("--set expects key=value, got '" + s + "'");
      overrides.insert(kv.begin(), kv.end());
    }
    for (const auto& [key, v] : flags.values) overrides[key] = v;
    overrides["command"] = app.get_subcommands().front()->get_name();
    const RunConfig run = RunConfig::load(flags.config, overrides);
    return run_command(run, std::cout, std::cerr);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
}
