// speedvae: generate data, train, evaluate, run and sweep experiments.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "speedvae/error.hpp"
#include "speedvae/harness.hpp"

namespace {

using namespace speedvae;

constexpr int kExitConfig = 1;
constexpr int kExitRuntime = 2;

std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c == '\n' ? ' ' : c;
  }
  return out + "\"";
}

int report_error(std::string_view code, const std::string& message, int status) {
  std::cerr << "error code=" << code << " message=" << quote(message) << "\n";
  return status;
}

struct CommonArgs {
  std::string config;
  std::string preset;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--config", a.config, "Experiment config file");
  cmd->add_option("--preset", a.preset, "Start from a named preset");
  cmd->add_option("--out", a.out, "Output directory");
  cmd->add_option("--seed", a.seed, "Seed override");
  cmd->add_option("--set", a.overrides, "Override as section.key=value (repeatable)");
}

ExperimentConfig resolve(const CommonArgs& a, bool seed_is_data_seed) {
  ExperimentConfig cfg = a.preset.empty() ? ExperimentConfig{} : preset(a.preset);
  if (!a.config.empty()) cfg = parse_experiment_config(IniDocument::load(a.config), cfg);
  for (const std::string& kv : a.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) raise(ErrorCode::ConfigError, "--set expects section.key=value, got '" + kv + "'");
    apply_override(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (a.seed) {
    if (seed_is_data_seed) {
      cfg.dataset.gen_seed = *a.seed;
    } else {
      cfg.train.seed = *a.seed;
    }
  }
  if (!a.out.empty()) cfg.out_dir = a.out;
  cfg.validate();
  return cfg;
}

std::vector<std::string> split_values(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Short-run MCMC variational autoencoders with speed-measure adaptation"};
  app.require_subcommand(1);

  CommonArgs gen_args, train_args, eval_args, run_args, sweep_args;
  CLI::App* gen = app.add_subcommand("generate-data", "Sample a synthetic dataset and its ground-truth model");
  add_common(gen, gen_args);
  CLI::App* tr = app.add_subcommand("train", "Train and write metrics, events and a checkpoint");
  add_common(tr, train_args);
  CLI::App* ev = app.add_subcommand("evaluate", "Evaluate the checkpoint in the output directory");
  add_common(ev, eval_args);
  CLI::App* run = app.add_subcommand("run", "Train then evaluate");
  add_common(run, run_args);
  CLI::App* sw = app.add_subcommand("sweep", "Run one experiment per axis value and seed");
  add_common(sw, sweep_args);
  std::string axis = "preset", values;
  std::optional<std::size_t> seeds;
  bool condition_set = false;
  sw->add_option("--axis", axis, "Config key to vary, or 'preset'");
  sw->add_option("--values", values, "Comma separated values");
  sw->add_option("--seeds", seeds, "Seeds per cell");
  sw->add_flag("--condition-presets", condition_set, "Sweep the seven (10,20) condition-number presets");
  app.add_subcommand("presets", "List preset names");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report_error("UsageError", e.what(), kExitConfig);
  }

  try {
    if (app.got_subcommand("presets")) {
      for (const std::string& name : preset_names()) {
        std::cout << name << (preset(name).slow ? " (slow)" : "") << "\n";
      }
      return 0;
    }
    if (gen->parsed()) {
      const ExperimentConfig cfg = resolve(gen_args, true);
      const GeneratedData g = generate_data(cfg.dataset, cfg.out_dir);
      std::cout << "wrote " << g.data.rows() << " x " << g.data.cols() << " dataset to " << cfg.out_dir << "\n";
    } else if (tr->parsed()) {
      const ExperimentConfig cfg = resolve(train_args, false);
      const TrainResult r = train_experiment(cfg, cfg.out_dir);
      std::cout << "trained " << r.metrics.size() << " metric rows, " << r.state.events.size() << " events\n";
    } else if (ev->parsed()) {
      const ExperimentConfig cfg = resolve(eval_args, false);
      std::cout << evaluate_experiment(cfg, cfg.out_dir).to_json() << "\n";
    } else if (run->parsed()) {
      const ExperimentConfig cfg = resolve(run_args, false);
      std::cout << run_experiment(cfg, cfg.out_dir).report.to_json() << "\n";
    } else if (sw->parsed()) {
      ExperimentConfig cfg = resolve(sweep_args, false);
      if (seeds) cfg.seeds = *seeds;
      std::vector<std::string> vals;
      if (condition_set) {
        axis = "preset";
        vals = condition_presets();
      } else {
        vals = split_values(values);
      }
      const SweepResult r = sweep(cfg, axis, vals, cfg.out_dir);
      for (const std::string& row : r.summary_rows) std::cout << row << "\n";
      for (const SweepCell& c : r.cells) {
        if (!c.ok) return report_error("SweepCellFailed", c.value + " seed " + std::to_string(c.seed) + ": " + c.error, kExitRuntime);
      }
    }
  } catch (const Error& e) {
    return report_error(to_string(e.code()), e.what(), e.code() == ErrorCode::ConfigError ? kExitConfig : kExitRuntime);
  } catch (const std::exception& e) {
    return report_error("InternalError", e.what(), kExitRuntime);
  }
  return 0;
}
