// Command-line front end for the MIMIC pipeline: pretrain an encoder, implant
// a backdoor, localize benign knowledge via per-layer MI, distill a clean
// student, and evaluate ACC/ASR on downstream linear probes.

#include <CLI11.hpp>
#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "mimic/mimic.hpp"

namespace {

mimic::ExperimentConfig load_config(const std::string& path,
                                    const std::vector<std::string>& overrides) {
  mimic::ExperimentConfig cfg = mimic::ExperimentConfig::from_file(path);
  for (const auto& kv : overrides) {
    auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw mimic::ConfigError("override must look like key.path=value, got: " + kv);
    cfg.set_path(kv.substr(0, eq), kv.substr(eq + 1));
  }
  return cfg;
}

void print_stage(const mimic::StageResult& r) {
  std::cout << (r.cached ? "[cached] " : "[done]   ") << r.name << " -> " << r.dir.string()
            << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MIMIC: mutual-information-guided backdoor mitigation for pre-trained encoders"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  app.add_option("-c,--config", config_path, "experiment config (JSON)")->required();
  app.add_option("--set", overrides, "override a config key by dotted path, e.g. defense.lambda2=500");

  std::string sweep_knob;
  std::vector<double> sweep_values;

  auto add_stage = [&](const std::string& name, const std::string& desc) {
    return app.add_subcommand(name, desc);
  };
  auto* cmd_pretrain = add_stage("pretrain", "train the clean encoder with infoNCE");
  auto* cmd_attack = add_stage("attack", "implant a backdoor into the pre-trained encoder");
  auto* cmd_localize = add_stage("localize", "estimate per-layer MI and schedule potency weights");
  auto* cmd_distill = add_stage("distill", "distill a clean student from the backdoored teacher");
  auto* cmd_ft = add_stage("ft", "fine-tuning baseline on the defender's clean set");
  auto* cmd_eval = add_stage("eval", "train downstream probes and report ACC/ASR");
  auto* cmd_pipeline = add_stage("pipeline", "run pretrain -> attack -> localize -> distill -> eval");
  auto* cmd_sweep = add_stage("sweep", "run a robustness sweep over one knob");
  cmd_sweep->add_option("--knob", sweep_knob,
                        "one of trigger_size|gamma|poison_ratio|lambda1|lambda2")
      ->required();
  cmd_sweep->add_option("--values", sweep_values, "override the configured sweep grid");
  auto* cmd_report = add_stage("report", "merge metrics and export figure CSVs/charts");

  CLI11_PARSE(app, argc, argv);

  try {
    mimic::ExperimentConfig cfg = load_config(config_path, overrides);
    mimic::Experiment ex(cfg);

    if (cmd_pipeline->parsed()) {
      for (const auto& r : ex.run_pipeline()) print_stage(r);
    } else if (cmd_sweep->parsed()) {
      nlohmann::json report = ex.run_sweep(sweep_knob, sweep_values);
      std::cout << report.dump(2) << "\n";
    } else if (cmd_report->parsed()) {
      ex.write_report();
      std::cout << "report written to " << (ex.output_dir() / "figures").string() << "\n";
    } else {
      for (const auto& name : {"pretrain", "attack", "localize", "distill", "ft", "eval"}) {
        if (app.get_subcommand(name)->parsed()) {
          print_stage(ex.run_stage(name));
          if (std::string(name) == "eval") {
            nlohmann::json ev = mimic::fsutil::read_json(ex.stage_dir("eval") / "eval.json");
            std::cout << ev.dump(2) << "\n";
          }
          break;
        }
      }
    }
    (void)cmd_pretrain;
    (void)cmd_attack;
    (void)cmd_localize;
    (void)cmd_distill;
    (void)cmd_ft;
    (void)cmd_eval;
  } catch (const mimic::Error& e) {
    nlohmann::json err = {{"error_category", mimic::category_name(e.category())},
                          {"message", e.what()}};
    std::cerr << err.dump() << "\n";
    return int(e.category());
  } catch (const std::exception& e) {
    nlohmann::json err = {{"error_category", "internal"}, {"message", e.what()}};
    std::cerr << err.dump() << "\n";
    return 1;
  }
  return 0;
}
