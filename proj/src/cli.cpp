#include <CLI11.hpp>
#include <cstdlib>
#include <iostream>

#include "director/experiment.hpp"

namespace director {

namespace {

ExperimentConfig build_config(const std::string& config_path,
                              const std::vector<std::string>& overrides) {
  ExperimentConfig config =
      config_path.empty() ? ExperimentConfig{} : load_config_file(config_path);
  for (const std::string& kv : overrides) {
    const size_t eq = kv.find('=');
    if (eq == std::string::npos)
      throw ConfigError("--set expects key=value, got '" + kv + "'");
    apply_override(config, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (const char* env = std::getenv("DIRECTOR_OUT_DIR"); env != nullptr && *env != '\0')
    config.out_dir = env;
  return config;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"director: unified generator-classifier language model experiments"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  app.add_option("-c,--config", config_path, "experiment config file (key = value lines)");
  app.add_option("--set", overrides, "override a config key, e.g. --set train.gamma_train=0.5")
      ->take_all();

  auto* synth = app.add_subcommand("synth", "generate synthetic corpus files");

  auto* train = app.add_subcommand("train", "train a model on the configured corpus");
  bool resume = false;
  train->add_flag("--resume", resume, "continue from the last periodic checkpoint");

  auto* generate = app.add_subcommand("generate", "decode a prompts file");
  std::string checkpoint, prompts_file, gen_out;
  generate->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  generate->add_option("--prompts", prompts_file, "prompts TSV (context column)");
  generate->add_option("--out", gen_out, "output generations file")->required();

  auto* eval = app.add_subcommand("eval", "score a generations file");
  std::string generations_file, references_file, metrics_out, eval_checkpoint;
  eval->add_option("--generations", generations_file, "generations file")->required();
  eval->add_option("--references", references_file, "reference records TSV")->required();
  eval->add_option("--eval-checkpoint", eval_checkpoint,
                   "independent classifier scoring the generations");
  eval->add_option("--out", metrics_out, "metrics CSV path");

  auto* bench = app.add_subcommand("bench", "latency benchmark across strategies");
  std::string bench_checkpoint, bench_out;
  bench->add_option("--checkpoint", bench_checkpoint, "model checkpoint")->required();
  bench->add_option("--out", bench_out, "bench CSV path")->required();

  auto* sweep = app.add_subcommand("sweep", "train/evaluate a gamma-delta grid");
  std::string sweep_out;
  sweep->add_option("--out", sweep_out, "scatter CSV path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {  // --help
      app.exit(e);
      return 0;
    }
    std::cerr << e.what() << "\n";
    return 2;
  }

  try {
    ExperimentConfig config = build_config(config_path, overrides);

    if (synth->parsed()) {
      for (const std::string& path : cmd_synth(config))
        std::cout << "wrote " << path << "\n";
    } else if (train->parsed()) {
      TrainOutcome out = cmd_train(config, resume);
      std::cout << "trained " << out.steps_run << " steps; best metric "
                << out.best_metric << "\n"
                << "wrote " << out.best_checkpoint << "\n"
                << "wrote " << out.last_checkpoint << "\n"
                << "wrote " << out.history_csv << "\n";
    } else if (generate->parsed()) {
      if (prompts_file.empty())
        prompts_file = config.resolved_data_dir() + "/eval_prompts.tsv";
      std::cout << "wrote " << cmd_generate(config, checkpoint, prompts_file, gen_out)
                << "\n";
    } else if (eval->parsed()) {
      if (!eval_checkpoint.empty()) config.eval_checkpoint = eval_checkpoint;
      MetricsReport report = cmd_eval(config, generations_file, references_file, metrics_out);
      std::cout << "f1 " << report.f1 << "  class_acc " << report.class_acc
                << "  bad_token_rate " << report.bad_token_rate << "  repeat@3 "
                << report.repeat_at_n.at(3) << "  sec/ex " << report.sec_per_ex << "\n";
      if (!metrics_out.empty()) std::cout << "wrote " << metrics_out << "\n";
    } else if (bench->parsed()) {
      std::cout << "wrote " << cmd_bench(config, bench_checkpoint, bench_out) << "\n";
    } else if (sweep->parsed()) {
      std::cout << "wrote " << cmd_sweep(config, sweep_out) << "\n";
    }
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}

}  // namespace director
