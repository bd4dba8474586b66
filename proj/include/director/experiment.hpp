#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "director/data.hpp"
#include "director/decode.hpp"
#include "director/metrics.hpp"
#include "director/model.hpp"
#include "director/train.hpp"

namespace director {

/// Config or usage problem: maps to exit code 2. Anything else that escapes a
/// subcommand maps to exit code 3.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class TaskKind { safety_synthetic, repetition, custom_corpus };

std::string to_string(TaskKind t);
TaskKind parse_task(const std::string& name);

/// One experiment, fully determined: same config + seed => bit-identical
/// checkpoints and metrics.
struct ExperimentConfig {
  TaskKind task = TaskKind::safety_synthetic;
  uint64_t seed = 0;
  std::string out_dir = "runs/out";
  std::string data_dir;  // corpus location; defaults to out_dir
  bool overwrite = false;

  ModelConfig model{.vocab_size = 0, .embed_dim = 32, .n_layers = 2,
                    .n_heads = 2, .max_seq_len = 64, .seed = 0};
  TrainConfig train;
  DecodeConfig decode;
  SynthSizes synth;

  // training extras
  bool frozen_core = false;
  std::string init_checkpoint;
  int auto_label_ngram = 0;  // repetition auto-labels (0 = off)
  bool auto_label_weighted = false;
  std::string auto_label_from;   // baseline checkpoint generating the labels
  int auto_label_samples = 2;    // sampled generations per context
  int auto_label_top_k = 6;      // sampling pool while generating label data

  // decode/eval extras
  std::string guide_checkpoint;
  std::string eval_checkpoint;

  // bench
  int bench_repetitions = 3;
  int bench_prompts = 20;
  std::vector<std::string> bench_strategies = {"baseline", "director", "reranker",
                                               "fudge", "pacer"};

  // sweep grids
  std::vector<double> sweep_gamma_train = {0.2};
  std::vector<double> sweep_gamma_infer = {0.0, 1.0, 5.0};
  std::vector<double> sweep_delta = {0.0};

  std::string resolved_data_dir() const { return data_dir.empty() ? out_dir : data_dir; }
};

// ---- config file ----------------------------------------------------------------
// Flat `key = value` lines with dotted sections, '#' comments. Unknown keys are
// config errors. Flags override file keys via apply_override.

ExperimentConfig parse_config_map(const std::map<std::string, std::string>& kv);
ExperimentConfig load_config_file(const std::string& path);
void apply_override(ExperimentConfig& config, const std::string& key,
                    const std::string& value);

// ---- subcommand bodies ------------------------------------------------------------

/// Writes vocab.txt + the corpus TSVs for a synthetic task into out_dir.
std::vector<std::string> cmd_synth(const ExperimentConfig& config);

struct TrainOutcome {
  std::string best_checkpoint;
  std::string last_checkpoint;
  std::string history_csv;
  int64_t steps_run = 0;
  double best_metric = 0.0;
};

TrainOutcome cmd_train(const ExperimentConfig& config, bool resume = false);

/// Decodes every prompt in prompts_file (TSV records; context column is the
/// prompt) with the configured strategy and writes a generations file.
std::string cmd_generate(const ExperimentConfig& config, const std::string& checkpoint,
                         const std::string& prompts_file, const std::string& out_file);

/// Scores a generations file against reference records; writes metrics.csv.
MetricsReport cmd_eval(const ExperimentConfig& config, const std::string& generations_file,
                       const std::string& references_file, const std::string& out_file);

std::string cmd_bench(const ExperimentConfig& config, const std::string& checkpoint,
                      const std::string& out_file);

std::string cmd_sweep(const ExperimentConfig& config, const std::string& out_file);

/// CLI entry: `director <synth|train|generate|eval|bench|sweep> ...`.
/// Returns the process exit code (0 ok, 2 config error, 3 runtime error).
int run_cli(int argc, const char* const* argv);

// shared helpers (also used by the acceptance suite)
std::vector<LabeledSequence> pack_lm_records(const std::vector<CorpusRecord>& records,
                                             const Vocabulary& vocab, int64_t max_seq_len);
std::vector<LabeledSequence> pack_labeled_records(const std::vector<CorpusRecord>& records,
                                                  const Vocabulary& vocab,
                                                  int64_t max_seq_len);

/// Samples generations from the baseline on each record's context and
/// auto-labels their repetitions: the DIRECTOR classifier data for the
/// repetition task. Sampling (rather than greedy decoding) keeps the label
/// balance away from the all-negative wall a looping baseline would produce.
std::vector<LabeledSequence> auto_label_from_baseline(
    const DirectorModel& baseline, const std::vector<CorpusRecord>& records,
    const Vocabulary& vocab, int max_n, bool weighted, int64_t max_gen_len,
    int samples_per_context, int sample_top_k, uint64_t seed);

}  // namespace director
