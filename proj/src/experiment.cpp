#include "director/experiment.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "director/csv.hpp"
#include "director/rng.hpp"

namespace fs = std::filesystem;

namespace director {

std::string to_string(TaskKind t) {
  switch (t) {
    case TaskKind::safety_synthetic: return "safety_synthetic";
    case TaskKind::repetition: return "repetition";
    case TaskKind::custom_corpus: return "custom_corpus";
  }
  return "?";
}

TaskKind parse_task(const std::string& name) {
  for (TaskKind t : {TaskKind::safety_synthetic, TaskKind::repetition,
                     TaskKind::custom_corpus}) {
    if (to_string(t) == name) return t;
  }
  throw ConfigError("unknown task '" + name + "'");
}

// ---- config parsing ----------------------------------------------------------------

namespace {

int64_t to_i64(const std::string& key, const std::string& value) {
  try {
    size_t used = 0;
    const int64_t v = std::stoll(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected an integer, got '" + value + "'");
  }
}

double to_f64(const std::string& key, const std::string& value) {
  try {
    size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected a number, got '" + value + "'");
  }
}

bool to_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + value + "'");
}

std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : value) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else if (!std::isspace(static_cast<unsigned char>(c))) {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

std::vector<double> to_f64_list(const std::string& key, const std::string& value) {
  std::vector<double> out;
  for (const std::string& item : split_list(value)) out.push_back(to_f64(key, item));
  if (out.empty()) throw ConfigError("config key '" + key + "': empty list");
  return out;
}

std::string trim(const std::string& s) {
  size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

}  // namespace

void apply_override(ExperimentConfig& c, const std::string& key, const std::string& value) {
  if (key == "task") { c.task = parse_task(value); return; }
  if (key == "seed") { c.seed = static_cast<uint64_t>(to_i64(key, value)); return; }
  if (key == "out_dir") { c.out_dir = value; return; }
  if (key == "data_dir") { c.data_dir = value; return; }
  if (key == "overwrite") { c.overwrite = to_bool(key, value); return; }

  if (key == "model.vocab_size") { c.model.vocab_size = to_i64(key, value); return; }
  if (key == "model.embed_dim") { c.model.embed_dim = to_i64(key, value); return; }
  if (key == "model.n_layers") { c.model.n_layers = to_i64(key, value); return; }
  if (key == "model.n_heads") { c.model.n_heads = to_i64(key, value); return; }
  if (key == "model.max_seq_len") { c.model.max_seq_len = to_i64(key, value); return; }

  if (key == "train.gamma_train") { c.train.gamma_train = to_f64(key, value); return; }
  if (key == "train.delta") { c.train.delta = to_f64(key, value); return; }
  if (key == "train.alpha_ul") { c.train.alpha_ul = to_f64(key, value); return; }
  if (key == "train.learning_rate") { c.train.learning_rate = to_f64(key, value); return; }
  if (key == "train.batch_size") { c.train.batch_size = to_i64(key, value); return; }
  if (key == "train.max_steps") { c.train.max_steps = to_i64(key, value); return; }
  if (key == "train.patience") { c.train.patience = to_i64(key, value); return; }
  if (key == "train.eval_every") { c.train.eval_every = to_i64(key, value); return; }
  if (key == "train.validation_metric") {
    if (value == "mean_loss") c.train.validation_metric = ValidationMetric::mean_loss;
    else if (value == "gen_f1") c.train.validation_metric = ValidationMetric::gen_f1;
    else if (value == "class_acc") c.train.validation_metric = ValidationMetric::class_acc;
    else throw ConfigError("config key 'train.validation_metric': unknown value '" + value + "'");
    return;
  }
  if (key == "train.optimizer") {
    if (value == "sgd") c.train.optimizer = OptimKind::sgd;
    else if (value == "adam") c.train.optimizer = OptimKind::adam;
    else if (value == "adamax") c.train.optimizer = OptimKind::adamax;
    else throw ConfigError("config key 'train.optimizer': unknown value '" + value + "'");
    return;
  }
  if (key == "train.frozen_core") { c.frozen_core = to_bool(key, value); return; }
  if (key == "train.init_checkpoint") { c.init_checkpoint = value; return; }
  if (key == "train.auto_label_ngram") {
    c.auto_label_ngram = static_cast<int>(to_i64(key, value));
    return;
  }
  if (key == "train.auto_label_weighted") { c.auto_label_weighted = to_bool(key, value); return; }
  if (key == "train.auto_label_from") { c.auto_label_from = value; return; }
  if (key == "train.auto_label_samples") {
    c.auto_label_samples = static_cast<int>(to_i64(key, value));
    return;
  }
  if (key == "train.auto_label_top_k") {
    c.auto_label_top_k = static_cast<int>(to_i64(key, value));
    return;
  }

  if (key == "decode.strategy") {
    try { c.decode.strategy = parse_strategy(value); }
    catch (const std::invalid_argument& e) { throw ConfigError(e.what()); }
    return;
  }
  if (key == "decode.mode") {
    try { c.decode.mode = parse_decode_mode(value); }
    catch (const std::invalid_argument& e) { throw ConfigError(e.what()); }
    return;
  }
  if (key == "decode.gamma_infer") { c.decode.gamma_infer = to_f64(key, value); return; }
  if (key == "decode.beam_width") { c.decode.beam_width = to_i64(key, value); return; }
  if (key == "decode.top_k") { c.decode.top_k = to_i64(key, value); return; }
  if (key == "decode.pacer_m") { c.decode.pacer_m = to_i64(key, value); return; }
  if (key == "decode.block_n") { c.decode.block_n = to_i64(key, value); return; }
  if (key == "decode.max_len") { c.decode.max_len = to_i64(key, value); return; }
  if (key == "decode.min_len") { c.decode.min_len = to_i64(key, value); return; }
  if (key == "decode.guide_checkpoint") { c.guide_checkpoint = value; return; }

  if (key == "eval.checkpoint") { c.eval_checkpoint = value; return; }

  if (key == "synth.n_lm") { c.synth.n_lm = static_cast<int>(to_i64(key, value)); return; }
  if (key == "synth.n_class") { c.synth.n_class = static_cast<int>(to_i64(key, value)); return; }
  if (key == "synth.n_valid") { c.synth.n_valid = static_cast<int>(to_i64(key, value)); return; }
  if (key == "synth.n_eval") { c.synth.n_eval = static_cast<int>(to_i64(key, value)); return; }
  if (key == "synth.response_len") { c.synth.response_len = static_cast<int>(to_i64(key, value)); return; }
  if (key == "synth.context_len") { c.synth.context_len = static_cast<int>(to_i64(key, value)); return; }

  if (key == "bench.repetitions") { c.bench_repetitions = static_cast<int>(to_i64(key, value)); return; }
  if (key == "bench.prompts") { c.bench_prompts = static_cast<int>(to_i64(key, value)); return; }
  if (key == "bench.strategies") {
    c.bench_strategies = split_list(value);
    if (c.bench_strategies.empty()) throw ConfigError("bench.strategies: empty list");
    for (const std::string& s : c.bench_strategies) {
      try { parse_strategy(s); }
      catch (const std::invalid_argument& e) { throw ConfigError(e.what()); }
    }
    return;
  }

  if (key == "sweep.gamma_train") { c.sweep_gamma_train = to_f64_list(key, value); return; }
  if (key == "sweep.gamma_infer") { c.sweep_gamma_infer = to_f64_list(key, value); return; }
  if (key == "sweep.delta") { c.sweep_delta = to_f64_list(key, value); return; }

  throw ConfigError("unknown config key '" + key + "'");
}

ExperimentConfig parse_config_map(const std::map<std::string, std::string>& kv) {
  ExperimentConfig config;
  for (const auto& [key, value] : kv) apply_override(config, key, value);
  return config;
}

ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  ExperimentConfig config;
  std::string line;
  int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const std::string stripped = trim(line);
    if (stripped.empty()) continue;
    const size_t eq = stripped.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path + ":" + std::to_string(line_no) +
                        ": expected 'key = value'");
    const std::string key = trim(stripped.substr(0, eq));
    const std::string value = trim(stripped.substr(eq + 1));
    if (key.empty()) throw ConfigError(path + ":" + std::to_string(line_no) + ": empty key");
    apply_override(config, key, value);
  }
  return config;
}

// ---- shared data plumbing -----------------------------------------------------------

std::vector<LabeledSequence> pack_lm_records(const std::vector<CorpusRecord>& records,
                                             const Vocabulary& vocab, int64_t max_seq_len) {
  std::vector<LabeledSequence> out;
  out.reserve(records.size());
  for (const CorpusRecord& r : records) out.push_back(pack_record(r, vocab, max_seq_len));
  return out;
}

std::vector<LabeledSequence> pack_labeled_records(const std::vector<CorpusRecord>& records,
                                                  const Vocabulary& vocab,
                                                  int64_t max_seq_len) {
  std::vector<LabeledSequence> out;
  for (const CorpusRecord& r : records) {
    if (!r.seq_label.has_value()) continue;
    out.push_back(propagate_labels(r, vocab, max_seq_len));
  }
  return out;
}

std::vector<LabeledSequence> auto_label_from_baseline(
    const DirectorModel& baseline, const std::vector<CorpusRecord>& records,
    const Vocabulary& vocab, int max_n, bool weighted, int64_t max_gen_len,
    int samples_per_context, int sample_top_k, uint64_t seed) {
  if (samples_per_context < 1)
    throw std::invalid_argument("auto_label_from_baseline: need at least one sample");
  std::vector<LabeledSequence> out;
  DecodeConfig cfg{.strategy = Strategy::baseline, .mode = DecodeMode::topk_sample,
                   .top_k = sample_top_k, .max_len = max_gen_len};
  size_t index = 0;
  for (const CorpusRecord& r : records) {
    const std::vector<int> ctx = tokenize(r.context, vocab);
    for (int rep = 0; rep < samples_per_context; ++rep) {
      cfg.seed = substream_seed(seed, "auto-label") + index++;
      GenerationResult gen = decode(baseline, nullptr, ctx, cfg);
      if (gen.tokens.empty()) continue;  // degenerate immediate-EOS generation
      out.push_back(label_repetitions(ctx, gen.tokens, max_n, weighted,
                                      baseline.config().max_seq_len));
    }
  }
  if (out.empty())
    throw std::runtime_error("auto_label_from_baseline: every generation was empty");
  return out;
}

// ---- cmd_synth -----------------------------------------------------------------------

namespace {

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create directory " + dir + ": " + ec.message());
}

void refuse_overwrite(const std::vector<std::string>& paths, bool overwrite) {
  if (overwrite) return;
  for (const std::string& p : paths) {
    if (fs::exists(p))
      throw ConfigError("refusing to overwrite existing file " + p +
                        " (set overwrite = true)");
  }
}

}  // namespace

std::vector<std::string> cmd_synth(const ExperimentConfig& config) {
  if (config.task == TaskKind::custom_corpus)
    throw ConfigError("cmd_synth: task custom_corpus has nothing to synthesize");

  const SyntheticTask task =
      config.task == TaskKind::safety_synthetic
          ? make_synthetic_safety_task(config.seed, config.synth)
          : make_synthetic_repetition_task(config.seed, config.synth);

  ensure_dir(config.out_dir);
  const std::string base = config.out_dir + "/";
  std::vector<std::string> written = {base + "vocab.txt", base + "train_lm.tsv",
                                      base + "valid.tsv", base + "eval_prompts.tsv"};
  if (!task.d_class.empty()) written.insert(written.begin() + 2, base + "train_class.tsv");
  refuse_overwrite(written, config.overwrite);

  task.vocab.save(base + "vocab.txt");
  write_corpus(base + "train_lm.tsv", task.d_lm);
  if (!task.d_class.empty()) write_corpus(base + "train_class.tsv", task.d_class);
  write_corpus(base + "valid.tsv", task.valid);
  write_corpus(base + "eval_prompts.tsv", task.eval_prompts);
  return written;
}

// ---- cmd_train -----------------------------------------------------------------------

namespace {

struct LoadedData {
  Vocabulary vocab;
  std::vector<CorpusRecord> train_lm, train_class, valid;
};

LoadedData load_training_data(const ExperimentConfig& config) {
  const std::string base = config.resolved_data_dir() + "/";
  if (!fs::exists(base + "vocab.txt"))
    throw ConfigError("missing vocabulary file " + base + "vocab.txt (run synth first?)");
  LoadedData data{.vocab = Vocabulary::load(base + "vocab.txt"),
                  .train_lm = {}, .train_class = {}, .valid = {}};
  if (!fs::exists(base + "train_lm.tsv"))
    throw ConfigError("missing corpus file " + base + "train_lm.tsv");
  data.train_lm = read_corpus(base + "train_lm.tsv");
  if (fs::exists(base + "train_class.tsv"))
    data.train_class = read_corpus(base + "train_class.tsv");
  if (fs::exists(base + "valid.tsv")) data.valid = read_corpus(base + "valid.tsv");
  return data;
}

ModelConfig resolve_model_config(const ExperimentConfig& config, const Vocabulary& vocab) {
  ModelConfig mc = config.model;
  if (mc.vocab_size == 0) mc.vocab_size = vocab.size();
  if (mc.vocab_size != vocab.size())
    throw ConfigError("model.vocab_size " + std::to_string(mc.vocab_size) +
                      " does not match vocabulary of size " + std::to_string(vocab.size()));
  mc.seed = substream_seed(config.seed, "init");
  try {
    mc.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return mc;
}

// greedy F1 of the current model on a slice of validation prompts
double validation_gen_f1(const DirectorModel& model, const ExperimentConfig& config,
                         const std::vector<CorpusRecord>& valid, const Vocabulary& vocab) {
  DecodeConfig cfg = config.decode;
  cfg.mode = DecodeMode::greedy;
  cfg.record_steps = false;
  if (cfg.strategy != Strategy::baseline && cfg.strategy != Strategy::director)
    cfg.strategy = Strategy::director;  // guided strategies have no guide here
  double total = 0.0;
  int64_t count = 0;
  const size_t limit = std::min<size_t>(valid.size(), 16);
  for (size_t i = 0; i < limit; ++i) {
    const std::vector<int> ref = tokenize(valid[i].response, vocab);
    if (ref.empty()) continue;
    GenerationResult r = decode(model, nullptr, tokenize(valid[i].context, vocab), cfg);
    total += r.tokens.empty() ? 0.0 : unigram_f1(r.tokens, ref);
    ++count;
  }
  if (count == 0) throw std::runtime_error("gen_f1 validation: no usable prompts");
  return total / static_cast<double>(count);
}

double validation_class_acc(const DirectorModel& model,
                            std::span<const LabeledSequence> valid_labeled) {
  // own-head accuracy at the sigmoid midpoint
  return eval_classifier_accuracy(model, valid_labeled, std::log(0.5));
}

}  // namespace

TrainOutcome cmd_train(const ExperimentConfig& config, bool resume) {
  try {
    config.train.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  LoadedData data = load_training_data(config);
  const ModelConfig mc = resolve_model_config(config, data.vocab);

  // pack everything up front so corpus/vocab problems surface before training
  std::vector<LabeledSequence> d_lm, d_class, valid_seqs;
  try {
    d_lm = pack_lm_records(data.train_lm, data.vocab, mc.max_seq_len);
    d_class = pack_labeled_records(data.train_class, data.vocab, mc.max_seq_len);
    valid_seqs.clear();
    for (const CorpusRecord& r : data.valid) {
      valid_seqs.push_back(r.seq_label.has_value()
                               ? propagate_labels(r, data.vocab, mc.max_seq_len)
                               : pack_record(r, data.vocab, mc.max_seq_len));
    }
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("corpus does not fit the model: ") + e.what());
  }

  DirectorModel model;
  if (!config.init_checkpoint.empty()) {
    model = load_checkpoint_file(config.init_checkpoint);
    if (model.config().vocab_size != data.vocab.size())
      throw ConfigError("init checkpoint vocabulary size mismatch");
  } else {
    model = DirectorModel::init(mc);
  }

  // repetition-style auto labels replace file-based classifier data
  if (config.auto_label_ngram > 0) {
    if (config.auto_label_from.empty())
      throw ConfigError("train.auto_label_ngram needs train.auto_label_from (baseline checkpoint)");
    DirectorModel baseline = load_checkpoint_file(config.auto_label_from);
    d_class = auto_label_from_baseline(baseline, data.train_lm, data.vocab,
                                       config.auto_label_ngram, config.auto_label_weighted,
                                       config.decode.max_len, config.auto_label_samples,
                                       config.auto_label_top_k, config.seed);
  }

  if (config.frozen_core) model.set_frozen_core(true);

  TrainConfig tc = config.train;
  tc.seed = substream_seed(config.seed, "train");

  ensure_dir(config.out_dir);
  const std::string base = config.out_dir + "/";
  const std::string periodic_path = base + "periodic.ckpt";
  const std::string state_path = base + "train_state.txt";

  if (resume && fs::exists(periodic_path) && fs::exists(state_path)) {
    std::ifstream state(state_path);
    int64_t done = 0;
    state >> done;
    if (!state) throw std::runtime_error("unreadable training state file " + state_path);
    model = load_checkpoint_file(periodic_path);
    tc.max_steps = std::max<int64_t>(tc.max_steps - done, 1);
  }

  ValidationFn metric_fn = nullptr;
  std::vector<LabeledSequence> valid_labeled;
  for (const LabeledSequence& s : valid_seqs) {
    if (std::any_of(s.labels.begin(), s.labels.end(),
                    [](TokenLabel l) { return l != TokenLabel::unlabeled; }))
      valid_labeled.push_back(s);
  }
  if (config.train.validation_metric == ValidationMetric::gen_f1) {
    metric_fn = [&](const DirectorModel& m) {
      return -validation_gen_f1(m, config, data.valid, data.vocab);
    };
  } else if (config.train.validation_metric == ValidationMetric::class_acc) {
    if (valid_labeled.empty())
      throw ConfigError("validation_metric class_acc needs labeled validation records");
    metric_fn = [&](const DirectorModel& m) {
      return -validation_class_acc(m, valid_labeled);
    };
  }

  CheckpointFn on_checkpoint = [&](const DirectorModel& m, int64_t step) {
    save_checkpoint_file(m, periodic_path);
    std::ofstream state(state_path, std::ios::trunc);
    state << step << "\n";
  };

  TrainResult result =
      train_loop(std::move(model), d_lm, d_class, valid_seqs, tc, metric_fn, on_checkpoint);

  TrainOutcome outcome{.best_checkpoint = base + "best.ckpt",
                       .last_checkpoint = base + "last.ckpt",
                       .history_csv = base + "history.csv",
                       .steps_run = result.steps_run,
                       .best_metric = result.best_metric};
  save_checkpoint_file(result.best, outcome.best_checkpoint);
  save_checkpoint_file(result.last, outcome.last_checkpoint);
  write_history_csv(outcome.history_csv, result.history);
  return outcome;
}

// ---- cmd_generate ---------------------------------------------------------------------

namespace {

Vocabulary load_vocab(const ExperimentConfig& config) {
  const std::string path = config.resolved_data_dir() + "/vocab.txt";
  if (!fs::exists(path)) throw ConfigError("missing vocabulary file " + path);
  return Vocabulary::load(path);
}

std::optional<DirectorModel> load_guide_if_needed(const ExperimentConfig& config) {
  const Strategy s = config.decode.strategy;
  const bool needs = s == Strategy::fudge || s == Strategy::pacer || s == Strategy::reranker;
  if (!needs) return std::nullopt;
  if (config.guide_checkpoint.empty())
    throw ConfigError("strategy " + to_string(s) +
                      " requires decode.guide_checkpoint to be configured");
  return load_checkpoint_file(config.guide_checkpoint);
}

}  // namespace

std::string cmd_generate(const ExperimentConfig& config, const std::string& checkpoint,
                         const std::string& prompts_file, const std::string& out_file) {
  if (!fs::exists(prompts_file)) throw ConfigError("missing prompts file " + prompts_file);
  const Vocabulary vocab = load_vocab(config);
  const DirectorModel model = load_checkpoint_file(checkpoint);
  if (model.config().vocab_size != vocab.size())
    throw ConfigError("checkpoint vocabulary size mismatch");
  std::optional<DirectorModel> guide = load_guide_if_needed(config);
  try {
    config.decode.validate(model.config().vocab_size);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }

  const std::vector<CorpusRecord> prompts = read_corpus(prompts_file);
  std::vector<GenerationResult> results;
  results.reserve(prompts.size());
  for (size_t i = 0; i < prompts.size(); ++i) {
    DecodeConfig cfg = config.decode;
    cfg.seed = substream_seed(config.seed, "decode") + i;
    results.push_back(decode(model, guide ? &*guide : nullptr,
                             tokenize(prompts[i].context, vocab), cfg, &vocab));
  }
  const fs::path parent = fs::path(out_file).parent_path();
  if (!parent.empty()) ensure_dir(parent.string());
  write_generations(out_file, results);
  return out_file;
}

// ---- cmd_eval -------------------------------------------------------------------------

namespace {

LabeledSequence packed_from_generation(const GenerationResult& r) {
  LabeledSequence seq;
  seq.tokens = r.prompt;
  seq.tokens.insert(seq.tokens.end(), r.tokens.begin(), r.tokens.end());
  seq.tokens.push_back(Vocabulary::kEos);
  seq.labels.assign(seq.tokens.size(), TokenLabel::unlabeled);
  seq.weights.assign(seq.tokens.size(), 1.0);
  seq.lm_mask.assign(seq.tokens.size(), 0);
  for (size_t i = r.prompt.size(); i < seq.tokens.size(); ++i) seq.lm_mask[i] = 1;
  return seq;
}

}  // namespace

MetricsReport cmd_eval(const ExperimentConfig& config, const std::string& generations_file,
                       const std::string& references_file, const std::string& out_file) {
  const Vocabulary vocab = load_vocab(config);
  const std::vector<GenerationResult> gens = read_generations(generations_file);
  const std::vector<CorpusRecord> refs = read_corpus(references_file);
  if (gens.empty()) throw std::runtime_error("generations file is empty");
  if (gens.size() != refs.size())
    throw std::runtime_error("generations (" + std::to_string(gens.size()) +
                             ") and references (" + std::to_string(refs.size()) +
                             ") differ in length");

  MetricsReport report;
  const std::vector<int> bad_ids = vocab.ids_with_prefix("bad");
  double f1_total = 0.0, score5_total = 0.0, len_total = 0.0, sec_total = 0.0;
  int64_t bad_sequences = 0;
  std::map<int, double> repeat_totals;
  for (size_t i = 0; i < gens.size(); ++i) {
    const GenerationResult& g = gens[i];
    const std::vector<int> ref = tokenize(refs[i].response, vocab);
    if (!g.tokens.empty() && !ref.empty()) f1_total += unigram_f1(g.tokens, ref);
    if (!g.tokens.empty()) {
      auto counts = repeat_counts(g.prompt, g.tokens);
      for (const auto& [n, c] : counts) repeat_totals[n] += static_cast<double>(c);
      score5_total += repeat_score_5(counts);
      bad_sequences += std::any_of(g.tokens.begin(), g.tokens.end(), [&](int t) {
        return std::find(bad_ids.begin(), bad_ids.end(), t) != bad_ids.end();
      });
    }
    len_total += static_cast<double>(g.tokens.size());
    sec_total += g.seconds;
  }
  const double n = static_cast<double>(gens.size());
  report.f1 = f1_total / n;
  for (int k = 1; k <= 5; ++k) report.repeat_at_n[k] = repeat_totals[k] / n;
  report.repeat_score_5 = score5_total / n;
  report.bad_token_rate = static_cast<double>(bad_sequences) / n;
  report.avg_len = len_total / n;
  report.sec_per_ex = sec_total / n;

  if (!config.eval_checkpoint.empty()) {
    const DirectorModel eval_model = load_checkpoint_file(config.eval_checkpoint);
    const std::string valid_path = config.resolved_data_dir() + "/valid.tsv";
    if (!fs::exists(valid_path))
      throw ConfigError("eval classifier needs a labeled calibration split at " + valid_path);
    const auto calibration =
        pack_labeled_records(read_corpus(valid_path), vocab, eval_model.config().max_seq_len);
    if (calibration.empty())
      throw ConfigError("calibration split has no labeled records: " + valid_path);
    const double threshold = choose_threshold(eval_model, calibration);
    std::vector<LabeledSequence> packed;
    for (const GenerationResult& g : gens) {
      if (!g.tokens.empty()) packed.push_back(packed_from_generation(g));
    }
    report.class_acc =
        packed.empty() ? 0.0 : classified_positive_rate(eval_model, packed, threshold);
  }

  if (!out_file.empty()) write_metrics_csv(out_file, report);
  return report;
}

// ---- cmd_bench ------------------------------------------------------------------------

std::string cmd_bench(const ExperimentConfig& config, const std::string& checkpoint,
                      const std::string& out_file) {
  const Vocabulary vocab = load_vocab(config);
  const DirectorModel model = load_checkpoint_file(checkpoint);
  std::optional<DirectorModel> guide;
  const bool any_guided = std::any_of(
      config.bench_strategies.begin(), config.bench_strategies.end(),
      [](const std::string& s) { return s == "fudge" || s == "pacer" || s == "reranker"; });
  if (any_guided) {
    if (config.guide_checkpoint.empty())
      throw ConfigError("bench includes guided strategies; set decode.guide_checkpoint");
    guide = load_checkpoint_file(config.guide_checkpoint);
  }

  const std::string prompts_path = config.resolved_data_dir() + "/eval_prompts.tsv";
  if (!fs::exists(prompts_path)) throw ConfigError("missing prompts file " + prompts_path);
  std::vector<std::vector<int>> prompts;
  for (const CorpusRecord& r : read_corpus(prompts_path)) {
    prompts.push_back(tokenize(r.context, vocab));
    if (static_cast<int>(prompts.size()) == config.bench_prompts) break;
  }

  std::vector<BenchStrategy> strategies;
  for (const std::string& name : config.bench_strategies) {
    BenchStrategy s;
    s.name = name;
    s.model = &model;
    DecodeConfig cfg = config.decode;
    cfg.strategy = parse_strategy(name);
    if (cfg.strategy == Strategy::pacer || cfg.strategy == Strategy::reranker)
      cfg.mode = DecodeMode::beam;
    const bool needs_guide = cfg.strategy == Strategy::fudge ||
                             cfg.strategy == Strategy::pacer ||
                             cfg.strategy == Strategy::reranker;
    s.guide = needs_guide ? &*guide : nullptr;
    s.config = cfg;
    strategies.push_back(s);
  }

  auto results = latency_bench(strategies, prompts, config.bench_repetitions);
  write_bench_csv(out_file, results);
  return out_file;
}

// ---- cmd_sweep ------------------------------------------------------------------------

std::string cmd_sweep(const ExperimentConfig& config, const std::string& out_file) {
  if (config.eval_checkpoint.empty())
    throw ConfigError("sweep needs eval.checkpoint (an independently trained classifier)");
  const Vocabulary vocab = load_vocab(config);
  const DirectorModel eval_model = load_checkpoint_file(config.eval_checkpoint);

  const std::string base = config.resolved_data_dir() + "/";
  const auto prompts = read_corpus(base + "eval_prompts.tsv");
  const auto calibration =
      pack_labeled_records(read_corpus(base + "valid.tsv"), vocab,
                           eval_model.config().max_seq_len);
  if (calibration.empty()) throw ConfigError("sweep needs labeled records in valid.tsv");
  const double threshold = choose_threshold(eval_model, calibration);

  auto evaluate = [&](const DirectorModel& m, double gamma_infer, Strategy strategy) {
    DecodeConfig cfg = config.decode;
    cfg.strategy = strategy;
    cfg.gamma_infer = gamma_infer;
    double f1_total = 0.0, sec_total = 0.0;
    std::vector<LabeledSequence> packed;
    for (size_t i = 0; i < prompts.size(); ++i) {
      cfg.seed = substream_seed(config.seed, "sweep-decode") + i;
      GenerationResult g = decode(m, nullptr, tokenize(prompts[i].context, vocab), cfg);
      const std::vector<int> ref = tokenize(prompts[i].response, vocab);
      if (!g.tokens.empty() && !ref.empty()) f1_total += unigram_f1(g.tokens, ref);
      if (!g.tokens.empty()) packed.push_back(packed_from_generation(g));
      sec_total += g.seconds;
    }
    const double n = static_cast<double>(prompts.size());
    const double acc =
        packed.empty() ? 0.0 : classified_positive_rate(eval_model, packed, threshold);
    return std::tuple<double, double, double>(acc, f1_total / n, sec_total / n);
  };

  std::vector<ScatterRow> rows;

  // the baseline point: pure LM training, plain decoding
  ExperimentConfig base_cfg = config;
  base_cfg.data_dir = config.resolved_data_dir();
  base_cfg.train.gamma_train = 0.0;
  base_cfg.train.delta = 0.0;
  base_cfg.out_dir = config.out_dir + "/sweep_baseline";
  TrainOutcome base_out = cmd_train(base_cfg);
  {
    const DirectorModel m = load_checkpoint_file(base_out.best_checkpoint);
    auto [acc, f1, sec] = evaluate(m, 0.0, Strategy::baseline);
    rows.push_back(ScatterRow{.strategy = "baseline", .gamma_train = 0.0,
                              .gamma_infer = 0.0, .delta = 0.0, .class_acc = acc,
                              .gen_f1 = f1, .sec_per_ex = sec});
  }

  for (double gt : config.sweep_gamma_train) {
    for (double dl : config.sweep_delta) {
      ExperimentConfig point = config;
      point.data_dir = config.resolved_data_dir();
      point.train.gamma_train = gt;
      point.train.delta = dl;
      std::ostringstream dir;
      dir << config.out_dir << "/sweep_gt" << gt << "_d" << dl;
      point.out_dir = dir.str();
      TrainOutcome out = cmd_train(point);
      const DirectorModel m = load_checkpoint_file(out.best_checkpoint);
      for (double gi : config.sweep_gamma_infer) {
        auto [acc, f1, sec] = evaluate(m, gi, Strategy::director);
        rows.push_back(ScatterRow{.strategy = "director", .gamma_train = gt,
                                  .gamma_infer = gi, .delta = dl, .class_acc = acc,
                                  .gen_f1 = f1, .sec_per_ex = sec});
      }
    }
  }

  write_scatter_csv(out_file, rows);
  return out_file;
}

}  // namespace director
