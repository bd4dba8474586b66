#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "director/csv.hpp"
#include "director/experiment.hpp"

using namespace director;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) {
    path = fs::temp_directory_path() / name;
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
};

int run(std::vector<std::string> args) {
  std::vector<const char*> argv = {"director"};
  for (const std::string& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

std::string small_synth_config(const std::string& out_dir, const std::string& extra = "") {
  return "task = safety_synthetic\n"
         "seed = 5\n"
         "out_dir = " + out_dir + "\n"
         "model.embed_dim = 16\n"
         "model.n_layers = 1\n"
         "model.n_heads = 2\n"
         "model.max_seq_len = 32\n"
         "synth.n_lm = 60\n"
         "synth.n_class = 40\n"
         "synth.n_valid = 16\n"
         "synth.n_eval = 8\n"
         "synth.response_len = 6\n"
         "synth.context_len = 2\n"
         "train.max_steps = 20\n"
         "train.eval_every = 10\n"
         "train.batch_size = 4\n"
         "train.learning_rate = 0.005\n"
         "decode.max_len = 8\n" + extra;
}

std::string write_config(const TempDir& dir, const std::string& body) {
  static int counter = 0;
  const std::string path =
      (dir.path / ("config" + std::to_string(counter++) + ".txt")).string();
  std::ofstream out(path);
  out << body;
  return path;
}

std::vector<unsigned char> file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("config file parsing, overrides and validation") {
  TempDir dir("director_cli_cfg");
  const std::string path = write_config(dir, small_synth_config(dir.str() + "/run",
                                                                "train.gamma_train = 0.3\n"
                                                                "# a comment\n"
                                                                "decode.gamma_infer = 5\n"));
  ExperimentConfig config = load_config_file(path);
  CHECK(config.task == TaskKind::safety_synthetic);
  CHECK(config.train.gamma_train == 0.3);
  CHECK(config.decode.gamma_infer == 5.0);
  CHECK(config.synth.n_lm == 60);

  apply_override(config, "train.gamma_train", "0.7");
  CHECK(config.train.gamma_train == 0.7);

  CHECK_THROWS_AS(apply_override(config, "no.such.key", "1"), ConfigError);
  CHECK_THROWS_AS(apply_override(config, "train.batch_size", "many"), ConfigError);
  CHECK_THROWS_AS(apply_override(config, "task", "weird"), ConfigError);

  // sweep lists parse
  apply_override(config, "sweep.gamma_infer", "0, 1, 5");
  CHECK(config.sweep_gamma_infer == std::vector<double>{0.0, 1.0, 5.0});
}

TEST_CASE("unknown config keys and bad usage exit with code 2") {
  TempDir dir("director_cli_exit2");
  const std::string path = write_config(dir, "definitely.unknown = 1\n");
  CHECK(run({"-c", path, "synth"}) == 2);
  CHECK(run({"nonsense_subcommand"}) == 2);
  CHECK(run({"synth", "-c", "/nonexistent/config.txt"}) == 2);
}

TEST_CASE("synth writes the corpus files once and refuses overwrites") {
  TempDir dir("director_cli_synth");
  const std::string out = dir.str() + "/data";
  const std::string path = write_config(dir, small_synth_config(out));

  REQUIRE(run({"-c", path, "synth"}) == 0);
  for (const char* name : {"vocab.txt", "train_lm.tsv", "train_class.tsv", "valid.tsv",
                           "eval_prompts.tsv"}) {
    CHECK(fs::exists(fs::path(out) / name));
  }

  // same seed, fresh directory: byte-identical artifacts
  const std::string out2 = dir.str() + "/data2";
  const std::string path2 = write_config(dir, small_synth_config(out2));
  REQUIRE(run({"-c", path2, "synth"}) == 0);
  for (const char* name : {"train_lm.tsv", "train_class.tsv", "eval_prompts.tsv"}) {
    CHECK(file_bytes((fs::path(out) / name).string()) ==
          file_bytes((fs::path(out2) / name).string()));
  }

  CHECK(run({"-c", path, "synth"}) == 2);  // refuses to overwrite
  CHECK(run({"-c", path, "--set", "overwrite=true", "synth"}) == 0);
}

TEST_CASE("train -> generate -> eval round trip with exit codes") {
  TempDir dir("director_cli_e2e");
  const std::string out = dir.str() + "/run";
  const std::string path = write_config(dir, small_synth_config(out));

  REQUIRE(run({"-c", path, "synth"}) == 0);
  REQUIRE(run({"-c", path, "train"}) == 0);
  CHECK(fs::exists(fs::path(out) / "best.ckpt"));
  CHECK(fs::exists(fs::path(out) / "last.ckpt"));
  CHECK(fs::exists(fs::path(out) / "history.csv"));

  const std::string gens = out + "/gens.tsv";
  REQUIRE(run({"-c", path, "generate", "--checkpoint", out + "/best.ckpt", "--out",
               gens}) == 0);
  CHECK(fs::exists(gens));

  const std::string metrics = out + "/metrics.csv";
  REQUIRE(run({"-c", path, "eval", "--generations", gens, "--references",
               out + "/eval_prompts.tsv", "--out", metrics}) == 0);
  CHECK(fs::exists(metrics));

  // eval on generations whose tokens match the references exactly gives F1 = 1
  // (construct by "generating" the references themselves)
  {
    Vocabulary vocab = Vocabulary::load(out + "/vocab.txt");
    auto refs = read_corpus(out + "/eval_prompts.tsv");
    std::vector<GenerationResult> fake;
    for (const CorpusRecord& r : refs) {
      GenerationResult g;
      g.prompt = pack_prompt(tokenize(r.context, vocab), 32);
      g.tokens = tokenize(r.response, vocab);
      g.text = r.response;
      g.strategy = "baseline";
      g.seconds = 0.001;
      fake.push_back(g);
    }
    write_generations(out + "/fake.tsv", fake);
    ExperimentConfig config = load_config_file(path);
    MetricsReport report = cmd_eval(config, out + "/fake.tsv",
                                    out + "/eval_prompts.tsv", "");
    CHECK(report.f1 == doctest::Approx(1.0).epsilon(1e-12));
  }

  // malformed generations file is a runtime error (exit 3) with a line number
  {
    std::ofstream bad(out + "/bad.tsv");
    bad << "not a record\n";
  }
  CHECK(run({"-c", path, "eval", "--generations", out + "/bad.tsv", "--references",
             out + "/eval_prompts.tsv"}) == 3);

  // guided strategy without a guide checkpoint is a config error
  CHECK(run({"-c", path, "--set", "decode.strategy=fudge", "generate", "--checkpoint",
             out + "/best.ckpt", "--out", out + "/g2.tsv"}) == 2);
}

TEST_CASE("end-to-end determinism: two full runs produce identical bytes") {
  TempDir dir("director_cli_DET");
  auto run_once = [&](const std::string& tag) {
    const std::string out = dir.str() + "/" + tag;
    const std::string path = write_config(dir, small_synth_config(out));
    REQUIRE(run({"-c", path, "synth"}) == 0);
    REQUIRE(run({"-c", path, "train"}) == 0);
    REQUIRE(run({"-c", path, "generate", "--checkpoint", out + "/best.ckpt", "--out",
                 out + "/gens.tsv"}) == 0);
    return out;
  };
  const std::string a = run_once("a");
  const std::string b = run_once("b");
  CHECK(file_bytes(a + "/best.ckpt") == file_bytes(b + "/best.ckpt"));
  CHECK(file_bytes(a + "/last.ckpt") == file_bytes(b + "/last.ckpt"));

  // generations files differ only in the timing column; compare stable fields
  auto ga = read_generations(a + "/gens.tsv");
  auto gb = read_generations(b + "/gens.tsv");
  REQUIRE(ga.size() == gb.size());
  for (size_t i = 0; i < ga.size(); ++i) {
    CHECK(ga[i].tokens == gb[i].tokens);
    CHECK(ga[i].prompt == gb[i].prompt);
    CHECK(ga[i].guide_calls == gb[i].guide_calls);
  }
}

TEST_CASE("gamma-zero director generation matches baseline output byte-for-byte") {
  TempDir dir("director_cli_gid");
  const std::string out = dir.str() + "/run";
  const std::string path = write_config(dir, small_synth_config(out));
  REQUIRE(run({"-c", path, "synth"}) == 0);
  REQUIRE(run({"-c", path, "train"}) == 0);

  REQUIRE(run({"-c", path, "--set", "decode.strategy=baseline", "generate",
               "--checkpoint", out + "/best.ckpt", "--out", out + "/base.tsv"}) == 0);
  REQUIRE(run({"-c", path, "--set", "decode.strategy=director",
               "--set", "decode.gamma_infer=0", "generate", "--checkpoint",
               out + "/best.ckpt", "--out", out + "/dir0.tsv"}) == 0);
  auto a = read_generations(out + "/base.tsv");
  auto b = read_generations(out + "/dir0.tsv");
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i].tokens == b[i].tokens);
}

TEST_CASE("training resumes from the periodic checkpoint") {
  TempDir dir("director_cli_resume");
  const std::string out = dir.str() + "/run";
  const std::string path = write_config(dir, small_synth_config(out));
  REQUIRE(run({"-c", path, "synth"}) == 0);
  REQUIRE(run({"-c", path, "train"}) == 0);
  CHECK(fs::exists(fs::path(out) / "periodic.ckpt"));
  CHECK(fs::exists(fs::path(out) / "train_state.txt"));

  // resume continues (here: from a finished run, it just runs the remainder)
  REQUIRE(run({"-c", path, "--set", "train.max_steps=30", "train", "--resume"}) == 0);
  CHECK(fs::exists(fs::path(out) / "best.ckpt"));
}

TEST_CASE("environment variable overrides the output directory") {
  TempDir dir("director_cli_env");
  const std::string out = dir.str() + "/ignored";
  const std::string env_out = dir.str() + "/from_env";
  const std::string path = write_config(dir, small_synth_config(out));
  setenv("DIRECTOR_OUT_DIR", env_out.c_str(), 1);
  const int code = run({"-c", path, "synth"});
  unsetenv("DIRECTOR_OUT_DIR");
  REQUIRE(code == 0);
  CHECK(fs::exists(fs::path(env_out) / "train_lm.tsv"));
  CHECK(!fs::exists(fs::path(out) / "train_lm.tsv"));
}

TEST_CASE("sweep emits the full cross-product plus a baseline row") {
  TempDir dir("director_cli_sweep");
  const std::string out = dir.str() + "/run";
  const std::string path = write_config(
      dir, small_synth_config(out, "sweep.gamma_train = 0.5\n"
                                   "sweep.gamma_infer = 0, 2, 5\n"
                                   "sweep.delta = 0, 0.5\n"
                                   "train.gamma_train = 1.0\n"));
  REQUIRE(run({"-c", path, "synth"}) == 0);
  REQUIRE(run({"-c", path, "train"}) == 0);  // doubles as the eval classifier here

  const std::string scatter = out + "/scatter.csv";
  REQUIRE(run({"-c", path, "--set", std::string("eval.checkpoint=") + out + "/best.ckpt",
               "sweep", "--out", scatter}) == 0);
  auto rows = read_scatter_csv(scatter);
  // 1 baseline + 1 gamma_train x 2 delta x 3 gamma_infer
  REQUIRE(rows.size() == 1 + 6);
  CHECK(rows[0].strategy == "baseline");
  CHECK(rows[0].gamma_infer == 0.0);
  int director_rows = 0;
  for (const ScatterRow& r : rows)
    if (r.strategy == "director") ++director_rows;
  CHECK(director_rows == 6);
}

TEST_CASE("bench writes one row per configured strategy") {
  TempDir dir("director_cli_bench");
  const std::string out = dir.str() + "/run";
  const std::string path = write_config(
      dir, small_synth_config(out, "bench.strategies = baseline, director, fudge\n"
                                   "bench.prompts = 20\n"
                                   "bench.repetitions = 3\n"
                                   "synth.n_eval = 20\n"
                                   "decode.top_k = 4\n"
                                   "decode.max_len = 4\n"));
  REQUIRE(run({"-c", path, "synth"}) == 0);
  REQUIRE(run({"-c", path, "train"}) == 0);

  const std::string bench = out + "/bench.csv";
  REQUIRE(run({"-c", path, "--set", std::string("decode.guide_checkpoint=") + out + "/best.ckpt",
               "bench", "--checkpoint", out + "/best.ckpt", "--out", bench}) == 0);
  auto rows = read_csv(bench);
  REQUIRE(rows.size() == 4);  // header + 3 strategies
  CHECK(rows[1][0] == "baseline");
  CHECK(rows[2][0] == "director");
  CHECK(rows[3][0] == "fudge");
}

TEST_CASE("validation metrics gen_f1 and class_acc drive early stopping") {
  TempDir dir("director_cli_valmetric");
  const std::string out = dir.str() + "/run";
  const std::string path = write_config(
      dir, small_synth_config(out, "train.validation_metric = gen_f1\n"
                                   "train.gamma_train = 0.5\n"));
  REQUIRE(run({"-c", path, "synth"}) == 0);
  REQUIRE(run({"-c", path, "train"}) == 0);
  CHECK(fs::exists(fs::path(out) / "best.ckpt"));

  REQUIRE(run({"-c", path, "--set", "train.validation_metric=class_acc",
               "--set", "overwrite=true", "train"}) == 0);
  CHECK(fs::exists(fs::path(out) / "best.ckpt"));
}

TEST_CASE("repetition task auto-labels classifier data from a baseline checkpoint") {
  TempDir dir("director_cli_autolabel");
  const std::string out = dir.str() + "/run";
  const std::string body =
      "task = repetition\n"
      "seed = 9\n"
      "out_dir = " + out + "\n"
      "model.embed_dim = 16\n"
      "model.n_layers = 1\n"
      "model.n_heads = 2\n"
      "model.max_seq_len = 32\n"
      "synth.n_lm = 40\n"
      "synth.n_valid = 10\n"
      "synth.n_eval = 5\n"
      "synth.response_len = 8\n"
      "synth.context_len = 2\n"
      "train.max_steps = 16\n"
      "train.eval_every = 8\n"
      "train.batch_size = 4\n"
      "decode.max_len = 10\n";
  const std::string path = write_config(dir, body);
  REQUIRE(run({"-c", path, "synth"}) == 0);
  CHECK(!fs::exists(fs::path(out) / "train_class.tsv"));  // repetition has no labeled corpus
  REQUIRE(run({"-c", path, "train"}) == 0);  // pure LM baseline

  // classifier fine-tune driven by auto labels from the baseline
  const std::string dir_out = dir.str() + "/director";
  REQUIRE(run({"-c", path, "--set", "out_dir=" + dir_out,
               "--set", "data_dir=" + out,
               "--set", "train.gamma_train=1.0",
               "--set", "train.auto_label_ngram=3",
               "--set", "train.auto_label_from=" + out + "/best.ckpt",
               "--set", "train.init_checkpoint=" + out + "/best.ckpt",
               "train"}) == 0);
  CHECK(fs::exists(fs::path(dir_out) / "best.ckpt"));

  // missing baseline checkpoint for auto labels is a config error
  CHECK(run({"-c", path, "--set", "out_dir=" + dir.str() + "/d2",
             "--set", "data_dir=" + out,
             "--set", "train.auto_label_ngram=3", "train"}) == 2);
}

TEST_CASE("auto_label_from_baseline labels only generated tokens") {
  TempDir dir("director_cli_autolabel_fn");
  SynthSizes sizes{.n_lm = 10, .n_class = 2, .n_valid = 2, .n_eval = 2,
                   .response_len = 6, .context_len = 2};
  SyntheticTask task = make_synthetic_repetition_task(3, sizes);
  ModelConfig mc{.vocab_size = task.vocab.size(), .embed_dim = 16, .n_layers = 1,
                 .n_heads = 2, .max_seq_len = 32, .seed = 4};
  DirectorModel model = DirectorModel::init(mc);
  auto labeled = auto_label_from_baseline(model, task.d_lm, task.vocab, 2, true, 8, 2, 4, 7);
  CHECK(labeled.size() >= task.d_lm.size());  // up to two samples per context
  for (const LabeledSequence& seq : labeled) {
    for (size_t i = 0; i < seq.length(); ++i) {
      if (seq.labels[i] == TokenLabel::unlabeled) {
        CHECK(seq.lm_mask[i] * (seq.tokens[i] != Vocabulary::kEos) == 0);
      } else {
        CHECK(seq.lm_mask[i] == 1);
        if (seq.labels[i] == TokenLabel::negative) {
          CHECK(seq.weights[i] >= 0.5);  // weighted mode, max_n = 2
          CHECK(seq.weights[i] <= 1.0);
        }
      }
    }
  }
}
