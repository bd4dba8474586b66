#include "director/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "director/csv.hpp"

namespace director {

double unigram_f1(std::span<const int> generation, std::span<const int> reference) {
  if (generation.empty() || reference.empty())
    throw std::invalid_argument("unigram_f1: empty token list");
  std::map<int, int64_t> gen_counts, ref_counts;
  for (int t : generation) ++gen_counts[t];
  for (int t : reference) ++ref_counts[t];
  int64_t overlap = 0;
  for (const auto& [tok, n] : gen_counts) {
    auto it = ref_counts.find(tok);
    if (it != ref_counts.end()) overlap += std::min(n, it->second);
  }
  if (overlap == 0) return 0.0;
  const double precision = static_cast<double>(overlap) / static_cast<double>(generation.size());
  const double recall = static_cast<double>(overlap) / static_cast<double>(reference.size());
  return 2.0 * precision * recall / (precision + recall);
}

std::map<int, int64_t> repeat_counts(std::span<const int> context,
                                     std::span<const int> generation) {
  if (generation.empty())
    throw std::invalid_argument("repeat_counts: empty generation");
  std::vector<int> stream(context.begin(), context.end());
  stream.insert(stream.end(), generation.begin(), generation.end());
  const int64_t ctx = static_cast<int64_t>(context.size());
  const int64_t total = static_cast<int64_t>(stream.size());

  std::map<int, int64_t> counts;
  for (int n = 1; n <= 5; ++n) {
    int64_t c = 0;
    for (int64_t i = ctx; i + n <= total; ++i) {
      for (int64_t j = 0; j < i; ++j) {
        if (j + n > total) break;
        if (std::equal(stream.begin() + i, stream.begin() + i + n, stream.begin() + j)) {
          ++c;
          break;
        }
      }
    }
    counts[n] = c;
  }
  return counts;
}

double repeat_score_5(const std::map<int, int64_t>& counts) {
  double weighted = 0.0, total = 0.0, unigrams = 0.0;
  for (int n = 1; n <= 5; ++n) {
    auto it = counts.find(n);
    const double c = it == counts.end() ? 0.0 : static_cast<double>(it->second);
    if (c < 0.0) throw std::invalid_argument("repeat_score_5: negative count");
    weighted += std::pow(2.0, n) * c;
    total += c;
    if (n == 1) unigrams = c;
  }
  if (total == 0.0) return 0.0;
  return std::log2(weighted / total) * unigrams;
}

// ---- evaluation classifier -----------------------------------------------------

double sequence_positive_score(const DirectorModel& model, const LabeledSequence& seq) {
  DualHeadOutput out = model.forward(seq.tokens);
  double total = 0.0;
  int64_t count = 0;
  for (size_t i = 0; i < seq.length(); ++i) {
    if (!seq.lm_mask[i] || seq.tokens[i] == Vocabulary::kEos) continue;
    const double p =
        std::max(out.class_probs.at(static_cast<int64_t>(i) - 1, seq.tokens[i]), 1e-300);
    total += std::log(p);
    ++count;
  }
  if (count == 0)
    throw std::invalid_argument("sequence_positive_score: no response tokens");
  return total / static_cast<double>(count);
}

namespace {

struct ScoredLabel {
  double score;
  bool positive;
};

std::vector<ScoredLabel> score_set(const DirectorModel& model,
                                   std::span<const LabeledSequence> set) {
  std::vector<ScoredLabel> out;
  for (const LabeledSequence& seq : set) {
    bool any_pos = false, any_neg = false;
    for (TokenLabel l : seq.labels) {
      any_pos |= l == TokenLabel::positive;
      any_neg |= l == TokenLabel::negative;
    }
    if (!any_pos && !any_neg)
      throw std::invalid_argument("evaluation set contains an unlabeled sequence");
    out.push_back({sequence_positive_score(model, seq), any_pos && !any_neg});
  }
  return out;
}

}  // namespace

double choose_threshold(const DirectorModel& model,
                        std::span<const LabeledSequence> calibration) {
  auto scored = score_set(model, calibration);
  int64_t n_pos = 0, n_neg = 0;
  for (const ScoredLabel& s : scored) (s.positive ? n_pos : n_neg) += 1;
  if (n_pos == 0 || n_neg == 0)
    throw std::invalid_argument("choose_threshold: calibration split is single-class");

  std::sort(scored.begin(), scored.end(),
            [](const ScoredLabel& a, const ScoredLabel& b) { return a.score < b.score; });

  // candidate thresholds between consecutive distinct scores; classify
  // positive when score >= threshold
  double best_threshold = scored.front().score - 1.0;
  double best_balanced = -1.0;
  auto balanced_at = [&](double thr) {
    int64_t tp = 0, tn = 0;
    for (const ScoredLabel& s : scored) {
      if (s.positive && s.score >= thr) ++tp;
      if (!s.positive && s.score < thr) ++tn;
    }
    return 0.5 * (static_cast<double>(tp) / static_cast<double>(n_pos) +
                  static_cast<double>(tn) / static_cast<double>(n_neg));
  };

  std::vector<double> candidates = {scored.front().score - 1.0};
  for (size_t i = 1; i < scored.size(); ++i) {
    if (scored[i].score > scored[i - 1].score)
      candidates.push_back(0.5 * (scored[i].score + scored[i - 1].score));
  }
  candidates.push_back(scored.back().score + 1.0);

  for (double thr : candidates) {
    const double acc = balanced_at(thr);
    if (acc > best_balanced) {
      best_balanced = acc;
      best_threshold = thr;
    }
  }
  return best_threshold;
}

double eval_classifier_accuracy(const DirectorModel& model,
                                std::span<const LabeledSequence> labeled_set,
                                double threshold) {
  auto scored = score_set(model, labeled_set);
  int64_t n_pos = 0, n_neg = 0;
  for (const ScoredLabel& s : scored) (s.positive ? n_pos : n_neg) += 1;
  if (n_pos == 0 || n_neg == 0)
    throw std::invalid_argument("eval_classifier_accuracy: single-class set is degenerate");
  int64_t correct = 0;
  for (const ScoredLabel& s : scored) {
    const bool predicted_positive = s.score >= threshold;
    if (predicted_positive == s.positive) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(scored.size());
}

double classified_positive_rate(const DirectorModel& model,
                                std::span<const LabeledSequence> sequences,
                                double threshold) {
  if (sequences.empty())
    throw std::invalid_argument("classified_positive_rate: empty set");
  int64_t positive = 0;
  for (const LabeledSequence& seq : sequences) {
    if (sequence_positive_score(model, seq) >= threshold) ++positive;
  }
  return static_cast<double>(positive) / static_cast<double>(sequences.size());
}

// ---- latency ------------------------------------------------------------------

std::vector<BenchResult> latency_bench(std::span<const BenchStrategy> strategies,
                                       std::span<const std::vector<int>> prompts,
                                       int repetitions) {
  if (prompts.size() < 20)
    throw std::invalid_argument("latency_bench: need at least 20 prompts");
  if (repetitions < 3)
    throw std::invalid_argument("latency_bench: need at least 3 repetitions");

  std::vector<BenchResult> out;
  for (const BenchStrategy& s : strategies) {
    if (s.model == nullptr)
      throw std::invalid_argument("latency_bench: strategy without a model");

    // warm-up pass, excluded from timing
    decode(*s.model, s.guide, prompts.front(), s.config);

    std::vector<double> seconds;
    int64_t guide_calls = 0, steps = 0, examples = 0;
    for (int rep = 0; rep < repetitions; ++rep) {
      for (size_t p = 0; p < prompts.size(); ++p) {
        DecodeConfig cfg = s.config;
        cfg.seed = s.config.seed ^ (static_cast<uint64_t>(p) * 0x9e3779b9ULL);
        GenerationResult r = decode(*s.model, s.guide, prompts[p], cfg);
        seconds.push_back(r.seconds);
        guide_calls += r.guide_calls;
        steps += r.steps;
        ++examples;
      }
    }
    std::sort(seconds.begin(), seconds.end());
    const size_t mid = seconds.size() / 2;
    const double median = seconds.size() % 2 == 1
                              ? seconds[mid]
                              : 0.5 * (seconds[mid - 1] + seconds[mid]);
    out.push_back(BenchResult{.name = s.name,
                              .median_sec_per_ex = median,
                              .mean_guide_calls = static_cast<double>(guide_calls) /
                                                  static_cast<double>(examples),
                              .mean_steps = static_cast<double>(steps) /
                                            static_cast<double>(examples),
                              .total_guide_calls = guide_calls});
  }
  return out;
}

// ---- reporting -----------------------------------------------------------------

void write_scatter_csv(const std::string& path, std::span<const ScatterRow> rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open scatter file for writing: " + path);
  const std::vector<std::string> header = {"strategy",  "gamma_train", "gamma_infer",
                                           "delta",     "class_acc",   "gen_f1",
                                           "sec_per_ex"};
  write_csv_row(out, header);
  for (const ScatterRow& r : rows) {
    const std::vector<std::string> fields = {
        r.strategy,
        format_double(r.gamma_train),
        format_double(r.gamma_infer),
        format_double(r.delta),
        format_double(r.class_acc),
        format_double(r.gen_f1),
        format_double(r.sec_per_ex),
    };
    write_csv_row(out, fields);
  }
}

std::vector<ScatterRow> read_scatter_csv(const std::string& path) {
  auto rows = read_csv(path);
  if (rows.empty()) throw std::runtime_error("scatter file is empty: " + path);
  std::vector<ScatterRow> out;
  for (size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].size() != 7)
      throw std::runtime_error(path + ": row " + std::to_string(i) +
                               " has wrong field count");
    out.push_back(ScatterRow{.strategy = rows[i][0],
                             .gamma_train = std::stod(rows[i][1]),
                             .gamma_infer = std::stod(rows[i][2]),
                             .delta = std::stod(rows[i][3]),
                             .class_acc = std::stod(rows[i][4]),
                             .gen_f1 = std::stod(rows[i][5]),
                             .sec_per_ex = std::stod(rows[i][6])});
  }
  return out;
}

void write_metrics_csv(const std::string& path, const MetricsReport& report) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open metrics file for writing: " + path);
  std::vector<std::string> header = {"f1"};
  std::vector<std::string> fields = {format_double(report.f1)};
  for (int n = 1; n <= 5; ++n) {
    header.push_back("repeat_at_" + std::to_string(n));
    auto it = report.repeat_at_n.find(n);
    fields.push_back(format_double(it == report.repeat_at_n.end() ? 0.0 : it->second));
  }
  for (const auto& [name, value] :
       std::initializer_list<std::pair<std::string, double>>{
           {"repeat_score_5", report.repeat_score_5},
           {"class_acc", report.class_acc},
           {"bad_token_rate", report.bad_token_rate},
           {"sec_per_ex", report.sec_per_ex},
           {"avg_len", report.avg_len}}) {
    header.push_back(name);
    fields.push_back(format_double(value));
  }
  write_csv_row(out, header);
  write_csv_row(out, fields);
}

void write_bench_csv(const std::string& path, std::span<const BenchResult> rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open bench file for writing: " + path);
  const std::vector<std::string> header = {"strategy", "median_sec_per_ex",
                                           "mean_guide_calls", "mean_steps"};
  write_csv_row(out, header);
  for (const BenchResult& r : rows) {
    const std::vector<std::string> fields = {
        r.name,
        format_double(r.median_sec_per_ex),
        format_double(r.mean_guide_calls),
        format_double(r.mean_steps),
    };
    write_csv_row(out, fields);
  }
}

}  // namespace director
