#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "director/data.hpp"
#include "director/decode.hpp"
#include "director/model.hpp"

namespace director {

struct MetricsReport {
  double f1 = 0.0;
  std::map<int, double> repeat_at_n;  // n in 1..5, mean count per example
  double repeat_score_5 = 0.0;
  double class_acc = 0.0;
  double bad_token_rate = 0.0;
  double sec_per_ex = 0.0;
  double avg_len = 0.0;
};

/// Token-multiset precision/recall F1; 0 on empty overlap, error on empty input.
double unigram_f1(std::span<const int> generation, std::span<const int> reference);

/// counts[n] = number of n-gram occurrences inside the generation whose exact
/// token sequence already occurred in context + generation prefix.
std::map<int, int64_t> repeat_counts(std::span<const int> context,
                                     std::span<const int> generation);

/// log2( sum_i 2^i c_i / sum_i c_i ) * c_1, defined as 0 when all counts are 0.
double repeat_score_5(const std::map<int, int64_t>& counts);

// ---- evaluation classifier -----------------------------------------------------

/// Whole-sequence positive-class score: mean per-token log P(positive) over
/// the response region of the packed sequence.
double sequence_positive_score(const DirectorModel& model, const LabeledSequence& seq);

/// Threshold on sequence_positive_score maximizing balanced accuracy over a
/// labeled calibration split.
double choose_threshold(const DirectorModel& model,
                        std::span<const LabeledSequence> calibration);

/// Fraction of sequences whose thresholded score matches the gold label.
/// Rejects single-class sets (accuracy would be degenerate).
double eval_classifier_accuracy(const DirectorModel& model,
                                std::span<const LabeledSequence> labeled_set,
                                double threshold);

/// Fraction of packed sequences the classifier scores above the threshold,
/// i.e. the share of generations judged positive.
double classified_positive_rate(const DirectorModel& model,
                                std::span<const LabeledSequence> sequences,
                                double threshold);

// ---- latency ------------------------------------------------------------------

struct BenchStrategy {
  std::string name;
  const DirectorModel* model = nullptr;
  const DirectorModel* guide = nullptr;  // null when the strategy needs none
  DecodeConfig config;
};

struct BenchResult {
  std::string name;
  double median_sec_per_ex = 0.0;
  double mean_guide_calls = 0.0;
  double mean_steps = 0.0;
  int64_t total_guide_calls = 0;
};

/// Median wall-clock seconds per generated example per strategy; one warm-up
/// pass per strategy is excluded. Strategies run serially.
std::vector<BenchResult> latency_bench(std::span<const BenchStrategy> strategies,
                                       std::span<const std::vector<int>> prompts,
                                       int repetitions);

// ---- reporting -----------------------------------------------------------------

struct ScatterRow {
  std::string strategy;
  double gamma_train = 0.0;
  double gamma_infer = 0.0;
  double delta = 0.0;
  double class_acc = 0.0;
  double gen_f1 = 0.0;
  double sec_per_ex = 0.0;
};

void write_scatter_csv(const std::string& path, std::span<const ScatterRow> rows);
std::vector<ScatterRow> read_scatter_csv(const std::string& path);

void write_metrics_csv(const std::string& path, const MetricsReport& report);
void write_bench_csv(const std::string& path, std::span<const BenchResult> rows);

}  // namespace director
