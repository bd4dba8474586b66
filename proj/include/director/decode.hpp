#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "director/data.hpp"
#include "director/model.hpp"

namespace director {

enum class Strategy { baseline, director, reranker, fudge, pacer };
enum class DecodeMode { greedy, beam, topk_sample };

std::string to_string(Strategy s);
std::string to_string(DecodeMode m);
Strategy parse_strategy(const std::string& name);
DecodeMode parse_decode_mode(const std::string& name);

struct DecodeConfig {
  Strategy strategy = Strategy::baseline;
  double gamma_infer = 0.0;
  DecodeMode mode = DecodeMode::greedy;
  int64_t beam_width = 4;
  int64_t top_k = 10;     // candidate pool for FUDGE/PACER and topk_sample
  int64_t pacer_m = 5;    // candidates PACER samples from the pool per expansion
  int64_t block_n = 0;    // 0 disables n-gram beam blocking
  int64_t max_len = 32;   // response-token budget
  int64_t min_len = 0;    // >0: EOS banned before, forced at, this length
  uint64_t seed = 0;
  bool record_steps = false;  // keep per-step distributions (greedy/sample)

  void validate(int64_t vocab_size) const;
};

struct StepDistribution {
  std::vector<double> probs;  // length |V|, sums to 1
  double normalizer = 0.0;    // Z before normalization
};

struct GenerationResult {
  std::vector<int> prompt;  // packed prompt (BOS [context SEP])
  std::vector<int> tokens;  // generated response, EOS excluded
  std::string text;
  std::string strategy;
  double seconds = 0.0;
  int64_t guide_calls = 0;  // external guide-model forwards
  int64_t steps = 0;        // per-hypothesis expansion passes
  std::vector<StepDistribution> step_dists;
};

/// probs[v] proportional to exp(lm_log_probs[v]) * class_probs[v]^gamma,
/// assembled in log space. gamma = 0 reproduces exp(lm_log_probs) exactly.
StepDistribution combine_heads(std::span<const double> lm_log_probs_row,
                               std::span<const double> class_probs_row,
                               double gamma_infer);

/// False iff appending the candidate completes a block_n-gram already present
/// in context + hypothesis. EOS is never blocked.
bool beam_block(std::span<const int> hypothesis, int candidate_token,
                int64_t block_n, std::span<const int> context);

struct ScoredCandidate {
  std::vector<int> tokens;   // response tokens
  double lm_score = 0.0;     // mean LM log-probability
  double guide_score = 0.0;  // mean positive-class log-probability
  int64_t beam_order = 0;
};

/// Scores each candidate under the reranker (mean per-token positive-class
/// log-probability over the response) and sorts descending; ties fall back to
/// LM score, then original beam order. One guide call per candidate.
std::vector<ScoredCandidate> rerank_candidates(std::span<const int> prompt,
                                               std::vector<ScoredCandidate> candidates,
                                               const DirectorModel& reranker,
                                               int64_t* guide_calls = nullptr);

/// Left-to-right generation with the configured strategy. FUDGE/PACER/reranker
/// require a guide model (pass the generator itself for same-model guiding).
GenerationResult decode(const DirectorModel& model, const DirectorModel* guide,
                        std::span<const int> context_ids, const DecodeConfig& config,
                        const Vocabulary* vocab = nullptr);

// generations file: one TSV record per line
void write_generations(const std::string& path,
                       std::span<const GenerationResult> results);
std::vector<GenerationResult> read_generations(const std::string& path);

}  // namespace director
