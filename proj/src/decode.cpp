#include "director/decode.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "director/rng.hpp"

namespace director {

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::baseline: return "baseline";
    case Strategy::director: return "director";
    case Strategy::reranker: return "reranker";
    case Strategy::fudge: return "fudge";
    case Strategy::pacer: return "pacer";
  }
  return "?";
}

std::string to_string(DecodeMode m) {
  switch (m) {
    case DecodeMode::greedy: return "greedy";
    case DecodeMode::beam: return "beam";
    case DecodeMode::topk_sample: return "topk_sample";
  }
  return "?";
}

Strategy parse_strategy(const std::string& name) {
  for (Strategy s : {Strategy::baseline, Strategy::director, Strategy::reranker,
                     Strategy::fudge, Strategy::pacer}) {
    if (to_string(s) == name) return s;
  }
  throw std::invalid_argument("unknown strategy '" + name + "'");
}

DecodeMode parse_decode_mode(const std::string& name) {
  for (DecodeMode m : {DecodeMode::greedy, DecodeMode::beam, DecodeMode::topk_sample}) {
    if (to_string(m) == name) return m;
  }
  throw std::invalid_argument("unknown decode mode '" + name + "'");
}

void DecodeConfig::validate(int64_t vocab_size) const {
  if (gamma_infer < 0.0) throw std::invalid_argument("DecodeConfig: gamma_infer must be >= 0");
  if (beam_width < 1) throw std::invalid_argument("DecodeConfig: beam_width must be >= 1");
  if (top_k < 1) throw std::invalid_argument("DecodeConfig: top_k must be >= 1");
  if (max_len < 1) throw std::invalid_argument("DecodeConfig: max_len must be >= 1");
  if (min_len < 0 || min_len > max_len)
    throw std::invalid_argument("DecodeConfig: min_len must lie in [0, max_len]");
  if (block_n < 0) throw std::invalid_argument("DecodeConfig: block_n must be >= 0");
  if (block_n > 0 && mode == DecodeMode::topk_sample)
    throw std::invalid_argument("DecodeConfig: block_n is only valid with beam or greedy modes");
  if (strategy == Strategy::pacer) {
    if (mode != DecodeMode::beam)
      throw std::invalid_argument("DecodeConfig: pacer requires beam mode");
    if (pacer_m < 1 || pacer_m > std::min<int64_t>(top_k, vocab_size))
      throw std::invalid_argument("DecodeConfig: pacer_m must lie in [1, top_k]");
  }
  (void)vocab_size;
}

StepDistribution combine_heads(std::span<const double> lm_log_probs_row,
                               std::span<const double> class_probs_row,
                               double gamma_infer) {
  if (lm_log_probs_row.size() != class_probs_row.size() || lm_log_probs_row.empty())
    throw std::invalid_argument("combine_heads: rows must be equal-length and non-empty");
  if (gamma_infer < 0.0) throw std::invalid_argument("combine_heads: gamma must be >= 0");

  const size_t v = lm_log_probs_row.size();
  std::vector<double> score(v);
  double mx = -std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < v; ++i) {
    // gamma = 0 must be the exact identity on exp(lm_log_probs)
    score[i] = gamma_infer == 0.0
                   ? lm_log_probs_row[i]
                   : lm_log_probs_row[i] + gamma_infer * std::log(class_probs_row[i]);
    mx = std::max(mx, score[i]);
  }
  if (!std::isfinite(mx))
    throw std::runtime_error(
        "combine_heads: combined mass underflowed to zero for every candidate "
        "(all scores -inf)");

  StepDistribution out;
  out.probs.resize(v);
  double total = 0.0;
  for (size_t i = 0; i < v; ++i) {
    out.probs[i] = std::exp(score[i] - mx);
    total += out.probs[i];
  }
  for (double& p : out.probs) p /= total;
  out.normalizer = std::exp(mx) * total;
  return out;
}

bool beam_block(std::span<const int> hypothesis, int candidate_token,
                int64_t block_n, std::span<const int> context) {
  if (block_n < 1) throw std::invalid_argument("beam_block: block_n must be >= 1");
  if (candidate_token == Vocabulary::kEos) return true;

  std::vector<int> stream(context.begin(), context.end());
  stream.insert(stream.end(), hypothesis.begin(), hypothesis.end());
  const int64_t len = static_cast<int64_t>(stream.size());
  if (len < block_n - 1) return true;

  std::vector<int> gram(stream.end() - (block_n - 1), stream.end());
  gram.push_back(candidate_token);
  for (int64_t j = 0; j + block_n <= len; ++j) {
    if (std::equal(gram.begin(), gram.end(), stream.begin() + j)) return false;
  }
  return true;
}

namespace {

struct GuideCounter {
  int64_t calls = 0;
};

// FUDGE-style left-to-right guide probe: one full forward over prefix+cand,
// reading the classifier entry for the appended candidate. This is the cost
// structure of an external guiding classifier; the guide's own parallel head
// is deliberately not exploited across candidates.
double guide_token_score(const DirectorModel& guide, std::span<const int> prefix,
                         int candidate, GuideCounter& counter) {
  std::vector<int> extended(prefix.begin(), prefix.end());
  extended.push_back(candidate);
  DualHeadOutput out = guide.forward(extended);
  ++counter.calls;
  return out.class_probs.at(static_cast<int64_t>(prefix.size()) - 1, candidate);
}

// whole-sequence positive-class score (mean log), one forward
double guide_sequence_score(const DirectorModel& guide, std::span<const int> prompt,
                            std::span<const int> response, GuideCounter& counter) {
  std::vector<int> full(prompt.begin(), prompt.end());
  full.insert(full.end(), response.begin(), response.end());
  DualHeadOutput out = guide.forward(full);
  ++counter.calls;
  double total = 0.0;
  for (size_t i = 0; i < response.size(); ++i) {
    const int64_t pos = static_cast<int64_t>(prompt.size() + i);
    const double p = std::max(out.class_probs.at(pos - 1, response[i]), 1e-300);
    total += std::log(p);
  }
  return total / static_cast<double>(response.size());
}

struct Expansion {
  StepDistribution dist;
  double lm_log_prob(int token) const { return std::log(dist.probs[static_cast<size_t>(token)]); }
};

std::vector<size_t> top_indices(std::span<const double> probs, int64_t k) {
  std::vector<size_t> idx(probs.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) {
    if (probs[a] != probs[b]) return probs[a] > probs[b];
    return a < b;
  });
  idx.resize(static_cast<size_t>(std::min<int64_t>(k, static_cast<int64_t>(idx.size()))));
  return idx;
}

class Decoder {
 public:
  Decoder(const DirectorModel& model, const DirectorModel* guide,
          const DecodeConfig& config)
      : model_(model), guide_(guide), config_(config),
        rng_(substream_seed(config.seed, "decode")) {}

  GenerationResult run(std::span<const int> context_ids, const Vocabulary* vocab) {
    config_.validate(model_.config().vocab_size);
    const bool needs_guide = config_.strategy == Strategy::fudge ||
                             config_.strategy == Strategy::pacer ||
                             config_.strategy == Strategy::reranker;
    if (needs_guide && guide_ == nullptr)
      throw std::invalid_argument("decode: strategy " + to_string(config_.strategy) +
                                  " requires a guide model");

    const auto t0 = std::chrono::steady_clock::now();
    GenerationResult result;
    result.prompt = pack_prompt(context_ids, model_.config().max_seq_len);
    result.strategy = to_string(config_.strategy);

    if (config_.mode == DecodeMode::beam) {
      result.tokens = beam_search(result.prompt, result);
    } else {
      result.tokens = single_path(result.prompt, result);
    }

    result.guide_calls = counter_.calls;
    if (vocab != nullptr) result.text = detokenize(result.tokens, *vocab);
    result.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
  }

 private:
  // strategy-specific next-token distribution over the full vocabulary
  StepDistribution step_distribution(std::span<const int> prefix) {
    DualHeadOutput out = model_.forward(prefix);
    const int64_t last = out.lm_log_probs.rows() - 1;
    const int64_t v = out.lm_log_probs.cols();
    std::vector<double> lm_row(static_cast<size_t>(v)), cls_row(static_cast<size_t>(v));
    for (int64_t c = 0; c < v; ++c) {
      lm_row[static_cast<size_t>(c)] = out.lm_log_probs.at(last, c);
      cls_row[static_cast<size_t>(c)] = out.class_probs.at(last, c);
    }

    switch (config_.strategy) {
      case Strategy::baseline:
      case Strategy::reranker:
        return combine_heads(lm_row, cls_row, 0.0);
      case Strategy::director:
        return combine_heads(lm_row, cls_row, config_.gamma_infer);
      case Strategy::fudge:
        return guided_pool(prefix, lm_row, /*sample_pool=*/false);
      case Strategy::pacer:
        return guided_pool(prefix, lm_row, /*sample_pool=*/true);
    }
    throw std::logic_error("unreachable strategy");
  }

  // FUDGE / PACER: rescale an LM top-k pool by external guide probabilities.
  // PACER scores only a sampled subset of the pool.
  StepDistribution guided_pool(std::span<const int> prefix,
                               std::span<const double> lm_log_row, bool sample_pool) {
    const int64_t v = static_cast<int64_t>(lm_log_row.size());
    std::vector<double> lm_probs(lm_log_row.size());
    for (size_t i = 0; i < lm_probs.size(); ++i) lm_probs[i] = std::exp(lm_log_row[i]);

    const int64_t k = std::min<int64_t>(config_.top_k, v);  // over-wide pools clamp
    std::vector<size_t> pool = top_indices(lm_probs, k);

    if (sample_pool) {
      // proportional-without-replacement by LM probability
      const int64_t m = std::min<int64_t>(config_.pacer_m, static_cast<int64_t>(pool.size()));
      std::vector<size_t> sampled;
      std::vector<size_t> remaining = pool;
      std::vector<double> weights;
      for (int64_t pick = 0; pick < m; ++pick) {
        weights.clear();
        for (size_t cand : remaining) weights.push_back(lm_probs[cand]);
        const size_t chosen = rng_.weighted_index(weights);
        sampled.push_back(remaining[chosen]);
        remaining.erase(remaining.begin() + static_cast<long>(chosen));
      }
      std::sort(sampled.begin(), sampled.end());
      pool = std::move(sampled);
    }

    StepDistribution out;
    out.probs.assign(static_cast<size_t>(v), 0.0);
    double total = 0.0;
    for (size_t cand : pool) {
      const double g =
          guide_token_score(*guide_, prefix, static_cast<int>(cand), counter_);
      const double w = lm_probs[cand] * g;
      out.probs[cand] = w;
      total += w;
    }
    if (total <= 0.0)
      throw std::runtime_error("decode: guided pool carries zero probability mass");
    for (double& p : out.probs) p /= total;
    out.normalizer = total;
    return out;
  }

  // min-length forcing and n-gram blocking; returns false when no candidate
  // survives
  bool apply_constraints(StepDistribution& dist, std::span<const int> response,
                         std::span<const int> prompt) const {
    const int64_t len = static_cast<int64_t>(response.size());
    if (config_.min_len > 0) {
      if (len < config_.min_len) {
        dist.probs[Vocabulary::kEos] = 0.0;
      } else {
        // forced end
        std::fill(dist.probs.begin(), dist.probs.end(), 0.0);
        dist.probs[Vocabulary::kEos] = 1.0;
        return true;
      }
    }
    if (config_.block_n > 0) {
      for (size_t c = 0; c < dist.probs.size(); ++c) {
        if (dist.probs[c] == 0.0) continue;
        if (!beam_block(response, static_cast<int>(c), config_.block_n, prompt))
          dist.probs[c] = 0.0;
      }
    }
    double total = 0.0;
    for (double p : dist.probs) total += p;
    if (total <= 0.0) return false;
    for (double& p : dist.probs) p /= total;
    return true;
  }

  std::vector<int> single_path(std::span<const int> prompt, GenerationResult& result) {
    std::vector<int> prefix(prompt.begin(), prompt.end());
    std::vector<int> response;
    const int64_t room = model_.config().max_seq_len - static_cast<int64_t>(prompt.size()) - 1;
    const int64_t budget = std::min<int64_t>(config_.max_len, std::max<int64_t>(room, 0));

    while (static_cast<int64_t>(response.size()) < budget) {
      StepDistribution dist = step_distribution(prefix);
      ++result.steps;
      if (!apply_constraints(dist, response, prompt))
        throw std::runtime_error("decode: no candidate survives the decoding constraints");
      if (config_.record_steps) result.step_dists.push_back(dist);

      int chosen;
      if (config_.mode == DecodeMode::greedy) {
        chosen = static_cast<int>(top_indices(dist.probs, 1).front());
      } else {  // topk_sample
        auto pool = top_indices(dist.probs, config_.top_k);
        std::vector<double> weights;
        for (size_t cand : pool) weights.push_back(dist.probs[cand]);
        chosen = static_cast<int>(pool[rng_.weighted_index(weights)]);
      }
      if (chosen == Vocabulary::kEos) break;
      response.push_back(chosen);
      prefix.push_back(chosen);
    }
    return response;
  }

  struct Hypothesis {
    std::vector<int> response;
    double sum_log = 0.0;
    int64_t order = 0;

    double mean_log() const {
      return response.empty() ? 0.0 : sum_log / static_cast<double>(response.size());
    }
  };

  std::vector<int> beam_search(std::span<const int> prompt, GenerationResult& result) {
    const int64_t room = model_.config().max_seq_len - static_cast<int64_t>(prompt.size()) - 1;
    const int64_t budget = std::min<int64_t>(config_.max_len, std::max<int64_t>(room, 0));

    std::vector<Hypothesis> live = {Hypothesis{}};
    std::vector<Hypothesis> finished;
    int64_t next_order = 0;

    for (int64_t depth = 0; depth < budget && !live.empty(); ++depth) {
      std::vector<Hypothesis> children;
      for (Hypothesis& hyp : live) {
        std::vector<int> prefix(prompt.begin(), prompt.end());
        prefix.insert(prefix.end(), hyp.response.begin(), hyp.response.end());
        StepDistribution dist = step_distribution(prefix);
        ++result.steps;
        if (!apply_constraints(dist, hyp.response, prompt)) continue;

        for (size_t cand : top_indices(dist.probs, config_.beam_width)) {
          if (dist.probs[cand] <= 0.0) continue;
          Hypothesis child = hyp;
          child.sum_log += std::log(dist.probs[cand]);
          child.order = next_order++;
          if (static_cast<int>(cand) == Vocabulary::kEos) {
            finished.push_back(std::move(child));
          } else {
            child.response.push_back(static_cast<int>(cand));
            children.push_back(std::move(child));
          }
        }
      }
      if (children.empty() && finished.empty())
        throw std::runtime_error("decode: no candidate survives the decoding constraints");

      std::stable_sort(children.begin(), children.end(),
                       [](const Hypothesis& a, const Hypothesis& b) {
                         if (a.mean_log() != b.mean_log()) return a.mean_log() > b.mean_log();
                         return a.response < b.response;  // deterministic tie-break
                       });
      if (static_cast<int64_t>(children.size()) > config_.beam_width)
        children.resize(static_cast<size_t>(config_.beam_width));
      live = std::move(children);
    }

    // out-of-budget hypotheses finish without EOS
    for (Hypothesis& hyp : live) finished.push_back(std::move(hyp));
    if (finished.empty())
      throw std::runtime_error("decode: beam search produced no finished hypothesis");

    std::stable_sort(finished.begin(), finished.end(),
                     [](const Hypothesis& a, const Hypothesis& b) {
                       if (a.mean_log() != b.mean_log()) return a.mean_log() > b.mean_log();
                       return a.order < b.order;
                     });
    if (static_cast<int64_t>(finished.size()) > config_.beam_width)
      finished.resize(static_cast<size_t>(config_.beam_width));

    const bool rerank_at_end = config_.strategy == Strategy::reranker ||
                               config_.strategy == Strategy::pacer;
    if (!rerank_at_end || finished.size() == 1) {
      if (rerank_at_end && guide_ != nullptr) {
        // single candidate still pays its final scoring call
        guide_sequence_score(*guide_, prompt, finished.front().response, counter_);
      }
      return finished.front().response;
    }

    std::vector<ScoredCandidate> candidates;
    for (size_t i = 0; i < finished.size(); ++i) {
      candidates.push_back(ScoredCandidate{.tokens = finished[i].response,
                                           .lm_score = finished[i].mean_log(),
                                           .guide_score = 0.0,
                                           .beam_order = static_cast<int64_t>(i)});
    }
    auto prompt_vec = std::vector<int>(prompt.begin(), prompt.end());
    auto ranked = rerank_candidates(prompt_vec, std::move(candidates), *guide_,
                                    &counter_.calls);
    return ranked.front().tokens;
  }

  const DirectorModel& model_;
  const DirectorModel* guide_;
  DecodeConfig config_;
  Rng rng_;
  GuideCounter counter_;
};

}  // namespace

std::vector<ScoredCandidate> rerank_candidates(std::span<const int> prompt,
                                               std::vector<ScoredCandidate> candidates,
                                               const DirectorModel& reranker,
                                               int64_t* guide_calls) {
  if (candidates.empty())
    throw std::invalid_argument("rerank_candidates: empty candidate list");
  GuideCounter counter;
  for (ScoredCandidate& cand : candidates) {
    if (cand.tokens.empty()) {
      cand.guide_score = 0.0;
      ++counter.calls;
      continue;
    }
    cand.guide_score = guide_sequence_score(reranker, prompt, cand.tokens, counter);
  }
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const ScoredCandidate& a, const ScoredCandidate& b) {
                     if (a.guide_score != b.guide_score) return a.guide_score > b.guide_score;
                     if (a.lm_score != b.lm_score) return a.lm_score > b.lm_score;
                     return a.beam_order < b.beam_order;
                   });
  if (guide_calls != nullptr) *guide_calls += counter.calls;
  return candidates;
}

GenerationResult decode(const DirectorModel& model, const DirectorModel* guide,
                        std::span<const int> context_ids, const DecodeConfig& config,
                        const Vocabulary* vocab) {
  Decoder decoder(model, guide, config);
  return decoder.run(context_ids, vocab);
}

// ---- generations file ---------------------------------------------------------

namespace {

std::string join_ints(std::span<const int> ids) {
  std::ostringstream os;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (i) os << ' ';
    os << ids[i];
  }
  return os.str();
}

std::vector<int> split_ints(const std::string& text) {
  std::vector<int> out;
  std::istringstream in(text);
  int v = 0;
  while (in >> v) out.push_back(v);
  return out;
}

}  // namespace

void write_generations(const std::string& path,
                       std::span<const GenerationResult> results) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open generations file for writing: " + path);
  for (const GenerationResult& r : results) {
    out << join_ints(r.prompt) << '\t' << join_ints(r.tokens) << '\t' << r.text
        << '\t' << r.strategy << '\t' << r.seconds << '\t' << r.guide_calls
        << '\t' << r.steps << '\n';
  }
}

std::vector<GenerationResult> read_generations(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open generations file: " + path);
  std::vector<GenerationResult> out;
  std::string line;
  int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    size_t pos = 0;
    while (true) {
      const size_t tab = line.find('\t', pos);
      if (tab == std::string::npos) {
        fields.push_back(line.substr(pos));
        break;
      }
      fields.push_back(line.substr(pos, tab - pos));
      pos = tab + 1;
    }
    if (fields.size() != 7)
      throw std::runtime_error(path + ":" + std::to_string(line_no) +
                               ": expected 7 tab-separated fields, got " +
                               std::to_string(fields.size()));
    GenerationResult r;
    r.prompt = split_ints(fields[0]);
    r.tokens = split_ints(fields[1]);
    r.text = fields[2];
    r.strategy = fields[3];
    try {
      r.seconds = std::stod(fields[4]);
      r.guide_calls = std::stoll(fields[5]);
      r.steps = std::stoll(fields[6]);
    } catch (const std::exception&) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) +
                               ": malformed numeric field");
    }
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace director
