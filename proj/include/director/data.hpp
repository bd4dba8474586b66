#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "director/rng.hpp"

namespace director {

// ---- vocabulary ----------------------------------------------------------------

/// Word-level vocabulary. Five reserved tokens occupy fixed ids 0-4; content
/// tokens follow in insertion order.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kSep = 3;
  static constexpr int kUnk = 4;

  /// Builds reserved tokens + the given content tokens (duplicates rejected).
  static Vocabulary from_tokens(const std::vector<std::string>& content_tokens);

  int64_t size() const { return static_cast<int64_t>(tokens_.size()); }
  const std::string& token(int id) const;
  int id_of(const std::string& token) const;  // kUnk when missing
  bool contains(const std::string& token) const;

  /// Content-token ids (everything past the reserved block).
  std::vector<int> content_ids() const;
  /// Ids of content tokens whose name starts with the given prefix.
  std::vector<int> ids_with_prefix(const std::string& prefix) const;

  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

std::vector<int> tokenize(const std::string& text, const Vocabulary& vocab);
std::string detokenize(std::span<const int> ids, const Vocabulary& vocab);

// ---- records and labels ---------------------------------------------------------

enum class SeqLabel : uint8_t { positive, negative };
enum class TokenLabel : uint8_t { unlabeled, positive, negative };

struct CorpusRecord {
  std::string context;  // may be empty
  std::string response;
  std::optional<SeqLabel> seq_label;
};

/// Packed training sequence: BOS + context + SEP + response + EOS (SEP omitted
/// when the context is empty). lm_mask marks LM target positions (the response
/// and its EOS); labels/weights carry per-token classifier supervision.
struct LabeledSequence {
  std::vector<int> tokens;
  std::vector<TokenLabel> labels;
  std::vector<double> weights;
  std::vector<uint8_t> lm_mask;

  size_t length() const { return tokens.size(); }
};

/// Packs raw context/response token ids. Contexts longer than the budget are
/// truncated from the left; the response is never cut (over-budget responses
/// are rejected).
LabeledSequence pack_sequence(std::span<const int> context_ids,
                              std::span<const int> response_ids,
                              int64_t max_seq_len);

/// Prompt prefix for decoding: BOS + context + SEP (plain BOS when empty).
std::vector<int> pack_prompt(std::span<const int> context_ids, int64_t max_seq_len);

/// Sequence-level label propagation: every response token inherits the record
/// label, context stays unlabeled, weights are 1.
LabeledSequence propagate_labels(const CorpusRecord& record, const Vocabulary& vocab,
                                 int64_t max_seq_len);

/// Packs an unlabeled record (LM data).
LabeledSequence pack_record(const CorpusRecord& record, const Vocabulary& vocab,
                            int64_t max_seq_len);

/// Automatic repetition labeling: a generation token is negative iff it lies
/// inside an n-gram (n = max_n exactly, or any n <= max_n in weighted mode)
/// whose token sequence already occurred earlier in context + generation
/// prefix. In weighted mode a negative token's weight is (largest covering
/// n) / max_n; positives keep weight 1.
LabeledSequence label_repetitions(std::span<const int> context_ids,
                                  std::span<const int> generation_ids, int max_n,
                                  bool weighted, int64_t max_seq_len);

// ---- corpus files ---------------------------------------------------------------
// One record per line: context TAB response TAB label, label in {pos, neg} or
// empty for LM records.

std::vector<CorpusRecord> read_corpus(const std::string& path);
void write_corpus(const std::string& path, const std::vector<CorpusRecord>& records);

// ---- synthetic tasks --------------------------------------------------------------

struct SynthSizes {
  int n_lm = 2000;
  int n_class = 1000;
  int n_valid = 200;
  int n_eval = 100;
  int response_len = 12;
  int context_len = 3;
};

struct SyntheticTask {
  Vocabulary vocab;
  std::vector<CorpusRecord> d_lm;
  std::vector<CorpusRecord> d_class;
  std::vector<CorpusRecord> valid;
  /// Held-out prompts; response field carries the reference continuation.
  std::vector<CorpusRecord> eval_prompts;
  std::vector<int> bad_ids;
  std::vector<int> trigger_ids;
};

/// Markov-chain text where BAD tokens follow trigger tokens with p = 0.5.
/// d_class sequences get a positive label iff they contain no BAD token;
/// eval prompts end at a trigger token.
SyntheticTask make_synthetic_safety_task(uint64_t seed, const SynthSizes& sizes);

/// Chain whose argmax transitions form a short token cycle, so a fitted model
/// loops under greedy decoding while sampled references wander.
SyntheticTask make_synthetic_repetition_task(uint64_t seed, const SynthSizes& sizes);

// ---- batching -------------------------------------------------------------------

struct Batch {
  std::vector<LabeledSequence> items;  // right-padded to a common length
  std::vector<int64_t> lengths;        // pre-padding lengths
};

std::vector<Batch> batcher(std::span<const LabeledSequence> sequences,
                           int64_t batch_size, int pad_id);

}  // namespace director
