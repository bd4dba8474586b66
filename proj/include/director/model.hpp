#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "director/tensor.hpp"

namespace director {

struct ModelConfig {
  int64_t vocab_size = 0;
  int64_t embed_dim = 64;
  int64_t n_layers = 2;
  int64_t n_heads = 2;
  int64_t max_seq_len = 128;
  uint64_t seed = 0;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// Output row t is computed from tokens 0..t and scores position t+1:
/// lm_log_probs[t][v] = log P(x_{t+1} = v | x_{0:t})
/// class_probs[t][v]  = P(y_{t+1} = positive | x_{0:t}, x_{t+1} = v)
/// This off-by-one convention is shared by every downstream module.
struct DualHeadOutput {
  Tensor lm_log_probs;  // [T x V]
  Tensor class_probs;   // [T x V]
};

struct TransformerLayer {
  Tensor ln1_gain, ln1_bias;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_gain, ln2_bias;
  Tensor w_ff1, b_ff1, w_ff2, b_ff2;
};

/// Decoder-only transformer with a shared core feeding two linear heads:
/// an LM head (log-softmax over V) and a classifier head (per-candidate
/// sigmoid over V). Candidate tokens enter the classifier only through the
/// column vectors of its linear layer; the core never sees them.
class DirectorModel {
 public:
  DirectorModel() = default;

  static DirectorModel init(const ModelConfig& config);

  /// One pass over all positions; both heads share the identical core output.
  DualHeadOutput forward(std::span<const int> tokens) const;

  const ModelConfig& config() const { return config_; }
  bool frozen_core() const { return frozen_core_; }

  /// Freezing clears requires_grad on every core and LM-head parameter, so
  /// training steps can only move the classifier head.
  void set_frozen_core(bool frozen);

  /// All parameters in checkpoint order.
  std::vector<Tensor> parameters() const;
  std::vector<Tensor> trainable_parameters() const;
  std::vector<Tensor> core_and_lm_parameters() const;
  std::vector<Tensor> class_head_parameters() const;

  Tensor& class_head_weight() { return w_cls_; }
  Tensor& class_head_bias() { return b_cls_; }

 private:
  ModelConfig config_;
  Tensor tok_embed_;  // [V x d]
  Tensor pos_embed_;  // [max_seq_len x d]
  std::vector<TransformerLayer> layers_;
  Tensor ln_f_gain_, ln_f_bias_;
  Tensor w_lm_, b_lm_;    // [d x V], [V]
  Tensor w_cls_, b_cls_;  // [d x V], [V]
  bool frozen_core_ = false;

  friend std::vector<uint8_t> save_checkpoint(const DirectorModel& model);
};

// ---- checkpoints -------------------------------------------------------------
// Layout: magic "DIR1" | u32 version | config (5 x i64 + u64 seed) | u8 frozen
//         | parameter blobs in declared order (little-endian f64)
//         | u32 CRC-32 of all preceding bytes.

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { bad_magic, version_mismatch, config_mismatch, truncated, checksum };

  CheckpointError(Kind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

std::vector<uint8_t> save_checkpoint(const DirectorModel& model);

/// expected, when given, must match the stored config exactly.
DirectorModel load_checkpoint(std::span<const uint8_t> bytes,
                              const ModelConfig* expected = nullptr);

void save_checkpoint_file(const DirectorModel& model, const std::string& path);
DirectorModel load_checkpoint_file(const std::string& path,
                                   const ModelConfig* expected = nullptr);

uint32_t crc32(std::span<const uint8_t> data);

}  // namespace director
