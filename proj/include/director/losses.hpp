#pragma once

#include <span>

#include "director/data.hpp"
#include "director/model.hpp"
#include "director/tensor.hpp"

namespace director {

/// Clamp applied inside every log and 1-p so saturated heads keep losses finite.
constexpr double kProbEps = 1e-9;

/// Negative log-likelihood, mean over predicted positions. Token index i is a
/// prediction target when i >= 1 and target_mask[i] != 0 (empty mask: every
/// position past the first). Sequences of length 1 have nothing to predict.
Tensor lm_loss(const DualHeadOutput& out, std::span<const int> tokens,
               std::span<const uint8_t> target_mask = {});

/// Classifier cross-entropy, weighted mean over labeled positions:
/// P(positive at i) = class_probs[i-1][tokens[i]], P(negative) = 1 - that.
Tensor class_loss(const DualHeadOutput& out, const LabeledSequence& seq);

/// Explicit label normalization: mean squared distance from 0.5 over the
/// |V|-1 non-target candidates at every labeled position.
Tensor label_norm_loss(const DualHeadOutput& out, const LabeledSequence& seq);

/// Token-level unlikelihood: alpha * mean over negative-labeled positions of
/// -log(1 - P_LM(token)). Returns a constant zero when there is nothing to
/// penalize or alpha is zero.
Tensor ul_token_loss(const DualHeadOutput& out, const LabeledSequence& seq,
                     double alpha);

}  // namespace director
