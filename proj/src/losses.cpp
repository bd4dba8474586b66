#include "director/losses.hpp"

#include <stdexcept>

namespace director {

namespace {

struct Picks {
  std::vector<int64_t> rows, cols;
};

Picks labeled_picks(const LabeledSequence& seq, bool negatives_only) {
  Picks p;
  for (size_t i = 0; i < seq.length(); ++i) {
    if (seq.labels[i] == TokenLabel::unlabeled) continue;
    if (negatives_only && seq.labels[i] != TokenLabel::negative) continue;
    if (i == 0)
      throw std::invalid_argument(
          "labeled position 0 has no preceding context row to classify from");
    p.rows.push_back(static_cast<int64_t>(i) - 1);
    p.cols.push_back(seq.tokens[i]);
  }
  return p;
}

}  // namespace

Tensor lm_loss(const DualHeadOutput& out, std::span<const int> tokens,
               std::span<const uint8_t> target_mask) {
  if (tokens.size() < 2)
    throw std::invalid_argument("lm_loss: nothing to predict in a length-" +
                                std::to_string(tokens.size()) + " sequence");
  if (!target_mask.empty() && target_mask.size() != tokens.size())
    throw std::invalid_argument("lm_loss: target mask length mismatch");

  std::vector<int64_t> rows, cols;
  for (size_t i = 1; i < tokens.size(); ++i) {
    if (!target_mask.empty() && !target_mask[i]) continue;
    rows.push_back(static_cast<int64_t>(i) - 1);
    cols.push_back(tokens[i]);
  }
  if (rows.empty()) throw std::invalid_argument("lm_loss: mask selects no targets");
  return neg(mean(gather_entries(out.lm_log_probs, rows, cols)));
}

Tensor class_loss(const DualHeadOutput& out, const LabeledSequence& seq) {
  const Picks picks = labeled_picks(seq, false);
  if (picks.rows.empty())
    throw std::invalid_argument("class_loss: sequence has no labeled positions");

  Tensor p = clamp(gather_entries(out.class_probs, picks.rows, picks.cols),
                   kProbEps, 1.0 - kProbEps);

  // probability assigned to the gold label: p for positives, 1 - p for
  // negatives, built as offset + sign * p with constant vectors
  const size_t k = picks.rows.size();
  std::vector<double> sign(k), offset(k), weight(k);
  double weight_total = 0.0;
  size_t j = 0;
  for (size_t i = 0; i < seq.length(); ++i) {
    if (seq.labels[i] == TokenLabel::unlabeled) continue;
    const bool positive = seq.labels[i] == TokenLabel::positive;
    sign[j] = positive ? 1.0 : -1.0;
    offset[j] = positive ? 0.0 : 1.0;
    weight[j] = seq.weights[i];
    weight_total += weight[j];
    ++j;
  }
  if (weight_total <= 0.0)
    throw std::invalid_argument("class_loss: labeled positions have zero total weight");
  for (double& w : weight) w /= weight_total;

  const int64_t n = static_cast<int64_t>(k);
  Tensor gold = add(mul(p, Tensor({n}, sign)), Tensor({n}, offset));
  Tensor nll = neg(director::log(clamp(gold, kProbEps, 1.0)));
  return sum(mul(nll, Tensor({n}, weight)));
}

Tensor label_norm_loss(const DualHeadOutput& out, const LabeledSequence& seq) {
  const int64_t vocab = out.class_probs.cols();
  if (vocab < 2)
    throw std::invalid_argument("label_norm_loss: needs at least two candidates");
  const Picks picks = labeled_picks(seq, false);
  if (picks.rows.empty())
    throw std::invalid_argument("label_norm_loss: sequence has no labeled positions");

  std::vector<int> row_ids(picks.rows.begin(), picks.rows.end());
  Tensor rows = gather_rows(out.class_probs, row_ids);
  Tensor dev = add_scalar(rows, -0.5);
  Tensor all_sq = sum(mul(dev, dev));

  Tensor sel = gather_entries(out.class_probs, picks.rows, picks.cols);
  Tensor sel_dev = add_scalar(sel, -0.5);
  Tensor sel_sq = sum(mul(sel_dev, sel_dev));

  const double denom = static_cast<double>(picks.rows.size()) *
                       static_cast<double>(vocab - 1);
  return scale(sub(all_sq, sel_sq), 1.0 / denom);
}

Tensor ul_token_loss(const DualHeadOutput& out, const LabeledSequence& seq,
                     double alpha) {
  if (alpha < 0.0) throw std::invalid_argument("ul_token_loss: alpha must be >= 0");
  if (alpha == 0.0) return Tensor::scalar(0.0);
  const Picks picks = labeled_picks(seq, true);
  if (picks.rows.empty()) return Tensor::scalar(0.0);

  Tensor log_p = gather_entries(out.lm_log_probs, picks.rows, picks.cols);
  Tensor p = director::exp(log_p);
  Tensor escape = sub(Tensor::full({static_cast<int64_t>(picks.rows.size())}, 1.0), p);
  Tensor nll = neg(director::log(clamp(escape, kProbEps, 1.0)));
  return scale(mean(nll), alpha);
}

}  // namespace director
