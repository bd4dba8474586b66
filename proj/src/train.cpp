#include "director/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "director/csv.hpp"
#include "director/rng.hpp"

namespace director {

void TrainConfig::validate() const {
  if (gamma_train < 0.0) throw std::invalid_argument("TrainConfig: gamma_train must be >= 0");
  if (delta < 0.0) throw std::invalid_argument("TrainConfig: delta must be >= 0");
  if (alpha_ul < 0.0) throw std::invalid_argument("TrainConfig: alpha_ul must be >= 0");
  if (learning_rate <= 0.0) throw std::invalid_argument("TrainConfig: learning_rate must be > 0");
  if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
  if (max_steps < 1) throw std::invalid_argument("TrainConfig: max_steps must be >= 1");
  if (patience < 1) throw std::invalid_argument("TrainConfig: patience must be >= 1");
  if (eval_every < 1) throw std::invalid_argument("TrainConfig: eval_every must be >= 1");
}

namespace {

LabeledSequence trimmed(const LabeledSequence& item, int64_t len) {
  if (static_cast<size_t>(len) == item.length()) return item;
  LabeledSequence out;
  out.tokens.assign(item.tokens.begin(), item.tokens.begin() + len);
  out.labels.assign(item.labels.begin(), item.labels.begin() + len);
  out.weights.assign(item.weights.begin(), item.weights.begin() + len);
  out.lm_mask.assign(item.lm_mask.begin(), item.lm_mask.begin() + len);
  return out;
}

Tensor batch_mean(std::vector<Tensor> per_item) {
  Tensor acc = per_item[0];
  for (size_t i = 1; i < per_item.size(); ++i) acc = add(acc, per_item[i]);
  return scale(acc, 1.0 / static_cast<double>(per_item.size()));
}

}  // namespace

StepReport train_step(DirectorModel& model, const Batch& batch, BatchKind kind,
                      const TrainConfig& config, Optimizer& optimizer) {
  if (batch.items.empty()) throw std::invalid_argument("train_step: empty batch");
  if (kind == BatchKind::lm && model.frozen_core())
    throw std::invalid_argument(
        "train_step: LM batch on a frozen-core model has nothing to train");

  StepReport report;
  report.kind = kind;

  Tape tape;
  std::vector<Tensor> lm_terms, ul_terms, cls_terms, norm_terms;
  for (size_t i = 0; i < batch.items.size(); ++i) {
    const LabeledSequence seq = trimmed(batch.items[i], batch.lengths[i]);
    DualHeadOutput out = model.forward(seq.tokens);
    if (kind == BatchKind::lm) {
      lm_terms.push_back(lm_loss(out, seq.tokens, seq.lm_mask));
      if (config.alpha_ul > 0.0)
        ul_terms.push_back(ul_token_loss(out, seq, config.alpha_ul));
    } else {
      cls_terms.push_back(class_loss(out, seq));
      if (config.delta > 0.0) norm_terms.push_back(label_norm_loss(out, seq));
    }
  }

  Tensor total;
  if (kind == BatchKind::lm) {
    Tensor lm = batch_mean(std::move(lm_terms));
    report.lm = lm.item();
    total = lm;
    if (!ul_terms.empty()) {
      Tensor ul = batch_mean(std::move(ul_terms));
      report.ul = ul.item();  // already alpha-scaled
      total = add(total, ul);
    }
  } else {
    Tensor cls = batch_mean(std::move(cls_terms));
    report.cls = cls.item();
    total = scale(cls, config.gamma_train);
    if (!norm_terms.empty()) {
      Tensor norm = batch_mean(std::move(norm_terms));
      report.norm = norm.item();
      total = add(total, scale(norm, config.delta));
    }
  }
  report.total = total.item();

  tape.backward(total);
  optimizer.step();
  return report;
}

double mean_validation_loss(const DirectorModel& model,
                            std::span<const LabeledSequence> valid) {
  if (valid.empty())
    throw std::invalid_argument("mean_validation_loss: empty validation set");
  double lm_total = 0.0, cls_total = 0.0;
  int64_t lm_count = 0, cls_count = 0;
  for (const LabeledSequence& seq : valid) {
    DualHeadOutput out = model.forward(seq.tokens);
    lm_total += lm_loss(out, seq.tokens, seq.lm_mask).item();
    ++lm_count;
    const bool labeled = std::any_of(seq.labels.begin(), seq.labels.end(),
                                     [](TokenLabel l) { return l != TokenLabel::unlabeled; });
    if (labeled) {
      cls_total += class_loss(out, seq).item();
      ++cls_count;
    }
  }
  const double lm = lm_total / static_cast<double>(lm_count);
  if (cls_count == 0) return lm;
  return 0.5 * (lm + cls_total / static_cast<double>(cls_count));
}

namespace {

// epoch-shuffled batch source over a fixed sequence pool
class BatchSource {
 public:
  BatchSource(const std::vector<LabeledSequence>& pool, int64_t batch_size, Rng& rng)
      : pool_(pool), batch_size_(batch_size), rng_(rng) {
    order_.resize(pool.size());
    for (size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    reshuffle();
  }

  Batch next() {
    std::vector<LabeledSequence> picked;
    for (int64_t i = 0; i < batch_size_; ++i) {
      if (cursor_ == order_.size()) {
        reshuffle();
        cursor_ = 0;
      }
      picked.push_back(pool_[order_[cursor_++]]);
    }
    return batcher(picked, batch_size_, Vocabulary::kPad).front();
  }

 private:
  void reshuffle() {
    for (size_t i = order_.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(rng_.uniform_int(static_cast<int64_t>(i)));
      std::swap(order_[i - 1], order_[j]);
    }
  }

  const std::vector<LabeledSequence>& pool_;
  int64_t batch_size_;
  Rng& rng_;
  std::vector<size_t> order_;
  size_t cursor_ = 0;
};

void check_finite(const StepReport& r, int64_t step) {
  const std::pair<const char*, double> parts[] = {
      {"lm_loss", r.lm}, {"class_loss", r.cls}, {"norm_loss", r.norm},
      {"ul_loss", r.ul}, {"total", r.total}};
  for (const auto& [name, v] : parts) {
    if (!std::isfinite(v))
      throw std::runtime_error("training diverged at step " + std::to_string(step) +
                               ": " + name + " is not finite");
  }
}

}  // namespace

TrainResult train_loop(DirectorModel model, const std::vector<LabeledSequence>& d_lm,
                       const std::vector<LabeledSequence>& d_class,
                       const std::vector<LabeledSequence>& valid,
                       const TrainConfig& config, const ValidationFn& external_metric,
                       const CheckpointFn& on_checkpoint) {
  config.validate();
  const bool frozen = model.frozen_core();
  const bool use_lm = !frozen && !d_lm.empty();
  const bool use_class = !d_class.empty();
  if (frozen && !use_class)
    throw std::invalid_argument("train_loop: frozen-core training needs labeled data");
  if (!frozen && d_lm.empty())
    throw std::invalid_argument("train_loop: d_lm must be non-empty");

  Optimizer optimizer(model.trainable_parameters(),
                      {.kind = config.optimizer, .learning_rate = config.learning_rate});
  Rng shuffle_rng(substream_seed(config.seed, "train-shuffle"));
  std::optional<BatchSource> lm_source, class_source;
  if (use_lm) lm_source.emplace(d_lm, config.batch_size, shuffle_rng);
  if (use_class) class_source.emplace(d_class, config.batch_size, shuffle_rng);

  TrainResult result;
  std::vector<uint8_t> best_bytes;
  bool has_best = false;
  int64_t evals_since_best = 0;
  const bool can_validate = external_metric != nullptr || !valid.empty();

  for (int64_t step = 1; step <= config.max_steps; ++step) {
    BatchKind kind;
    if (use_lm && use_class) {
      kind = (step % 2 == 1) ? BatchKind::lm : BatchKind::classifier;
    } else {
      kind = use_lm ? BatchKind::lm : BatchKind::classifier;
    }
    Batch batch = kind == BatchKind::lm ? lm_source->next() : class_source->next();
    StepReport report = train_step(model, batch, kind, config, optimizer);
    report.step = step;
    check_finite(report, step);

    HistoryRow row{.step = step, .kind = kind, .lm = report.lm, .cls = report.cls,
                   .norm = report.norm, .ul = report.ul, .val_metric = std::nullopt};

    if (can_validate && step % config.eval_every == 0) {
      const double metric = external_metric ? external_metric(model)
                                            : mean_validation_loss(model, valid);
      row.val_metric = metric;
      if (!has_best || metric < result.best_metric) {
        has_best = true;
        result.best_metric = metric;
        result.best_step = step;
        best_bytes = save_checkpoint(model);
        evals_since_best = 0;
      } else {
        ++evals_since_best;
      }
      if (on_checkpoint) on_checkpoint(model, step);
      result.history.push_back(row);
      result.steps_run = step;
      if (evals_since_best >= config.patience) break;
      continue;
    }
    result.history.push_back(row);
    result.steps_run = step;
  }

  result.last = model;
  result.best = has_best ? load_checkpoint(best_bytes) : model;
  if (!has_best) {
    result.best_step = result.steps_run;
    result.best_metric = std::numeric_limits<double>::quiet_NaN();
  }
  return result;
}

void write_history_csv(const std::string& path, std::span<const HistoryRow> rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open history file for writing: " + path);
  const std::vector<std::string> header = {"step", "kind",      "lm_loss", "class_loss",
                                           "norm_loss", "ul_loss", "val_metric"};
  write_csv_row(out, header);
  for (const HistoryRow& r : rows) {
    const std::vector<std::string> fields = {
        std::to_string(r.step),
        r.kind == BatchKind::lm ? "lm" : "class",
        format_double(r.lm),
        format_double(r.cls),
        format_double(r.norm),
        format_double(r.ul),
        r.val_metric ? format_double(*r.val_metric) : std::string(),
    };
    write_csv_row(out, fields);
  }
}

}  // namespace director
