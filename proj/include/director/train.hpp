#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "director/data.hpp"
#include "director/losses.hpp"
#include "director/model.hpp"
#include "director/optim.hpp"

namespace director {

enum class BatchKind { lm, classifier };
enum class ValidationMetric { mean_loss, gen_f1, class_acc };

struct TrainConfig {
  double gamma_train = 0.2;  // weight of the classifier loss
  double delta = 0.0;        // explicit label normalization coefficient
  double alpha_ul = 0.0;     // token-level unlikelihood weight
  double learning_rate = 1e-3;
  int64_t batch_size = 8;
  int64_t max_steps = 1000;
  int64_t patience = 50;    // evaluations without improvement before stopping
  int64_t eval_every = 25;  // steps between validation passes
  ValidationMetric validation_metric = ValidationMetric::mean_loss;
  OptimKind optimizer = OptimKind::adam;
  uint64_t seed = 0;

  void validate() const;
};

struct StepReport {
  int64_t step = 0;
  BatchKind kind = BatchKind::lm;
  double lm = 0.0;
  double cls = 0.0;
  double norm = 0.0;
  double ul = 0.0;
  double total = 0.0;
};

struct HistoryRow {
  int64_t step = 0;
  BatchKind kind = BatchKind::lm;
  double lm = 0.0;
  double cls = 0.0;
  double norm = 0.0;
  double ul = 0.0;
  std::optional<double> val_metric;
};

/// One optimizer update on one batch. LM batches optimize the LM loss plus
/// UL-tok when enabled and negative labels are present; classifier batches
/// optimize gamma * class loss + delta * label norm. Rejects LM batches on a
/// frozen-core model (nothing there is trainable).
StepReport train_step(DirectorModel& model, const Batch& batch, BatchKind kind,
                      const TrainConfig& config, Optimizer& optimizer);

struct TrainResult {
  DirectorModel best;
  DirectorModel last;
  std::vector<HistoryRow> history;
  int64_t best_step = 0;
  double best_metric = 0.0;
  int64_t steps_run = 0;
};

/// External validation metric; must return a value where lower is better.
using ValidationFn = std::function<double(const DirectorModel&)>;
/// Invoked at every validation point; used for periodic checkpointing.
using CheckpointFn = std::function<void(const DirectorModel&, int64_t step)>;

/// Alternates LM and classifier batches 1:1 while both sources are non-empty,
/// evaluates on a fixed schedule, early-stops on patience, and returns the
/// best-validation checkpoint plus the full per-step history. Aborts with a
/// diagnostic naming the step and loss component if a loss goes non-finite.
TrainResult train_loop(DirectorModel model, const std::vector<LabeledSequence>& d_lm,
                       const std::vector<LabeledSequence>& d_class,
                       const std::vector<LabeledSequence>& valid,
                       const TrainConfig& config,
                       const ValidationFn& external_metric = nullptr,
                       const CheckpointFn& on_checkpoint = nullptr);

/// Unweighted mean of the validation LM loss and (when labels exist) the
/// validation classifier loss.
double mean_validation_loss(const DirectorModel& model,
                            std::span<const LabeledSequence> valid);

void write_history_csv(const std::string& path, std::span<const HistoryRow> rows);

}  // namespace director
