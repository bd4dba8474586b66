#pragma once

#include <vector>

#include "director/tensor.hpp"

namespace director {

enum class OptimKind { sgd, adam, adamax };

struct OptimConfig {
  OptimKind kind = OptimKind::adam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Gradient-descent update rules over a fixed parameter list. step() consumes
/// the accumulated gradients and zeroes them afterwards.
class Optimizer {
 public:
  Optimizer(std::vector<Tensor> params, OptimConfig config);

  /// One in-place update. Every parameter must have a populated gradient
  /// buffer; a parameter that never entered the graph is an error.
  void step();

  int64_t step_count() const { return step_count_; }
  const OptimConfig& config() const { return config_; }
  size_t param_count() const { return params_.size(); }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> moment1_;
  std::vector<std::vector<double>> moment2_;
  OptimConfig config_;
  int64_t step_count_ = 0;
};

}  // namespace director
