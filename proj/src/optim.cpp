#include "director/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace director {

Optimizer::Optimizer(std::vector<Tensor> params, OptimConfig config)
    : params_(std::move(params)), config_(config) {
  if (params_.empty()) throw std::invalid_argument("Optimizer: empty parameter list");
  for (const Tensor& p : params_) {
    if (!p.defined() || !p.requires_grad())
      throw std::invalid_argument("Optimizer: parameter without requires_grad");
  }
  if (config_.kind != OptimKind::sgd) {
    moment1_.reserve(params_.size());
    moment2_.reserve(params_.size());
    for (const Tensor& p : params_) {
      moment1_.emplace_back(static_cast<size_t>(p.numel()), 0.0);
      moment2_.emplace_back(static_cast<size_t>(p.numel()), 0.0);
    }
  }
}

void Optimizer::step() {
  for (const Tensor& p : params_) {
    if (!p.has_grad())
      throw std::invalid_argument(
          "Optimizer::step: parameter has no gradient; run backward first");
  }
  step_count_ += 1;
  const double lr = config_.learning_rate;

  switch (config_.kind) {
    case OptimKind::sgd: {
      for (Tensor& p : params_) {
        auto v = p.values_mut();
        auto g = p.grad();
        for (size_t i = 0; i < v.size(); ++i) v[i] -= lr * g[i];
      }
      break;
    }
    case OptimKind::adam: {
      const double b1 = config_.beta1, b2 = config_.beta2;
      const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step_count_));
      const double bc2 = 1.0 - std::pow(b2, static_cast<double>(step_count_));
      for (size_t k = 0; k < params_.size(); ++k) {
        auto v = params_[k].values_mut();
        auto g = params_[k].grad();
        auto& m = moment1_[k];
        auto& s = moment2_[k];
        for (size_t i = 0; i < v.size(); ++i) {
          m[i] = b1 * m[i] + (1.0 - b1) * g[i];
          s[i] = b2 * s[i] + (1.0 - b2) * g[i] * g[i];
          const double mhat = m[i] / bc1;
          const double shat = s[i] / bc2;
          v[i] -= lr * mhat / (std::sqrt(shat) + config_.epsilon);
        }
      }
      break;
    }
    case OptimKind::adamax: {
      const double b1 = config_.beta1, b2 = config_.beta2;
      const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step_count_));
      for (size_t k = 0; k < params_.size(); ++k) {
        auto v = params_[k].values_mut();
        auto g = params_[k].grad();
        auto& m = moment1_[k];
        auto& u = moment2_[k];  // infinity-norm accumulator
        for (size_t i = 0; i < v.size(); ++i) {
          m[i] = b1 * m[i] + (1.0 - b1) * g[i];
          u[i] = std::max(b2 * u[i], std::abs(g[i]));
          v[i] -= lr * (m[i] / bc1) / (u[i] + config_.epsilon);
        }
      }
      break;
    }
  }

  for (Tensor& p : params_) p.zero_grad();
}

}  // namespace director
