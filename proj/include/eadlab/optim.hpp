#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "eadlab/error.hpp"
#include "eadlab/tensor.hpp"

namespace eadlab {

struct OptimizerConfig {
  enum class Kind { sgd, adam };
  Kind kind = Kind::adam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Updates parameters in place from the grads left by Tape::backward. Adam
// moments are kept per parameter position, so pass the same parameter list
// in the same order on every step.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config) : config_(config) {}

  const OptimizerConfig& config() const { return config_; }
  std::size_t steps() const { return steps_; }

  void step(std::span<Tensor> params) {
    if (first_moment_.empty()) {
      for (const auto& p : params) {
        first_moment_.emplace_back(p.size(), 0.0);
        second_moment_.emplace_back(p.size(), 0.0);
      }
    }
    if (first_moment_.size() != params.size()) throw ContractError("Optimizer::step: parameter list changed");
    ++steps_;
    const double t = static_cast<double>(steps_);
    const double c1 = 1.0 - std::pow(config_.beta1, t);
    const double c2 = 1.0 - std::pow(config_.beta2, t);
    for (std::size_t k = 0; k < params.size(); ++k) {
      Tensor& p = params[k];
      if (first_moment_[k].size() != p.size()) throw ContractError("Optimizer::step: parameter shape changed");
      if (!p.has_grad()) continue;
      auto g = p.grad();
      auto w = p.mutable_data();
      if (config_.kind == OptimizerConfig::Kind::sgd) {
        for (std::size_t i = 0; i < w.size(); ++i) w[i] -= config_.lr * g[i];
        continue;
      }
      auto& m = first_moment_[k];
      auto& v = second_moment_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
        v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
        w[i] -= config_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config_.eps);
      }
    }
  }

 private:
  OptimizerConfig config_;
  std::vector<std::vector<double>> first_moment_;
  std::vector<std::vector<double>> second_moment_;
  std::size_t steps_ = 0;
};

}  // namespace eadlab
