#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "amalgam/tensor.hpp"

namespace amalgam {

struct OptimizerConfig {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0;
  double poly_power = 0.0;  // 0 disables the poly schedule

  // lr 0.01, constant, no decay.
  static OptimizerConfig desk();
  // lr 0.005, poly 0.9, weight decay 4e-6.
  static OptimizerConfig paper();
};

void validate(const OptimizerConfig& cfg);

// SGD with momentum: v = mu * v + (g + wd * p); p -= lr_t * v, where
// lr_t = lr * (1 - t / total)^power.
class Sgd {
 public:
  Sgd(OptimizerConfig cfg, std::int64_t total_steps);

  double current_lr() const;
  std::int64_t step_count() const { return step_; }

  void update(const std::string& name, Tensor& param, std::span<const double> grad);
  // Advances the schedule; call once per step after all updates.
  void finish_step() { ++step_; }

 private:
  OptimizerConfig cfg_;
  std::int64_t total_;
  std::int64_t step_ = 0;
  std::map<std::string, std::vector<double>> velocity_;
};

}  // namespace amalgam
