#include "amalgam/optimizer.hpp"

#include <algorithm>
#include <cmath>

#include "amalgam/error.hpp"

namespace amalgam {

OptimizerConfig OptimizerConfig::desk() { return {0.01, 0.9, 0.0, 0.0}; }

OptimizerConfig OptimizerConfig::paper() { return {0.005, 0.9, 4e-6, 0.9}; }

void validate(const OptimizerConfig& cfg) {
  if (!(cfg.lr >= 0.0)) throw ConfigError("optim.lr must be >= 0");
  if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0)) {
    throw ConfigError("optim.momentum must lie in [0, 1)");
  }
  if (!(cfg.weight_decay >= 0.0)) throw ConfigError("optim.weight_decay must be >= 0");
  if (!(cfg.poly_power >= 0.0)) throw ConfigError("optim.poly_power must be >= 0");
}

Sgd::Sgd(OptimizerConfig cfg, std::int64_t total_steps)
    : cfg_(cfg), total_(std::max<std::int64_t>(total_steps, 1)) {
  validate(cfg_);
}

double Sgd::current_lr() const {
  if (cfg_.poly_power <= 0.0) return cfg_.lr;
  const double frac = std::min(1.0, static_cast<double>(step_) / static_cast<double>(total_));
  return cfg_.lr * std::pow(1.0 - frac, cfg_.poly_power);
}

void Sgd::update(const std::string& name, Tensor& param, std::span<const double> grad) {
  if (grad.size() != param.size()) {
    throw DimensionError("optimizer: gradient of " + name + " has " +
                         std::to_string(grad.size()) + " elements, parameter " +
                         std::to_string(param.size()));
  }
  auto& v = velocity_[name];
  if (v.empty()) v.assign(param.size(), 0.0);
  const double lr = current_lr();
  auto p = param.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    v[i] = cfg_.momentum * v[i] + grad[i] + cfg_.weight_decay * p[i];
    p[i] -= lr * v[i];
  }
}

}  // namespace amalgam
