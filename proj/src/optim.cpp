#include "infobottle/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace infobottle {

double global_grad_norm(const std::vector<Parameter*>& params) {
  double s = 0.0;
  for (const Parameter* p : params)
    if (p->trainable)
      for (double g : p->grad.data) s += g * g;
  return std::sqrt(s);
}

Optimizer::Optimizer(std::vector<Parameter*> params, OptimizerConfig config)
    : params_(std::move(params)), config_(std::move(config)) {
  if (config_.kind != "sgd" && config_.kind != "adam") throw std::invalid_argument("unknown optimizer " + config_.kind);
  if (!(config_.learning_rate > 0.0)) throw std::invalid_argument("learning rate must be positive");
  if (config_.kind == "adam") {
    for (const Parameter* p : params_) {
      m_.emplace_back(p->value.shape, 0.0);
      v_.emplace_back(p->value.shape, 0.0);
    }
  }
}

double Optimizer::step() {
  const double norm = global_grad_norm(params_);
  double scale = 1.0;
  clipped_ = config_.clip_norm > 0.0 && norm > config_.clip_norm;
  if (clipped_) scale = config_.clip_norm / norm;
  ++t_;
  const double lr = config_.learning_rate;
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Parameter& p = *params_[k];
    if (!p.trainable) continue;
    if (config_.kind == "sgd") {
      for (std::size_t i = 0; i < p.value.size(); ++i) p.value.data[i] -= lr * scale * p.grad.data[i];
      continue;
    }
    const double b1 = config_.beta1, b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    auto& m = m_[k].data;
    auto& v = v_[k].data;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = scale * p.grad.data[i];
      m[i] = b1 * m[i] + (1.0 - b1) * g;
      v[i] = b2 * v[i] + (1.0 - b2) * g * g;
      p.value.data[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config_.adam_eps);
    }
  }
  return norm;
}

void Optimizer::zero_grad() {
  for (Parameter* p : params_) p->zero_grad();
}

}  // namespace infobottle
