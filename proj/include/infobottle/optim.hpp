#pragma once

#include <string>
#include <vector>

#include "infobottle/tape.hpp"

namespace infobottle {

struct OptimizerConfig {
  std::string kind = "sgd";  // sgd | adam
  double learning_rate = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 5.0;  // <= 0 disables clipping
};

// Applies p.grad to every trainable parameter, then leaves grads untouched.
class Optimizer {
 public:
  Optimizer(std::vector<Parameter*> params, OptimizerConfig config);

  // Returns the pre-clip global gradient norm; clipped() reports whether
  // the last step rescaled.
  double step();
  bool clipped() const { return clipped_; }
  void zero_grad();
  const OptimizerConfig& config() const { return config_; }

 private:
  std::vector<Parameter*> params_;
  OptimizerConfig config_;
  std::vector<Tensor> m_, v_;
  std::size_t t_ = 0;
  bool clipped_ = false;
};

double global_grad_norm(const std::vector<Parameter*>& params);

}  // namespace infobottle
