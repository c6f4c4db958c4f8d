#pragma once

#include <vector>

#include "sslgrasp/tensor.hpp"

namespace sslgrasp::ad {

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;  // decoupled
};

// Decoupled-weight-decay Adam over a fixed list of parameter tensors.
// Moment buffers mirror parameter shapes; the step counter is shared.
class AdamState {
 public:
  AdamState() = default;
  AdamState(const AdamConfig& cfg, const std::vector<const Tensor*>& params);

  // params and grads must match the shapes this state was built with.
  void step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads);

  long long step_count() const { return step_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  AdamConfig cfg_;
  std::vector<Tensor> m_, v_;
  long long step_ = 0;
};

}  // namespace sslgrasp::ad
