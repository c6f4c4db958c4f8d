#include "sslgrasp/adam.hpp"

#include <cmath>

namespace sslgrasp::ad {

AdamState::AdamState(const AdamConfig& cfg, const std::vector<const Tensor*>& params)
    : cfg_(cfg) {
  m_.reserve(params.size());
  v_.reserve(params.size());
  for (const Tensor* p : params) {
    m_.emplace_back(p->shape, 0.0);
    v_.emplace_back(p->shape, 0.0);
  }
}

void AdamState::step(const std::vector<Tensor*>& params,
                     const std::vector<const Tensor*>& grads) {
  if (params.size() != m_.size() || grads.size() != m_.size())
    throw UsageError("adam_step: parameter list size mismatch");
  ++step_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = *grads[i];
    if (!p.same_shape(m_[i]) || !g.same_shape(m_[i]))
      throw UsageError("adam_step: shape mismatch");
    auto& m = m_[i].v;
    auto& v = v_[i].v;
    for (std::size_t k = 0; k < p.v.size(); ++k) {
      m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g.v[k];
      v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g.v[k] * g.v[k];
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      p.v[k] -= cfg_.learning_rate *
                (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * p.v[k]);
    }
  }
}

}  // namespace sslgrasp::ad
