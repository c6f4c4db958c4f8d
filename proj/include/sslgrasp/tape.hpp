#pragma once

#include <functional>
#include <vector>

#include "sslgrasp/tensor.hpp"

namespace sslgrasp::ad {

using VarId = int;

// Reverse-mode tape. Operations append nodes; backward() replays the
// recorded closures in reverse order and accumulates gradients into every
// node that (transitively) depends on a requires_grad leaf.
//
// Single-threaded by contract: node order is creation order, gradient
// accumulation order is fixed, so runs are bit-reproducible.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  VarId leaf(Tensor value, bool requires_grad = false);
  VarId constant(Tensor value) { return leaf(std::move(value), false); }
  VarId constant_scalar(double x) { return leaf(Tensor::scalar(x), false); }

  // Elementwise (shapes must match exactly).
  VarId add(VarId a, VarId b);
  VarId sub(VarId a, VarId b);
  VarId mul(VarId a, VarId b);
  VarId neg(VarId a);
  VarId add_scalar(VarId a, double c);
  VarId mul_scalar(VarId a, double c);
  VarId relu(VarId a);
  VarId sigmoid(VarId a);
  VarId tanh(VarId a);
  VarId exp(VarId a);
  VarId log(VarId a);
  VarId softplus(VarId a);
  VarId square(VarId a);
  VarId clamp(VarId a, double lo, double hi);

  // Per-pixel binary cross entropy with no reduction. Predictions are
  // clamped into [1e-7, 1 - 1e-7] before the logs; targets must be 0/1
  // and must not require gradients.
  VarId bce_map(VarId pred, VarId target);

  // Structure.
  VarId concat_channels(VarId a, VarId b);         // (Ca,H,W)+(Cb,H,W) -> (Ca+Cb,H,W)
  VarId slice_channels(VarId a, int from, int n);  // (C,H,W) -> (n,H,W)
  VarId sum_channels(VarId a);                     // (C,H,W) -> (H,W)
  VarId pick_pixel(VarId a, int h, int w);         // (H,W) -> scalar
  VarId sum(VarId a);                              // any -> scalar

  // 2-D convolution, stride 1, zero padding chosen to preserve H and W.
  // x: (Cin,H,W), w: (Cout,Cin,kh,kw) with odd kh/kw, b: (Cout).
  VarId conv2d(VarId x, VarId w, VarId b);

  const Tensor& value(VarId id) const { return nodes_[id].value; }
  const Tensor& grad(VarId id) const { return nodes_[id].grad; }
  bool requires_grad(VarId id) const { return nodes_[id].requires_grad; }
  double scalar_value(VarId id) const { return nodes_[id].value.v[0]; }
  std::size_t node_count() const { return nodes_.size(); }

  // Accumulates d(loss)/d(node) into every node's grad buffer. loss must
  // be scalar. Successive calls accumulate; zero_grad() resets.
  void backward(VarId loss);
  void zero_grad();

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::function<void(Tape&)> back;
    const char* op = "leaf";
  };

  std::vector<Node> nodes_;

  VarId push(Tensor value, bool rg, const char* op, std::function<void(Tape&)> back);
  void ensure_finite(const Tensor& t, const char* op) const;
  Tensor& grad_mut(VarId id) { return nodes_[id].grad; }

  friend struct TapeAccess;
};

// Per-pixel diagonal Gaussian log density over the leading (channel) axis,
// composed from tape primitives: action/mean/log_std are (D,H,W), output is
// (H,W). log_std is clamped to [-10, 2]. With squash enabled the action is
// interpreted as the pre-tanh sample and the tanh change-of-variable
// correction is subtracted (stable softplus form).
VarId gaussian_logprob(Tape& t, VarId action, VarId mean, VarId log_std, bool squash);

// ---- plain forward kernels (shared by tape ops and tape-free paths) ----

Tensor conv2d_forward(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor relu_forward(const Tensor& x);
Tensor sigmoid_forward(const Tensor& x);
Tensor tanh_forward(const Tensor& x);
Tensor clamp_forward(const Tensor& x, double lo, double hi);
Tensor concat_channels_forward(const Tensor& a, const Tensor& b);
Tensor bce_map_forward(const Tensor& pred, const Tensor& target);

double stable_sigmoid(double x);

}  // namespace sslgrasp::ad
