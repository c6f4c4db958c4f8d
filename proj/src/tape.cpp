#include "sslgrasp/tape.hpp"

#include <cmath>

namespace sslgrasp::ad {

namespace {
constexpr double kBceEps = 1e-7;
constexpr double kLn2Pi = 1.8378770664093454835606594728112;
constexpr double kLn2 = 0.69314718055994530941723212145818;

double softplus_scalar(double x) {
  if (x > 30.0) return x;
  if (x < -30.0) return std::exp(x);
  return std::log1p(std::exp(x));
}
}  // namespace

double stable_sigmoid(double x) {
  if (x >= 0.0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void Tape::ensure_finite(const Tensor& t, const char* op) const {
  for (double x : t.v)
    if (!std::isfinite(x)) throw NumericError(op);
}

VarId Tape::push(Tensor value, bool rg, const char* op, std::function<void(Tape&)> back) {
  ensure_finite(value, op);
  Node n;
  n.grad = Tensor(value.shape, 0.0);
  n.value = std::move(value);
  n.requires_grad = rg;
  n.back = std::move(back);
  n.op = op;
  nodes_.push_back(std::move(n));
  return static_cast<VarId>(nodes_.size()) - 1;
}

VarId Tape::leaf(Tensor value, bool requires_grad) {
  return push(std::move(value), requires_grad, "leaf", nullptr);
}

void Tape::zero_grad() {
  for (auto& n : nodes_) std::fill(n.grad.v.begin(), n.grad.v.end(), 0.0);
}

void Tape::backward(VarId loss) {
  if (!nodes_[loss].value.is_scalar()) throw UsageError("backward: loss must be scalar");
  nodes_[loss].grad.v[0] += 1.0;
  for (VarId i = loss; i >= 0; --i) {
    if (nodes_[i].requires_grad && nodes_[i].back) nodes_[i].back(*this);
  }
}

// ---------------- elementwise ----------------

VarId Tape::add(VarId a, VarId b) {
  require_same_shape(nodes_[a].value, nodes_[b].value, "add");
  Tensor out = nodes_[a].value;
  const auto& bv = nodes_[b].value.v;
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] += bv[i];
  const bool rg = nodes_[a].requires_grad || nodes_[b].requires_grad;
  VarId id = push(std::move(out), rg, "add", nullptr);
  if (rg)
    nodes_[id].back = [a, b, id](Tape& t) {
      const auto& g = t.nodes_[id].grad.v;
      if (t.nodes_[a].requires_grad) {
        auto& ga = t.nodes_[a].grad.v;
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (t.nodes_[b].requires_grad) {
        auto& gb = t.nodes_[b].grad.v;
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    };
  return id;
}

VarId Tape::sub(VarId a, VarId b) {
  require_same_shape(nodes_[a].value, nodes_[b].value, "sub");
  Tensor out = nodes_[a].value;
  const auto& bv = nodes_[b].value.v;
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] -= bv[i];
  const bool rg = nodes_[a].requires_grad || nodes_[b].requires_grad;
  VarId id = push(std::move(out), rg, "sub", nullptr);
  if (rg)
    nodes_[id].back = [a, b, id](Tape& t) {
      const auto& g = t.nodes_[id].grad.v;
      if (t.nodes_[a].requires_grad) {
        auto& ga = t.nodes_[a].grad.v;
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (t.nodes_[b].requires_grad) {
        auto& gb = t.nodes_[b].grad.v;
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    };
  return id;
}

VarId Tape::mul(VarId a, VarId b) {
  require_same_shape(nodes_[a].value, nodes_[b].value, "mul");
  Tensor out = nodes_[a].value;
  const auto& bv = nodes_[b].value.v;
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] *= bv[i];
  const bool rg = nodes_[a].requires_grad || nodes_[b].requires_grad;
  VarId id = push(std::move(out), rg, "mul", nullptr);
  if (rg)
    nodes_[id].back = [a, b, id](Tape& t) {
      const auto& g = t.nodes_[id].grad.v;
      if (t.nodes_[a].requires_grad) {
        auto& ga = t.nodes_[a].grad.v;
        const auto& bvv = t.nodes_[b].value.v;
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bvv[i];
      }
      if (t.nodes_[b].requires_grad) {
        auto& gb = t.nodes_[b].grad.v;
        const auto& avv = t.nodes_[a].value.v;
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * avv[i];
      }
    };
  return id;
}

VarId Tape::neg(VarId a) { return mul_scalar(a, -1.0); }

VarId Tape::add_scalar(VarId a, double c) {
  Tensor out = nodes_[a].value;
  for (double& x : out.v) x += c;
  const bool rg = nodes_[a].requires_grad;
  VarId id = push(std::move(out), rg, "add_scalar", nullptr);
  if (rg)
    nodes_[id].back = [a, id](Tape& t) {
      const auto& g = t.nodes_[id].grad.v;
      auto& ga = t.nodes_[a].grad.v;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    };
  return id;
}

VarId Tape::mul_scalar(VarId a, double c) {
  Tensor out = nodes_[a].value;
  for (double& x : out.v) x *= c;
  const bool rg = nodes_[a].requires_grad;
  VarId id = push(std::move(out), rg, "mul_scalar", nullptr);
  if (rg)
    nodes_[id].back = [a, id, c](Tape& t) {
      const auto& g = t.nodes_[id].grad.v;
      auto& ga = t.nodes_[a].grad.v;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
    };
  return id;
}

VarId Tape::relu(VarId a) {
  Tensor out = relu_forward(nodes_[a].value);
  const bool rg = nodes_[a].requires_grad;
  VarId id = push(std::move(out), rg, "relu", nullptr);
  if (rg)
    nodes_[id].back = [a, id](Tape& t) {
      const auto& g = t.nodes_[id].grad.v;
      const auto& x = t.nodes_[a].value.v;
      auto& ga = t.nodes_[a].grad.v;
      for (std::size_t i = 0; i < g.size(); ++i)
        if (x[i] > 0.0) ga[i] += g[i];
    };
  return id;
}

VarId Tape::sigmoid(VarId a) {
  Tensor out = sigmoid_forward(nodes_[a].value);
  const bool rg = nodes_[a].requires_grad;
  VarId id = push(std::move(out), rg, "sigmoid", nullptr);
  if (rg)
    nodes_[id].back = [a, id](Tape& t) {
      const auto& g = t.nodes_[id].grad.v;
      const auto& y = t.nodes_[id].value.v;
      auto& ga = t.nodes_[a].grad.v;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
    };
  return id;
}

VarId Tape::tanh(VarId a) {
  Tensor out = tanh_forward(nodes_[a].value);
  const bool rg = nodes_[a].requires_grad;
  VarId id = push(std::move(out), rg, "tanh", nullptr);
  if (rg)
    nodes_[id].back = [a, id](Tape& t) {
      const auto& g = t.nodes_[id].grad.v;
      const auto& y = t.nodes_[id].value.v;
      auto& ga = t.nodes_[a].grad.v;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - y[i] * y[i]);
    };
  return id;
}

VarId Tape::exp(VarId a) {
  Tensor out = nodes_[a].value;
  for (double& x : out.v) x = std::exp(x);
  const bool rg = nodes_[a].requires_grad;
  VarId id = push(std::move(out), rg, "exp", nullptr);
  if (rg)
    nodes_[id].back = [a, id](Tape& t) {
      const auto& g = t.nodes_[id].grad.v;
      const auto& y = t.nodes_[id].value.v;
      auto& ga = t.nodes_[a].grad.v;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
    };
  return id;
}

VarId Tape::log(VarId a) {
  Tensor out = nodes_[a].value;
  for (double& x : out.v) x = std::log(x);
  const bool rg = nodes_[a].requires_grad;
  VarId id = push(std::move(out), rg, "log", nullptr);
  if (rg)
    nodes_[id].back = [a, id](Tape& t) {
      const auto& g = t.nodes_[id].grad.v;
      const auto& x = t.nodes_[a].value.v;
      auto& ga = t.nodes_[a].grad.v;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / x[i];
    };
  return id;
}

VarId Tape::softplus(VarId a) {
  Tensor out = nodes_[a].value;
  for (double& x : out.v) x = softplus_scalar(x);
  const bool rg = nodes_[a].requires_grad;
  VarId id = push(std::move(out), rg, "softplus", nullptr);
  if (rg)
    nodes_[id].back = [a, id](Tape& t) {
      const auto& g = t.nodes_[id].grad.v;
      const auto& x = t.nodes_[a].value.v;
      auto& ga = t.nodes_[a].grad.v;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * stable_sigmoid(x[i]);
    };
  return id;
}

VarId Tape::square(VarId a) {
  Tensor out = nodes_[a].value;
  for (double& x : out.v) x *= x;
  const bool rg = nodes_[a].requires_grad;
  VarId id = push(std::move(out), rg, "square", nullptr);
  if (rg)
    nodes_[id].back = [a, id](Tape& t) {
      const auto& g = t.nodes_[id].grad.v;
      const auto& x = t.nodes_[a].value.v;
      auto& ga = t.nodes_[a].grad.v;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += 2.0 * x[i] * g[i];
    };
  return id;
}

VarId Tape::clamp(VarId a, double lo, double hi) {
  Tensor out = clamp_forward(nodes_[a].value, lo, hi);
  const bool rg = nodes_[a].requires_grad;
  VarId id = push(std::move(out), rg, "clamp", nullptr);
  if (rg)
    nodes_[id].back = [a, id, lo, hi](Tape& t) {
      const auto& g = t.nodes_[id].grad.v;
      const auto& x = t.nodes_[a].value.v;
      auto& ga = t.nodes_[a].grad.v;
      for (std::size_t i = 0; i < g.size(); ++i)
        if (x[i] >= lo && x[i] <= hi) ga[i] += g[i];
    };
  return id;
}

VarId Tape::bce_map(VarId pred, VarId target) {
  require_same_shape(nodes_[pred].value, nodes_[target].value, "bce_map");
  if (nodes_[target].requires_grad)
    throw UsageError("bce_map: target must not require gradients");
  const auto& tv = nodes_[target].value.v;
  for (double y : tv)
    if (y != 0.0 && y != 1.0) throw UsageError("bce_map: target values must be 0 or 1");
  Tensor out = bce_map_forward(nodes_[pred].value, nodes_[target].value);
  const bool rg = nodes_[pred].requires_grad;
  VarId id = push(std::move(out), rg, "bce_map", nullptr);
  if (rg)
    nodes_[id].back = [pred, target, id](Tape& t) {
      const auto& g = t.nodes_[id].grad.v;
      const auto& p = t.nodes_[pred].value.v;
      const auto& y = t.nodes_[target].value.v;
      auto& gp = t.nodes_[pred].grad.v;
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (p[i] <= kBceEps || p[i] >= 1.0 - kBceEps) continue;  // clamp-saturated
        gp[i] += g[i] * (-y[i] / p[i] + (1.0 - y[i]) / (1.0 - p[i]));
      }
    };
  return id;
}

// ---------------- structure ----------------

VarId Tape::concat_channels(VarId a, VarId b) {
  const Tensor& ta = nodes_[a].value;
  const Tensor& tb = nodes_[b].value;
  if (ta.rank() != 3 || tb.rank() != 3 || ta.shape[1] != tb.shape[1] ||
      ta.shape[2] != tb.shape[2])
    throw ConfigError("concat_channels: incompatible shapes " + ta.shape_str() + " vs " +
                      tb.shape_str());
  Tensor out({ta.shape[0] + tb.shape[0], ta.shape[1], ta.shape[2]});
  std::copy(ta.v.begin(), ta.v.end(), out.v.begin());
  std::copy(tb.v.begin(), tb.v.end(), out.v.begin() + ta.v.size());
  const bool rg = nodes_[a].requires_grad || nodes_[b].requires_grad;
  VarId id = push(std::move(out), rg, "concat_channels", nullptr);
  if (rg)
    nodes_[id].back = [a, b, id](Tape& t) {
      const auto& g = t.nodes_[id].grad.v;
      const std::size_t na = t.nodes_[a].value.v.size();
      if (t.nodes_[a].requires_grad) {
        auto& ga = t.nodes_[a].grad.v;
        for (std::size_t i = 0; i < na; ++i) ga[i] += g[i];
      }
      if (t.nodes_[b].requires_grad) {
        auto& gb = t.nodes_[b].grad.v;
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[na + i];
      }
    };
  return id;
}

VarId Tape::slice_channels(VarId a, int from, int n) {
  const Tensor& ta = nodes_[a].value;
  if (ta.rank() != 3 || from < 0 || n <= 0 || from + n > ta.shape[0])
    throw ConfigError("slice_channels: bad slice");
  const std::size_t plane = static_cast<std::size_t>(ta.shape[1]) * ta.shape[2];
  Tensor out({n, ta.shape[1], ta.shape[2]});
  std::copy(ta.v.begin() + from * plane, ta.v.begin() + (from + n) * plane, out.v.begin());
  const bool rg = nodes_[a].requires_grad;
  VarId id = push(std::move(out), rg, "slice_channels", nullptr);
  if (rg)
    nodes_[id].back = [a, id, from, plane](Tape& t) {
      const auto& g = t.nodes_[id].grad.v;
      auto& ga = t.nodes_[a].grad.v;
      for (std::size_t i = 0; i < g.size(); ++i) ga[from * plane + i] += g[i];
    };
  return id;
}

VarId Tape::sum_channels(VarId a) {
  const Tensor& ta = nodes_[a].value;
  if (ta.rank() != 3) throw ConfigError("sum_channels: rank-3 input required");
  const int C = ta.shape[0], H = ta.shape[1], W = ta.shape[2];
  Tensor out({H, W});
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  for (int c = 0; c < C; ++c)
    for (std::size_t i = 0; i < plane; ++i) out.v[i] += ta.v[c * plane + i];
  const bool rg = nodes_[a].requires_grad;
  VarId id = push(std::move(out), rg, "sum_channels", nullptr);
  if (rg)
    nodes_[id].back = [a, id, C, plane](Tape& t) {
      const auto& g = t.nodes_[id].grad.v;
      auto& ga = t.nodes_[a].grad.v;
      for (int c = 0; c < C; ++c)
        for (std::size_t i = 0; i < plane; ++i) ga[c * plane + i] += g[i];
    };
  return id;
}

VarId Tape::pick_pixel(VarId a, int h, int w) {
  const Tensor& ta = nodes_[a].value;
  if (ta.rank() != 2) throw ConfigError("pick_pixel: rank-2 input required");
  if (h < 0 || w < 0 || h >= ta.shape[0] || w >= ta.shape[1])
    throw UsageError("pick_pixel: out of bounds");
  const std::size_t idx = static_cast<std::size_t>(h) * ta.shape[1] + w;
  Tensor out = Tensor::scalar(ta.v[idx]);
  const bool rg = nodes_[a].requires_grad;
  VarId id = push(std::move(out), rg, "pick_pixel", nullptr);
  if (rg)
    nodes_[id].back = [a, id, idx](Tape& t) {
      t.nodes_[a].grad.v[idx] += t.nodes_[id].grad.v[0];
    };
  return id;
}

VarId Tape::sum(VarId a) {
  const Tensor& ta = nodes_[a].value;
  double s = 0.0;
  for (double x : ta.v) s += x;
  const bool rg = nodes_[a].requires_grad;
  VarId id = push(Tensor::scalar(s), rg, "sum", nullptr);
  if (rg)
    nodes_[id].back = [a, id](Tape& t) {
      const double g = t.nodes_[id].grad.v[0];
      auto& ga = t.nodes_[a].grad.v;
      for (double& x : ga) x += g;
    };
  return id;
}

VarId Tape::conv2d(VarId x, VarId w, VarId b) {
  Tensor out = conv2d_forward(nodes_[x].value, nodes_[w].value, nodes_[b].value);
  const bool rg =
      nodes_[x].requires_grad || nodes_[w].requires_grad || nodes_[b].requires_grad;
  VarId id = push(std::move(out), rg, "conv2d", nullptr);
  if (rg)
    nodes_[id].back = [x, w, b, id](Tape& t) {
      const Tensor& xv = t.nodes_[x].value;
      const Tensor& wv = t.nodes_[w].value;
      const Tensor& go = t.nodes_[id].grad;
      const int Cin = xv.shape[0], H = xv.shape[1], W = xv.shape[2];
      const int Cout = wv.shape[0], kh = wv.shape[2], kw = wv.shape[3];
      const int ph = (kh - 1) / 2, pw = (kw - 1) / 2;
      const bool need_x = t.nodes_[x].requires_grad;
      const bool need_w = t.nodes_[w].requires_grad;
      const bool need_b = t.nodes_[b].requires_grad;
      auto widx = [&](int co, int ci, int ky, int kx) {
        return ((static_cast<std::size_t>(co) * Cin + ci) * kh + ky) * kw + kx;
      };
      for (int co = 0; co < Cout; ++co) {
        for (int h = 0; h < H; ++h) {
          for (int wcol = 0; wcol < W; ++wcol) {
            const double g = go.at3(co, h, wcol);
            if (g == 0.0) continue;
            if (need_b) t.nodes_[b].grad.v[co] += g;
            for (int ci = 0; ci < Cin; ++ci) {
              for (int ky = 0; ky < kh; ++ky) {
                const int ih = h + ky - ph;
                if (ih < 0 || ih >= H) continue;
                for (int kx = 0; kx < kw; ++kx) {
                  const int iw = wcol + kx - pw;
                  if (iw < 0 || iw >= W) continue;
                  if (need_w)
                    t.nodes_[w].grad.v[widx(co, ci, ky, kx)] += g * xv.at3(ci, ih, iw);
                  if (need_x)
                    t.nodes_[x].grad.at3(ci, ih, iw) += g * wv.v[widx(co, ci, ky, kx)];
                }
              }
            }
          }
        }
      }
    };
  return id;
}

// ---------------- composite ----------------

VarId gaussian_logprob(Tape& t, VarId action, VarId mean, VarId log_std, bool squash) {
  const Tensor& av = t.value(action);
  require_same_shape(av, t.value(mean), "gaussian_logprob");
  require_same_shape(av, t.value(log_std), "gaussian_logprob");
  if (av.rank() != 3) throw ConfigError("gaussian_logprob: rank-3 inputs required");

  VarId ls = t.clamp(log_std, -10.0, 2.0);
  VarId inv_std = t.exp(t.neg(ls));
  VarId z = t.mul(t.sub(action, mean), inv_std);
  VarId per_dim =
      t.add_scalar(t.sub(t.mul_scalar(t.square(z), -0.5), ls), -0.5 * kLn2Pi);
  VarId ll = t.sum_channels(per_dim);
  if (squash) {
    // log(1 - tanh(u)^2) = 2 (ln 2 - u - softplus(-2u))
    VarId corr_dim = t.mul_scalar(
        t.sub(t.add_scalar(t.neg(action), kLn2), t.softplus(t.mul_scalar(action, -2.0))),
        2.0);
    ll = t.sub(ll, t.sum_channels(corr_dim));
  }
  return ll;
}

// ---------------- plain kernels ----------------

Tensor conv2d_forward(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 3 || w.rank() != 4 || b.rank() != 1)
    throw ConfigError("conv2d: expected x (Cin,H,W), w (Cout,Cin,kh,kw), b (Cout)");
  const int Cin = x.shape[0], H = x.shape[1], W = x.shape[2];
  const int Cout = w.shape[0], kh = w.shape[2], kw = w.shape[3];
  if (w.shape[1] != Cin) throw ConfigError("conv2d: channel mismatch");
  if (b.shape[0] != Cout) throw ConfigError("conv2d: bias size mismatch");
  if (kh % 2 == 0 || kw % 2 == 0) throw ConfigError("conv2d: kernel dims must be odd");
  if (kh > 2 * H + 1 || kw > 2 * W + 1) throw ConfigError("conv2d: kernel exceeds input");
  const int ph = (kh - 1) / 2, pw = (kw - 1) / 2;
  Tensor out({Cout, H, W});
  for (int co = 0; co < Cout; ++co) {
    for (int h = 0; h < H; ++h) {
      for (int wc = 0; wc < W; ++wc) {
        double acc = b.v[co];
        for (int ci = 0; ci < Cin; ++ci) {
          for (int ky = 0; ky < kh; ++ky) {
            const int ih = h + ky - ph;
            if (ih < 0 || ih >= H) continue;
            const double* xrow = &x.v[(static_cast<std::size_t>(ci) * H + ih) * W];
            const double* wrow =
                &w.v[((static_cast<std::size_t>(co) * Cin + ci) * kh + ky) * kw];
            for (int kx = 0; kx < kw; ++kx) {
              const int iw = wc + kx - pw;
              if (iw < 0 || iw >= W) continue;
              acc += wrow[kx] * xrow[iw];
            }
          }
        }
        out.at3(co, h, wc) = acc;
      }
    }
  }
  return out;
}

Tensor relu_forward(const Tensor& x) {
  Tensor out = x;
  for (double& v : out.v)
    if (v < 0.0) v = 0.0;
  return out;
}

Tensor sigmoid_forward(const Tensor& x) {
  Tensor out = x;
  for (double& v : out.v) v = stable_sigmoid(v);
  return out;
}

Tensor tanh_forward(const Tensor& x) {
  Tensor out = x;
  for (double& v : out.v) v = std::tanh(v);
  return out;
}

Tensor clamp_forward(const Tensor& x, double lo, double hi) {
  Tensor out = x;
  for (double& v : out.v) v = v < lo ? lo : (v > hi ? hi : v);
  return out;
}

Tensor concat_channels_forward(const Tensor& a, const Tensor& b) {
  Tensor out({a.shape[0] + b.shape[0], a.shape[1], a.shape[2]});
  std::copy(a.v.begin(), a.v.end(), out.v.begin());
  std::copy(b.v.begin(), b.v.end(), out.v.begin() + a.v.size());
  return out;
}

Tensor bce_map_forward(const Tensor& pred, const Tensor& target) {
  Tensor out(pred.shape);
  for (std::size_t i = 0; i < pred.v.size(); ++i) {
    double p = pred.v[i];
    p = p < kBceEps ? kBceEps : (p > 1.0 - kBceEps ? 1.0 - kBceEps : p);
    const double y = target.v[i];
    out.v[i] = -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
  }
  return out;
}

}  // namespace sslgrasp::ad
