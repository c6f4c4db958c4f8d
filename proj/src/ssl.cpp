#include "sslgrasp/ssl.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "sslgrasp/errors.hpp"

namespace sslgrasp {

using ad::Tensor;

namespace {

// FlexMatch non-linear mapping: convex, M(0)=0, M(1)=1.
double flex_mapping(double x) { return x / (2.0 - x); }

void require_map(const Tensor& t, const char* what) {
  if (t.rank() != 2) throw UsageError(std::string(what) + ": expected (H,W) map");
}

}  // namespace

SslMethod parse_method(const std::string& name) {
  if (name == "none" || name == "on") return SslMethod::None;
  if (name == "fixmatch") return SslMethod::FixMatch;
  if (name == "flexmatch") return SslMethod::FlexMatch;
  if (name == "freematch") return SslMethod::FreeMatch;
  throw ConfigError("unknown SSL method tag: '" + name + "'");
}

std::string method_name(SslMethod m) {
  switch (m) {
    case SslMethod::None: return "none";
    case SslMethod::FixMatch: return "fixmatch";
    case SslMethod::FlexMatch: return "flexmatch";
    case SslMethod::FreeMatch: return "freematch";
  }
  return "?";
}

PseudoLabels pseudo_labels(const Tensor& q_weak) {
  require_map(q_weak, "pseudo_labels");
  PseudoLabels p;
  p.labels = Tensor(q_weak.shape);
  p.confidence = Tensor(q_weak.shape);
  p.class_index = Tensor(q_weak.shape);
  for (std::size_t i = 0; i < q_weak.v.size(); ++i) {
    const double q = q_weak.v[i];
    const double label = q > 0.5 ? 1.0 : 0.0;
    p.labels.v[i] = label;
    p.class_index.v[i] = label;
    p.confidence.v[i] = q > 0.5 ? q : 1.0 - q;
  }
  return p;
}

ThresholdState make_threshold_state(const MethodConfig& cfg, int H, int W) {
  ThresholdState st;
  st.cfg = cfg;
  st.H = H;
  st.W = W;
  if (cfg.contextual) {
    st.sigma_map = Tensor({2, H, W});
    st.total_map = Tensor({H, W});
    st.beta_map = Tensor({2, H, W});
    st.tau_map = Tensor({2, H, W});
    st.tau_global_map = Tensor({H, W}, 0.5);
    st.p_tilde_map = Tensor({2, H, W}, 0.5);
  }
  return st;
}

FlexTally flexmatch_tally(const MethodConfig& cfg, const Tensor& q, const Tensor& mask) {
  require_map(q, "flexmatch_tally");
  require_same_shape(q, mask, "flexmatch_tally");
  FlexTally tally;
  if (cfg.contextual) {
    tally.count_map = Tensor({2, q.shape[0], q.shape[1]});
    tally.total_map = Tensor(q.shape);
  }
  const std::size_t plane = q.v.size();
  for (std::size_t i = 0; i < plane; ++i) {
    if (mask.v[i] < 0.5) continue;
    tally.total += 1.0;
    if (cfg.contextual) tally.total_map.v[i] += 1.0;
    const double qi = q.v[i];
    const int cls = qi > 0.5 ? 1 : 0;
    const double conf = cls == 1 ? qi : 1.0 - qi;
    if (conf > cfg.tau) {  // Eq. 5 uses a strict comparison
      tally.count[cls] += 1.0;
      if (cfg.contextual) tally.count_map.v[cls * plane + i] += 1.0;
    }
  }
  return tally;
}

void flexmatch_finalize(ThresholdState& st, const std::array<double, 2>& sigma,
                        double total_unlabeled) {
  st.sigma = sigma;
  st.total_unlabeled = total_unlabeled;
  const double unused = std::max(total_unlabeled - sigma[0] - sigma[1], 0.0);
  const double denom = std::max(std::max(sigma[0], sigma[1]), unused);
  for (int c = 0; c < 2; ++c) {
    st.beta[c] = denom > 0.0 ? sigma[c] / denom : 0.0;
    st.tau_c[c] = flex_mapping(st.beta[c]) * st.cfg.tau;
  }
}

void flexmatch_finalize_contextual(ThresholdState& st, const Tensor& sigma_map,
                                   const Tensor& total_map) {
  st.sigma_map = sigma_map;
  st.total_map = total_map;
  const std::size_t plane = total_map.v.size();
  for (std::size_t i = 0; i < plane; ++i) {
    const double s0 = sigma_map.v[i];
    const double s1 = sigma_map.v[plane + i];
    const double unused = std::max(total_map.v[i] - s0 - s1, 0.0);
    const double denom = std::max(std::max(s0, s1), unused);
    for (int c = 0; c < 2; ++c) {
      const double sc = c == 0 ? s0 : s1;
      const double b = denom > 0.0 ? sc / denom : 0.0;
      st.beta_map.v[c * plane + i] = b;
      st.tau_map.v[c * plane + i] = flex_mapping(b) * st.cfg.tau;
    }
  }
}

void flexmatch_update(ThresholdState& st, const std::vector<UnlabeledPrediction>& buffer) {
  if (st.cfg.method != SslMethod::FlexMatch)
    throw UsageError("flexmatch_update: state is not a FlexMatch state");
  if (buffer.empty()) return;
  ++st.step;
  if (!st.cfg.contextual) {
    std::array<double, 2> sigma{0.0, 0.0};
    double total = 0.0;
    for (const auto& pred : buffer) {
      FlexTally t = flexmatch_tally(st.cfg, *pred.q, *pred.mask);
      sigma[0] += t.count[0];
      sigma[1] += t.count[1];
      total += t.total;
    }
    flexmatch_finalize(st, sigma, total);
    return;
  }
  Tensor sigma_map({2, st.H, st.W});
  Tensor total_map({st.H, st.W});
  for (const auto& pred : buffer) {
    if (pred.q->shape != std::vector<int>{st.H, st.W})
      throw UsageError("flexmatch_update: prediction resolution does not match state maps");
    FlexTally t = flexmatch_tally(st.cfg, *pred.q, *pred.mask);
    for (std::size_t i = 0; i < sigma_map.v.size(); ++i) sigma_map.v[i] += t.count_map.v[i];
    for (std::size_t i = 0; i < total_map.v.size(); ++i) total_map.v[i] += t.total_map.v[i];
  }
  flexmatch_finalize_contextual(st, sigma_map, total_map);
}

void freematch_update(ThresholdState& st, const std::vector<UnlabeledPrediction>& batch) {
  if (st.cfg.method != SslMethod::FreeMatch)
    throw UsageError("freematch_update: state is not a FreeMatch state");
  const double a = st.cfg.ema_momentum;
  ++st.step;
  if (!st.cfg.contextual) {
    double sum_max = 0.0, sum_q0 = 0.0, sum_q1 = 0.0, n = 0.0;
    for (const auto& pred : batch) {
      require_map(*pred.q, "freematch_update");
      require_same_shape(*pred.q, *pred.mask, "freematch_update");
      for (std::size_t i = 0; i < pred.q->v.size(); ++i) {
        if (pred.mask->v[i] < 0.5) continue;
        const double q = pred.q->v[i];
        sum_max += q > 0.5 ? q : 1.0 - q;
        sum_q0 += 1.0 - q;
        sum_q1 += q;
        n += 1.0;
      }
    }
    if (n > 0.0) {
      st.tau_global = a * st.tau_global + (1.0 - a) * (sum_max / n);
      st.p_tilde[0] = a * st.p_tilde[0] + (1.0 - a) * (sum_q0 / n);
      st.p_tilde[1] = a * st.p_tilde[1] + (1.0 - a) * (sum_q1 / n);
    }
    const double pmax = std::max(st.p_tilde[0], st.p_tilde[1]);
    for (int c = 0; c < 2; ++c) st.tau_c[c] = st.p_tilde[c] / pmax * st.tau_global;
    return;
  }
  const std::size_t plane = static_cast<std::size_t>(st.H) * st.W;
  std::vector<double> sum_max(plane, 0.0), sum_q(plane, 0.0), n(plane, 0.0);
  for (const auto& pred : batch) {
    if (pred.q->shape != std::vector<int>{st.H, st.W})
      throw UsageError("freematch_update: prediction resolution does not match state maps");
    for (std::size_t i = 0; i < plane; ++i) {
      if (pred.mask->v[i] < 0.5) continue;
      const double q = pred.q->v[i];
      sum_max[i] += q > 0.5 ? q : 1.0 - q;
      sum_q[i] += q;
      n[i] += 1.0;
    }
  }
  for (std::size_t i = 0; i < plane; ++i) {
    if (n[i] > 0.0) {
      st.tau_global_map.v[i] = a * st.tau_global_map.v[i] + (1.0 - a) * (sum_max[i] / n[i]);
      const double q1 = sum_q[i] / n[i];
      st.p_tilde_map.v[plane + i] = a * st.p_tilde_map.v[plane + i] + (1.0 - a) * q1;
      st.p_tilde_map.v[i] = a * st.p_tilde_map.v[i] + (1.0 - a) * (1.0 - q1);
    }
    const double p0 = st.p_tilde_map.v[i];
    const double p1 = st.p_tilde_map.v[plane + i];
    const double pmax = std::max(p0, p1);
    st.tau_map.v[i] = p0 / pmax * st.tau_global_map.v[i];
    st.tau_map.v[plane + i] = p1 / pmax * st.tau_global_map.v[i];
  }
}

void apply_lower_bound(ThresholdState& st, double tau_lb) {
  if (tau_lb < 0.0 || tau_lb > 1.0) throw UsageError("apply_lower_bound: tau_lb out of range");
  for (int c = 0; c < 2; ++c) st.tau_c[c] = std::max(st.tau_c[c], tau_lb);
  if (st.cfg.contextual && st.tau_map.numel() > 1)
    for (double& x : st.tau_map.v) x = std::max(x, tau_lb);
}

Tensor fixmatch_mask(const PseudoLabels& p, double tau,
                     std::optional<std::pair<int, int>> labeled_pixel,
                     const Tensor& validity) {
  require_same_shape(p.confidence, validity, "fixmatch_mask");
  Tensor lambda(p.confidence.shape);
  for (std::size_t i = 0; i < lambda.v.size(); ++i)
    lambda.v[i] = (validity.v[i] > 0.5 && p.confidence.v[i] >= tau) ? 1.0 : 0.0;
  if (labeled_pixel) lambda.at2(labeled_pixel->first, labeled_pixel->second) = 0.0;
  return lambda;
}

Tensor soft_weights(const PseudoLabels& p, const Tensor& accept) {
  require_same_shape(p.confidence, accept, "soft_weights");
  Tensor lambda(accept.shape);
  double denom = 0.0;
  double n_acc = 0.0;
  for (std::size_t i = 0; i < accept.v.size(); ++i) {
    if (accept.v[i] > 0.5) {
      denom += std::exp(p.confidence.v[i]);
      n_acc += 1.0;
    }
  }
  if (n_acc == 0.0) return lambda;
  for (std::size_t i = 0; i < accept.v.size(); ++i) {
    if (accept.v[i] <= 0.5) continue;
    const double w = n_acc * std::exp(p.confidence.v[i]) / denom;
    lambda.v[i] = w > 1.0 ? 1.0 : w;
  }
  return lambda;
}

LambdaResult compose_lambda(const ThresholdState& st, const Tensor& q_weak_aligned,
                            std::optional<std::pair<int, int>> labeled_pixel,
                            const Tensor& validity) {
  require_map(q_weak_aligned, "compose_lambda");
  require_same_shape(q_weak_aligned, validity, "compose_lambda");
  LambdaResult out;
  out.pseudo = pseudo_labels(q_weak_aligned);
  out.lambda = Tensor(q_weak_aligned.shape);
  if (st.cfg.method == SslMethod::None) return out;

  const std::size_t plane = q_weak_aligned.v.size();
  Tensor accept(q_weak_aligned.shape);
  for (std::size_t i = 0; i < plane; ++i) {
    if (validity.v[i] < 0.5) continue;
    const int cls = out.pseudo.class_index.v[i] > 0.5 ? 1 : 0;
    double thr;
    switch (st.cfg.method) {
      case SslMethod::FixMatch: thr = st.cfg.tau; break;
      case SslMethod::FlexMatch:
      case SslMethod::FreeMatch:
        thr = st.cfg.contextual ? st.tau_map.v[cls * plane + i] : st.tau_c[cls];
        break;
      default: thr = 2.0; break;
    }
    if (out.pseudo.confidence.v[i] >= thr) accept.v[i] = 1.0;
  }
  if (labeled_pixel) accept.at2(labeled_pixel->first, labeled_pixel->second) = 0.0;
  int n_acc = 0;
  for (double x : accept.v) n_acc += x > 0.5 ? 1 : 0;
  out.accepted = n_acc;
  out.lambda = st.cfg.soft_weight ? soft_weights(out.pseudo, accept) : accept;
  return out;
}

Tensor apply_topk_budget(const Tensor& lambda, const Tensor& confidence, int k) {
  require_same_shape(lambda, confidence, "apply_topk_budget");
  if (k <= 0) return lambda;  // full
  std::vector<std::size_t> nonzero;
  for (std::size_t i = 0; i < lambda.v.size(); ++i)
    if (lambda.v[i] != 0.0) nonzero.push_back(i);
  if (static_cast<int>(nonzero.size()) <= k) return lambda;
  std::stable_sort(nonzero.begin(), nonzero.end(), [&](std::size_t a, std::size_t b) {
    return confidence.v[a] > confidence.v[b];  // stable: ties stay row-major
  });
  Tensor out(lambda.shape);
  for (int i = 0; i < k; ++i) out.v[nonzero[i]] = lambda.v[nonzero[i]];
  return out;
}

std::string tau_summary(const ThresholdState& st) {
  char buf[128];
  switch (st.cfg.method) {
    case SslMethod::None: return "-";
    case SslMethod::FixMatch:
      std::snprintf(buf, sizeof(buf), "%.4g", st.cfg.tau);
      return buf;
    default: break;
  }
  if (!st.cfg.contextual) {
    std::snprintf(buf, sizeof(buf), "%.4g|%.4g", st.tau_c[0], st.tau_c[1]);
    return buf;
  }
  const std::size_t plane = static_cast<std::size_t>(st.H) * st.W;
  double lo0 = 1e9, hi0 = -1e9, lo1 = 1e9, hi1 = -1e9;
  for (std::size_t i = 0; i < plane; ++i) {
    lo0 = std::min(lo0, st.tau_map.v[i]);
    hi0 = std::max(hi0, st.tau_map.v[i]);
    lo1 = std::min(lo1, st.tau_map.v[plane + i]);
    hi1 = std::max(hi1, st.tau_map.v[plane + i]);
  }
  std::snprintf(buf, sizeof(buf), "[%.3g,%.3g]|[%.3g,%.3g]", lo0, hi0, lo1, hi1);
  return buf;
}

}  // namespace sslgrasp
