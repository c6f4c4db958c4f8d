#pragma once

#include <array>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "sslgrasp/tensor.hpp"

namespace sslgrasp {

// Class 0 is failure, class 1 is success; the two-class view of a quality
// map q is (1-q, q) and max/argmax run over that axis.
enum class SslMethod { None, FixMatch, FlexMatch, FreeMatch };

SslMethod parse_method(const std::string& name);
std::string method_name(SslMethod m);

struct MethodConfig {
  SslMethod method = SslMethod::None;
  bool contextual = false;
  bool soft_weight = false;
  double tau = 0.95;
  double tau_lb = 0.5;        // 0.5 means no effective lower bound
  double ema_momentum = 0.95; // FreeMatch EMA decay
  int topk_budget = 0;        // <= 0 means full
  bool flexmatch_exact = false;  // recount the whole buffer every step
};

struct PseudoLabels {
  ad::Tensor labels;       // (H,W) {0,1}; q == 0.5 labels failure
  ad::Tensor confidence;   // (H,W) max(q, 1-q)
  ad::Tensor class_index;  // (H,W) argmax over the 2-class view
};

PseudoLabels pseudo_labels(const ad::Tensor& q_weak);

// One sample's weak-branch prediction restricted to the pixels eligible
// for unlabeled statistics (valid and unlabeled).
struct UnlabeledPrediction {
  const ad::Tensor* q = nullptr;     // (H,W)
  const ad::Tensor* mask = nullptr;  // (H,W) {0,1}
};

struct ThresholdState {
  MethodConfig cfg;
  int H = 0, W = 0;
  long long step = 0;

  // FlexMatch
  std::array<double, 2> sigma{0.0, 0.0};
  double total_unlabeled = 0.0;
  std::array<double, 2> beta{0.0, 0.0};
  // FreeMatch
  double tau_global = 0.5;
  std::array<double, 2> p_tilde{0.5, 0.5};
  // finalized per-class thresholds (curriculum methods)
  std::array<double, 2> tau_c{0.0, 0.0};

  // contextual variants, (2,H,W) class-major and (H,W)
  ad::Tensor sigma_map, total_map, beta_map, tau_map;
  ad::Tensor tau_global_map, p_tilde_map;
};

ThresholdState make_threshold_state(const MethodConfig& cfg, int H, int W);

// FlexMatch learning-effect recount over the given predictions followed by
// warm-up normalization, the mapping M(x) = x / (2 - x) and tau_t = M(beta) tau.
// An empty prediction list leaves the state unchanged.
void flexmatch_update(ThresholdState& st, const std::vector<UnlabeledPrediction>& buffer);

// Pieces of the recount for the amortized per-slot tally kept by the trainer.
struct FlexTally {
  std::array<double, 2> count{0.0, 0.0};
  double total = 0.0;
  ad::Tensor count_map;  // (2,H,W) when contextual
  ad::Tensor total_map;  // (H,W) when contextual
};
FlexTally flexmatch_tally(const MethodConfig& cfg, const ad::Tensor& q,
                          const ad::Tensor& mask);
void flexmatch_finalize(ThresholdState& st, const std::array<double, 2>& sigma,
                        double total_unlabeled);
void flexmatch_finalize_contextual(ThresholdState& st, const ad::Tensor& sigma_map,
                                   const ad::Tensor& total_map);

// FreeMatch self-adaptive global/local thresholds over the given batch.
void freematch_update(ThresholdState& st, const std::vector<UnlabeledPrediction>& batch);

// tau_t = max(tau_t, tau_lb), classwise or pixelwise.
void apply_lower_bound(ThresholdState& st, double tau_lb);
inline void apply_lower_bound(ThresholdState& st) { apply_lower_bound(st, st.cfg.tau_lb); }

// Fixed-threshold acceptance: 1 where confidence >= tau, unlabeled and valid.
ad::Tensor fixmatch_mask(const PseudoLabels& p, double tau,
                         std::optional<std::pair<int, int>> labeled_pixel,
                         const ad::Tensor& validity);

// Softmax weighting over the accepted set, scaled to preserve the mean
// weight and clipped into [0,1].
ad::Tensor soft_weights(const PseudoLabels& p, const ad::Tensor& accept);

struct LambdaResult {
  ad::Tensor lambda;  // (H,W) in [0,1]
  PseudoLabels pseudo;
  int accepted = 0;
};

// Full weighting pipeline for one sample: pseudo labels, per-class (or
// per-pixel) threshold comparison, optional soft weighting, zeroing of the
// labeled pixel and invalid pixels.
LambdaResult compose_lambda(const ThresholdState& st, const ad::Tensor& q_weak_aligned,
                            std::optional<std::pair<int, int>> labeled_pixel,
                            const ad::Tensor& validity);

// Keeps the k highest-confidence nonzero pixels (row-major tie-break);
// k <= 0 means full.
ad::Tensor apply_topk_budget(const ad::Tensor& lambda, const ad::Tensor& confidence, int k);

std::string tau_summary(const ThresholdState& st);

}  // namespace sslgrasp
