#pragma once

#include <array>
#include <string>
#include <vector>

#include "sslgrasp/rng.hpp"
#include "sslgrasp/tape.hpp"

namespace sslgrasp {

// Pixel-wise actor-critic over 7-channel scene states.
//   encoder: two padding-preserving 3x3 convs (ReLU)
//   actor:   1x1 conv -> per-pixel Gaussian (mean, log_std) over 3 Euler
//            angles, tanh-squashed into the configured ranges
//   critic:  1x1 convs over [embedding | action], sigmoid quality map
struct NetConfig {
  int state_channels = 7;
  int enc_channels = 16;
  int critic_hidden = 16;
  double log_std_min = -10.0;
  double log_std_max = 2.0;
  double log_std_bias_init = -1.0;
  // yaw, pitch, roll half-ranges; actions live in [-r, r] per dim
  std::array<double, 3> angle_half_range = {3.14159265358979323846,
                                            0.78539816339744830962,
                                            0.78539816339744830962};
  double ema_momentum = 0.99;
  // fixed per-channel input normalization (rgb, normals, height)
  std::array<double, 7> input_offset = {0.5, 0.5, 0.5, 0.0, 0.0, 0.0, 20.0};
  std::array<double, 7> input_scale = {2.0, 2.0, 2.0, 1.0, 1.0, 1.0, 0.05};
};

struct ConvSacModel {
  NetConfig cfg;
  ad::Tensor enc_w1, enc_b1, enc_w2, enc_b2;
  ad::Tensor actor_w, actor_b;      // 6 output channels: mean(3), log_std(3)
  ad::Tensor critic_w1, critic_b1;  // (hidden, enc+3, 1, 1)
  ad::Tensor critic_w2, critic_b2;  // (1, hidden, 1, 1)

  static ConvSacModel init(const NetConfig& cfg, RngStream& rng);

  std::vector<ad::Tensor*> params();
  std::vector<const ad::Tensor*> params() const;
  static std::vector<std::string> param_names();
  long long param_count() const;
};

// Parameter leaves registered on a tape. Groupings reflect which loss
// updates which subset: the critic objective trains encoder + critic,
// the actor objective trains the actor head only.
struct ModelLeaves {
  ad::VarId enc_w1, enc_b1, enc_w2, enc_b2;
  ad::VarId actor_w, actor_b;
  ad::VarId critic_w1, critic_b1, critic_w2, critic_b2;

  std::vector<ad::VarId> encoder_ids() const { return {enc_w1, enc_b1, enc_w2, enc_b2}; }
  std::vector<ad::VarId> actor_ids() const { return {actor_w, actor_b}; }
  std::vector<ad::VarId> critic_ids() const {
    return {critic_w1, critic_b1, critic_w2, critic_b2};
  }
};

ModelLeaves lift_model(ad::Tape& t, const ConvSacModel& m, bool requires_grad);

// Fixed affine normalization applied to raw states before the encoder.
ad::Tensor normalize_state(const NetConfig& cfg, const ad::Tensor& state);

// ---- tape forwards (training path) ----

ad::VarId encode(ad::Tape& t, const NetConfig& cfg, const ModelLeaves& l, ad::VarId state_norm);

struct ActorOut {
  ad::VarId mean;      // (3,H,W) pre-squash
  ad::VarId log_std;   // (3,H,W) clamped
  ad::VarId pre_squash;  // (3,H,W) sample u (== mean in mean mode)
  ad::VarId action;    // (3,H,W) Euler angles
  ad::VarId logprob;   // (H,W)
};

// mode: sample (reparameterized, noise supplied by caller) or mean.
ActorOut actor_forward(ad::Tape& t, const NetConfig& cfg, const ModelLeaves& l,
                       ad::VarId embedding, const ad::Tensor* noise);

ad::VarId critic_forward(ad::Tape& t, const NetConfig& cfg, const ModelLeaves& l,
                         ad::VarId embedding, ad::VarId action);

// ---- plain forwards (acting / evaluation path, no tape) ----

struct PlainForward {
  ad::Tensor embedding;   // (C,H,W)
  ad::Tensor action;      // (3,H,W)
  ad::Tensor pre_squash;  // (3,H,W)
  ad::Tensor quality;     // (H,W)
};

ad::Tensor encode_plain(const NetConfig& cfg, const ConvSacModel& m, const ad::Tensor& state);

// Full actor+critic pass; if rng is null the actor uses mean mode.
PlainForward forward_plain(const NetConfig& cfg, const ConvSacModel& m,
                           const ad::Tensor& state, RngStream* rng);

// Critic quality at one pixel for an arbitrary action (1x1 heads make this a
// per-pixel dot product chain).
double quality_at_plain(const NetConfig& cfg, const ConvSacModel& m,
                        const ad::Tensor& embedding, int h, int w,
                        const std::array<double, 3>& action);

// ---- grasp selection ----

struct GraspChoice {
  int h = 0, w = 0;
  std::array<double, 3> action{};
  double confidence = 0.0;
};

// Global argmax with row-major first-hit tie break.
GraspChoice select_grasp(const ad::Tensor& quality, const ad::Tensor& actions);

// ---- EMA shadow ----

struct EmaModel {
  ConvSacModel shadow;
  double momentum = 0.99;

  static EmaModel from(const ConvSacModel& live);
  void update(const ConvSacModel& live);
};

// ---- checkpoints (versioned JSON manifest with parameter blobs) ----

void save_checkpoint(const std::string& path, const ConvSacModel& live, const EmaModel& ema);
void load_checkpoint(const std::string& path, ConvSacModel& live, EmaModel& ema);

}  // namespace sslgrasp
