#pragma once

#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "sslgrasp/adam.hpp"
#include "sslgrasp/augment.hpp"
#include "sslgrasp/net.hpp"
#include "sslgrasp/sim.hpp"
#include "sslgrasp/ssl.hpp"

namespace sslgrasp {

struct ReplaySample {
  ad::Tensor state;  // (7,H,W)
  int h = 0, w = 0;
  Vec3 action{};
  double reward = 0.0;
};

// Ring buffer with FIFO eviction; at(0) is the oldest live sample.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(int capacity = 500);
  void push(ReplaySample s);
  int size() const { return static_cast<int>(std::min<long long>(pushed_, capacity_)); }
  int capacity() const { return capacity_; }
  long long total_pushed() const { return pushed_; }
  const ReplaySample& at(int i) const;
  long long sample_id(int i) const;  // monotone push index of the i-th oldest sample
 private:
  int slot_of(int i) const;
  std::vector<ReplaySample> slots_;
  std::vector<long long> ids_;
  int capacity_;
  long long pushed_ = 0;
};

struct TrainConfig {
  int batch_size = 4;
  double entropy_alpha = 0.2;
  int steps_per_grasp = 10;
  ad::AdamConfig optim;  // lr 1e-4 (offline-style), 1e-5 preset for online runs
  MethodConfig method;
  AugmentConfig aug;
  NetConfig net;
  std::uint64_t seed = 0;
};

struct LossBreakdown {
  double critic_labeled = 0.0, actor_labeled = 0.0;
  double critic_unlabeled = 0.0, actor_unlabeled = 0.0;
  double critic_total = 0.0, actor_total = 0.0;
  int accepted_pixels = 0;
  double mean_lambda = 0.0;
  bool nan_abort = false;
  std::string tau_note;
};

// Inputs of one step with all stochastic draws frozen, so losses become a
// deterministic function of the parameters (used by gradient checks).
struct StepSample {
  const ReplaySample* sample = nullptr;
  ad::Tensor labeled_noise;  // (3,H,W)
  bool has_unlabeled = false;
  ad::Tensor strong_state;   // raw (7,H,W)
  ad::Tensor strong_noise;   // (3,H,W)
  ad::Tensor lambda;         // (H,W)
  ad::Tensor pseudo_labels;  // (H,W)
};

struct StepGraph {
  ad::VarId critic_labeled, actor_labeled;
  ad::VarId critic_unlabeled, actor_unlabeled;
  ad::VarId critic_total, actor_total;
  // per-sample quality-map nodes, for gradient-support inspection
  std::vector<ad::VarId> labeled_q_maps;
  std::vector<ad::VarId> strong_q_maps;  // -1 when the sample had no unlabeled term
};

// Builds the joint labeled+unlabeled objective on the tape.
StepGraph build_step_graph(ad::Tape& tape, const ModelLeaves& leaves, const TrainConfig& cfg,
                           const std::vector<StepSample>& batch);

class OnlineTrainer {
 public:
  OnlineTrainer(const TrainConfig& cfg, ConvSacModel model);

  LossBreakdown train_step(const ReplayBuffer& buffer);

  ConvSacModel& model() { return model_; }
  const ConvSacModel& model() const { return model_; }
  const EmaModel& ema() const { return ema_; }
  ThresholdState& threshold_state() { return thr_; }
  const TrainConfig& config() const { return cfg_; }
  long long nan_events() const { return nan_events_; }
  long long steps_done() const { return steps_; }

 private:
  struct SlotTally {
    FlexTally tally;
    bool valid = false;
  };

  void update_thresholds(const ReplayBuffer& buffer, const std::vector<StepSample>& batch,
                         const std::vector<ad::Tensor>& q_aligned,
                         const std::vector<ad::Tensor>& stats_masks,
                         const std::vector<long long>& batch_ids);

  TrainConfig cfg_;
  ConvSacModel model_;
  EmaModel ema_;
  ad::AdamState critic_opt_, actor_opt_;
  ThresholdState thr_;
  bool thr_ready_ = false;
  RngStream rng_;
  std::unordered_map<long long, FlexTally> flex_tallies_;
  long long nan_events_ = 0;
  long long steps_ = 0;
};

// ---- online interaction loop ----

struct OnlineConfig {
  SceneSpec env;
  TrainConfig train;
  int grasp_attempts = 300;
  int attempts_per_bin = 15;
  int buffer_capacity = 500;
  bool learn = true;
  bool oracle_policy = false;  // act from ground truth instead of the model
  bool explore = true;         // sample-mode actions when acting from the model
  std::string log_path;        // CSV run log; empty disables
  int checkpoint_every = 0;    // in grasp attempts; 0 disables
  std::string checkpoint_prefix;
};

struct OnlineResult {
  std::vector<int> rewards;
  double final_trailing_sr = 0.0;
  int bins_started = 0;
  long long nan_events = 0;
};

OnlineResult online_loop(const OnlineConfig& cfg, OnlineTrainer* trainer);

}  // namespace sslgrasp
