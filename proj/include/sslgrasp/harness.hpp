#pragma once

#include <functional>
#include <string>
#include <vector>

#include "sslgrasp/trainer.hpp"

namespace sslgrasp {

struct CollectPolicy {
  enum class Kind { Random, Oracle, OracleEps, Model };
  Kind kind = Kind::Random;
  double eps = 0.5;  // OracleEps: probability of the oracle grasp
  const ConvSacModel* model = nullptr;
};

// Gathers n sparse-feedback samples by acting greedily on freshly generated
// scenes (one grasp per scene).
std::vector<ReplaySample> collect_offline(const SceneSpec& env, const CollectPolicy& policy,
                                          int n, std::uint64_t seed,
                                          const NetConfig* net = nullptr);

// Mean over samples of (Q(s)[pixel, action] - r)^2.
double evaluate_mse(const std::function<double(const EvalSample&)>& predict,
                    const std::vector<EvalSample>& eval_set);
double evaluate_mse(const NetConfig& cfg, const ConvSacModel& model,
                    const std::vector<EvalSample>& eval_set);

struct MatrixEntry {
  std::string label;
  MethodConfig method;
};

struct ExperimentConfig {
  SceneSpec env;
  int train_points = 500;
  int eval_scenes = 200;
  int negatives_per_scene = 2;
  int epochs = 200;
  int steps_per_epoch = 5;
  int eval_every = 5;
  std::string collect_policy = "oracle_eps";  // random | oracle | oracle_eps
  double collect_eps = 0.5;
  bool eval_ema = false;
  TrainConfig train;  // method field is overridden per entry
  std::vector<MatrixEntry> entries;
  std::vector<std::uint64_t> seeds;
  std::string out_dir = "out/matrix";
};

ExperimentConfig experiment_config_from_json(const std::string& json_text);
std::string experiment_config_to_json(const ExperimentConfig& cfg);

struct RunResult {
  std::string entry;
  std::uint64_t seed = 0;
  double final_mse = 0.0;
  long long nan_events = 0;
  bool diverged = false;
  bool skipped = false;  // resumed from a completed manifest
  double wall_seconds = 0.0;
};

struct EntrySummary {
  std::string entry;
  double mean_mse = 0.0;
  double std_mse = 0.0;  // over >= 2 seeds, else 0 and std_valid false
  bool std_valid = false;
  int diverged_runs = 0;
};

struct MatrixSummary {
  std::vector<RunResult> runs;
  std::vector<EntrySummary> entries;
  double baseline_median = 0.0;  // over method-none runs, 0 if none
  int executed = 0;              // runs actually trained (not resumed)
};

// Runs every entry x seed, writes per-run curve.csv / manifest.json /
// checkpoint.json plus a matrix summary.json under cfg.out_dir. Completed
// runs with a matching config fingerprint are skipped. Diverged runs are
// reported, never thrown.
MatrixSummary run_matrix(const ExperimentConfig& cfg);

// One training run without the matrix bookkeeping; curves go to csv_path
// when non-empty. Returns (final mse, nan events).
struct SingleRunResult {
  double final_mse = 0.0;
  long long nan_events = 0;
  std::vector<double> epoch_mse;  // NaN where not evaluated
};
SingleRunResult run_training(const ExperimentConfig& cfg, const MethodConfig& method,
                             std::uint64_t seed, const std::string& csv_path,
                             const std::string& checkpoint_path);

// Environment variable consulted for relative output paths.
std::string output_root();
std::string resolve_out_dir(const std::string& dir);

}  // namespace sslgrasp
