#include "sslgrasp/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "sslgrasp/errors.hpp"

namespace sslgrasp {

using ad::Tensor;
using nlohmann::json;

namespace {

constexpr double kPi = 3.14159265358979323846;

Vec3 random_action(RngStream& rng) {
  return {rng.uniform(-kPi, kPi), rng.uniform(-kPi / 4, kPi / 4),
          rng.uniform(-kPi / 4, kPi / 4)};
}

std::string sanitize(const std::string& s) {
  std::string out;
  for (char c : s)
    out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_') ? c : '_';
  return out.empty() ? "entry" : out;
}

// ---- JSON blocks ----

json method_to_json(const MethodConfig& m) {
  return {{"method", method_name(m.method)},
          {"contextual", m.contextual},
          {"soft_weight", m.soft_weight},
          {"tau", m.tau},
          {"tau_lb", m.tau_lb},
          {"ema_momentum", m.ema_momentum},
          {"topk_budget", m.topk_budget},
          {"flexmatch_exact", m.flexmatch_exact}};
}

MethodConfig method_from_json(const json& j) {
  MethodConfig m;
  m.method = parse_method(j.value("method", "none"));
  m.contextual = j.value("contextual", m.contextual);
  m.soft_weight = j.value("soft_weight", m.soft_weight);
  m.tau = j.value("tau", m.tau);
  m.tau_lb = j.value("tau_lb", m.tau_lb);
  m.ema_momentum = j.value("ema_momentum", m.ema_momentum);
  if (j.contains("topk_budget")) {
    const auto& b = j.at("topk_budget");
    if (b.is_string()) {
      if (b.get<std::string>() != "full")
        throw ConfigError("topk_budget must be an integer or \"full\"");
      m.topk_budget = 0;
    } else {
      m.topk_budget = b.get<int>();
    }
  }
  m.flexmatch_exact = j.value("flexmatch_exact", m.flexmatch_exact);
  return m;
}

json aug_to_json(const AugmentConfig& a) {
  return {{"weak_rot_deg", a.weak_rot_deg},
          {"weak_shift_px", a.weak_shift_px},
          {"weak_color_jitter", a.weak_color_jitter},
          {"weak_brightness_jitter", a.weak_brightness_jitter},
          {"weak_contrast_jitter", a.weak_contrast_jitter},
          {"strong_rot_deg", a.strong_rot_deg},
          {"strong_shift_px", a.strong_shift_px},
          {"strong_color_ops", a.strong_color_ops},
          {"op_autocontrast", a.op_autocontrast},
          {"op_brightness", a.op_brightness},
          {"op_contrast", a.op_contrast},
          {"op_equalize", a.op_equalize},
          {"op_posterize", a.op_posterize},
          {"op_sharpness", a.op_sharpness},
          {"op_solarize", a.op_solarize},
          {"depth_noise", a.depth_noise},
          {"normal_zero_rate", a.normal_zero_rate}};
}

AugmentConfig aug_from_json(const json& j) {
  AugmentConfig a;
  a.weak_rot_deg = j.value("weak_rot_deg", a.weak_rot_deg);
  a.weak_shift_px = j.value("weak_shift_px", a.weak_shift_px);
  a.weak_color_jitter = j.value("weak_color_jitter", a.weak_color_jitter);
  a.weak_brightness_jitter = j.value("weak_brightness_jitter", a.weak_brightness_jitter);
  a.weak_contrast_jitter = j.value("weak_contrast_jitter", a.weak_contrast_jitter);
  a.strong_rot_deg = j.value("strong_rot_deg", a.strong_rot_deg);
  a.strong_shift_px = j.value("strong_shift_px", a.strong_shift_px);
  a.strong_color_ops = j.value("strong_color_ops", a.strong_color_ops);
  a.op_autocontrast = j.value("op_autocontrast", a.op_autocontrast);
  a.op_brightness = j.value("op_brightness", a.op_brightness);
  a.op_contrast = j.value("op_contrast", a.op_contrast);
  a.op_equalize = j.value("op_equalize", a.op_equalize);
  a.op_posterize = j.value("op_posterize", a.op_posterize);
  a.op_sharpness = j.value("op_sharpness", a.op_sharpness);
  a.op_solarize = j.value("op_solarize", a.op_solarize);
  a.depth_noise = j.value("depth_noise", a.depth_noise);
  a.normal_zero_rate = j.value("normal_zero_rate", a.normal_zero_rate);
  return a;
}

json env_to_json(const SceneSpec& s) {
  return {{"seed", s.seed},
          {"height", s.height},
          {"width", s.width},
          {"min_objects", s.min_objects},
          {"max_objects", s.max_objects},
          {"min_radius", s.min_radius},
          {"max_radius", s.max_radius},
          {"min_base_height", s.min_base_height},
          {"max_base_height", s.max_base_height},
          {"max_tilt_slope", s.max_tilt_slope},
          {"flat_fraction", s.flat_fraction},
          {"wall_width", s.wall_width},
          {"wall_height", s.wall_height},
          {"bernoulli_reward", s.bernoulli_reward}};
}

SceneSpec env_from_json(const json& j) {
  SceneSpec s;
  s.seed = j.value("seed", s.seed);
  s.height = j.value("height", s.height);
  s.width = j.value("width", s.width);
  s.min_objects = j.value("min_objects", s.min_objects);
  s.max_objects = j.value("max_objects", s.max_objects);
  s.min_radius = j.value("min_radius", s.min_radius);
  s.max_radius = j.value("max_radius", s.max_radius);
  s.min_base_height = j.value("min_base_height", s.min_base_height);
  s.max_base_height = j.value("max_base_height", s.max_base_height);
  s.max_tilt_slope = j.value("max_tilt_slope", s.max_tilt_slope);
  s.flat_fraction = j.value("flat_fraction", s.flat_fraction);
  s.wall_width = j.value("wall_width", s.wall_width);
  s.wall_height = j.value("wall_height", s.wall_height);
  s.bernoulli_reward = j.value("bernoulli_reward", s.bernoulli_reward);
  return s;
}

json train_to_json(const TrainConfig& t) {
  return {{"batch_size", t.batch_size},
          {"entropy_alpha", t.entropy_alpha},
          {"steps_per_grasp", t.steps_per_grasp},
          {"optim",
           {{"learning_rate", t.optim.learning_rate},
            {"beta1", t.optim.beta1},
            {"beta2", t.optim.beta2},
            {"eps", t.optim.eps},
            {"weight_decay", t.optim.weight_decay}}},
          {"augment", aug_to_json(t.aug)},
          {"enc_channels", t.net.enc_channels},
          {"critic_hidden", t.net.critic_hidden}};
}

TrainConfig train_from_json(const json& j) {
  TrainConfig t;
  t.batch_size = j.value("batch_size", t.batch_size);
  t.entropy_alpha = j.value("entropy_alpha", t.entropy_alpha);
  t.steps_per_grasp = j.value("steps_per_grasp", t.steps_per_grasp);
  if (j.contains("optim")) {
    const auto& o = j.at("optim");
    t.optim.learning_rate = o.value("learning_rate", t.optim.learning_rate);
    t.optim.beta1 = o.value("beta1", t.optim.beta1);
    t.optim.beta2 = o.value("beta2", t.optim.beta2);
    t.optim.eps = o.value("eps", t.optim.eps);
    t.optim.weight_decay = o.value("weight_decay", t.optim.weight_decay);
  }
  if (j.contains("augment")) t.aug = aug_from_json(j.at("augment"));
  t.net.enc_channels = j.value("enc_channels", t.net.enc_channels);
  t.net.critic_hidden = j.value("critic_hidden", t.net.critic_hidden);
  return t;
}

json experiment_to_json_obj(const ExperimentConfig& cfg) {
  json entries = json::array();
  for (const auto& e : cfg.entries)
    entries.push_back({{"label", e.label}, {"method", method_to_json(e.method)}});
  return {{"env", env_to_json(cfg.env)},
          {"train_points", cfg.train_points},
          {"eval_scenes", cfg.eval_scenes},
          {"negatives_per_scene", cfg.negatives_per_scene},
          {"epochs", cfg.epochs},
          {"steps_per_epoch", cfg.steps_per_epoch},
          {"eval_every", cfg.eval_every},
          {"collect_policy", cfg.collect_policy},
          {"collect_eps", cfg.collect_eps},
          {"eval_ema", cfg.eval_ema},
          {"train", train_to_json(cfg.train)},
          {"entries", entries},
          {"seeds", cfg.seeds},
          {"out_dir", cfg.out_dir}};
}

std::string run_fingerprint(const ExperimentConfig& cfg, const MatrixEntry& entry,
                            std::uint64_t seed) {
  json j = experiment_to_json_obj(cfg);
  j.erase("out_dir");
  j.erase("entries");
  j["entry"] = {{"label", entry.label}, {"method", method_to_json(entry.method)}};
  j["seed"] = seed;
  return std::to_string(std::hash<std::string>{}(j.dump()));
}

}  // namespace

ExperimentConfig experiment_config_from_json(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("invalid experiment JSON: ") + e.what());
  }
  ExperimentConfig cfg;
  if (j.contains("env")) cfg.env = env_from_json(j.at("env"));
  cfg.train_points = j.value("train_points", cfg.train_points);
  cfg.eval_scenes = j.value("eval_scenes", cfg.eval_scenes);
  cfg.negatives_per_scene = j.value("negatives_per_scene", cfg.negatives_per_scene);
  cfg.epochs = j.value("epochs", cfg.epochs);
  cfg.steps_per_epoch = j.value("steps_per_epoch", cfg.steps_per_epoch);
  cfg.eval_every = j.value("eval_every", cfg.eval_every);
  cfg.collect_policy = j.value("collect_policy", cfg.collect_policy);
  cfg.collect_eps = j.value("collect_eps", cfg.collect_eps);
  cfg.eval_ema = j.value("eval_ema", cfg.eval_ema);
  if (j.contains("train")) cfg.train = train_from_json(j.at("train"));
  if (j.contains("entries")) {
    cfg.entries.clear();
    for (const auto& je : j.at("entries")) {
      MatrixEntry e;
      e.label = je.at("label").get<std::string>();
      e.method = method_from_json(je.at("method"));
      cfg.entries.push_back(e);
    }
  }
  if (j.contains("seeds")) cfg.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  cfg.out_dir = j.value("out_dir", cfg.out_dir);
  if (cfg.seeds.empty()) throw ConfigError("experiment config: seeds list must be non-empty");
  return cfg;
}

std::string experiment_config_to_json(const ExperimentConfig& cfg) {
  return experiment_to_json_obj(cfg).dump(2);
}

std::string output_root() {
  const char* env = std::getenv("SSLGRASP_OUT");
  return env && *env ? env : ".";
}

std::string resolve_out_dir(const std::string& dir) {
  std::filesystem::path p(dir);
  if (p.is_absolute()) return dir;
  return (std::filesystem::path(output_root()) / p).string();
}

std::vector<ReplaySample> collect_offline(const SceneSpec& env, const CollectPolicy& policy,
                                          int n, std::uint64_t seed, const NetConfig* net) {
  if (policy.kind == CollectPolicy::Kind::Model && (!policy.model || !net))
    throw ConfigError("collect_offline: model policy requires a model and net config");
  std::vector<ReplaySample> out;
  out.reserve(n);
  RngStream rng(mix_seed(seed, 0xC0DAull));
  for (int i = 0; i < n; ++i) {
    SceneSpec sp = env;
    sp.seed = mix_seed(env.seed, 3000000ull + static_cast<std::uint64_t>(i));
    Scene scene = generate_scene(sp);
    int h, w;
    Vec3 a;
    bool oracle = policy.kind == CollectPolicy::Kind::Oracle;
    if (policy.kind == CollectPolicy::Kind::OracleEps) oracle = rng.bernoulli(policy.eps);
    if (policy.kind == CollectPolicy::Kind::Model) {
      PlainForward pf = forward_plain(*net, *policy.model, scene.state, &rng);
      GraspChoice c = select_grasp(pf.quality, pf.action);
      h = c.h;
      w = c.w;
      a = c.action;
    } else if (oracle) {
      GraspChoice c = select_grasp(scene.gt.quality, scene.gt.action);
      h = c.h;
      w = c.w;
      a = c.action;
    } else {
      h = rng.uniform_int(sp.height);
      w = rng.uniform_int(sp.width);
      a = random_action(rng);
    }
    ReplaySample s;
    s.state = scene.state;
    s.h = h;
    s.w = w;
    s.action = a;
    s.reward = static_cast<double>(execute_grasp(scene, h, w, a));
    out.push_back(std::move(s));
  }
  return out;
}

double evaluate_mse(const std::function<double(const EvalSample&)>& predict,
                    const std::vector<EvalSample>& eval_set) {
  if (eval_set.empty()) throw UsageError("evaluate_mse: empty eval set");
  double acc = 0.0;
  for (const EvalSample& s : eval_set) {
    const double d = predict(s) - static_cast<double>(s.reward);
    acc += d * d;
  }
  return acc / static_cast<double>(eval_set.size());
}

double evaluate_mse(const NetConfig& cfg, const ConvSacModel& model,
                    const std::vector<EvalSample>& eval_set) {
  if (eval_set.empty()) throw UsageError("evaluate_mse: empty eval set");
  double acc = 0.0;
  Tensor emb;
  const std::vector<double>* cached = nullptr;
  for (const EvalSample& s : eval_set) {
    if (!cached || !(*cached == s.state.v)) {
      emb = encode_plain(cfg, model, s.state);
      cached = &s.state.v;
    }
    const double q = quality_at_plain(cfg, model, emb, s.h, s.w, s.action);
    const double d = q - static_cast<double>(s.reward);
    acc += d * d;
  }
  return acc / static_cast<double>(eval_set.size());
}

SingleRunResult run_training(const ExperimentConfig& cfg, const MethodConfig& method,
                             std::uint64_t seed, const std::string& csv_path,
                             const std::string& checkpoint_path) {
  std::vector<EvalSample> eval_set =
      make_eval_set(cfg.env, cfg.eval_scenes, cfg.negatives_per_scene);

  CollectPolicy policy;
  if (cfg.collect_policy == "random") {
    policy.kind = CollectPolicy::Kind::Random;
  } else if (cfg.collect_policy == "oracle") {
    policy.kind = CollectPolicy::Kind::Oracle;
  } else if (cfg.collect_policy == "oracle_eps") {
    policy.kind = CollectPolicy::Kind::OracleEps;
    policy.eps = cfg.collect_eps;
  } else {
    throw ConfigError("unknown collect_policy: " + cfg.collect_policy);
  }
  std::vector<ReplaySample> points =
      collect_offline(cfg.env, policy, cfg.train_points, mix_seed(seed, 0xB0FFull));
  ReplayBuffer buffer(std::max(cfg.train_points, 1));
  for (auto& p : points) buffer.push(std::move(p));

  TrainConfig tc = cfg.train;
  tc.method = method;
  tc.seed = mix_seed(seed, 0x72417ull);
  RngStream init_rng(mix_seed(seed, 0x1217ull));
  OnlineTrainer trainer(tc, ConvSacModel::init(tc.net, init_rng));

  std::ofstream csv;
  if (!csv_path.empty()) {
    csv.open(csv_path);
    if (!csv) throw ConfigError("cannot open " + csv_path);
    csv << "epoch,L_critic_l,L_actor_l,L_critic_u,L_actor_u,mean_lambda,accepted_pixels,"
           "nan_aborts,eval_mse\n";
  }

  SingleRunResult res;
  char line[512];
  auto eval_model = [&]() {
    return evaluate_mse(tc.net, cfg.eval_ema ? trainer.ema().shadow : trainer.model(),
                        eval_set);
  };
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double cl = 0, al = 0, cu = 0, au = 0, ml = 0;
    long long acc_px = 0;
    int aborted = 0, counted = 0;
    for (int k = 0; k < cfg.steps_per_epoch; ++k) {
      LossBreakdown lb = trainer.train_step(buffer);
      if (lb.nan_abort) {
        ++aborted;
        continue;
      }
      ++counted;
      cl += lb.critic_labeled;
      al += lb.actor_labeled;
      cu += lb.critic_unlabeled;
      au += lb.actor_unlabeled;
      ml += lb.mean_lambda;
      acc_px += lb.accepted_pixels;
    }
    if (counted > 0) {
      cl /= counted;
      al /= counted;
      cu /= counted;
      au /= counted;
      ml /= counted;
    }
    const bool do_eval = epoch == cfg.epochs || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0);
    double mse = std::numeric_limits<double>::quiet_NaN();
    if (do_eval) mse = eval_model();
    res.epoch_mse.push_back(mse);
    if (csv.is_open()) {
      std::snprintf(line, sizeof(line), "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%lld,%d,", epoch, cl,
                    al, cu, au, ml, acc_px, aborted);
      csv << line;
      if (do_eval) {
        std::snprintf(line, sizeof(line), "%.17g", mse);
        csv << line;
      }
      csv << "\n";
    }
    if (epoch == cfg.epochs) res.final_mse = mse;
  }
  res.nan_events = trainer.nan_events();
  if (!checkpoint_path.empty())
    save_checkpoint(checkpoint_path, trainer.model(), trainer.ema());
  return res;
}

MatrixSummary run_matrix(const ExperimentConfig& cfg) {
  if (cfg.entries.empty()) throw ConfigError("run_matrix: no matrix entries");
  const std::string root = resolve_out_dir(cfg.out_dir);
  std::filesystem::create_directories(root);
  {
    std::ofstream f(root + "/config.json");
    f << experiment_config_to_json(cfg);
  }

  MatrixSummary summary;
  for (const MatrixEntry& entry : cfg.entries) {
    for (std::uint64_t seed : cfg.seeds) {
      const std::string run_dir = root + "/" + sanitize(entry.label) + "/" + std::to_string(seed);
      std::filesystem::create_directories(run_dir);
      const std::string manifest_path = run_dir + "/manifest.json";
      const std::string fp = run_fingerprint(cfg, entry, seed);

      RunResult rr;
      rr.entry = entry.label;
      rr.seed = seed;
      bool resumed = false;
      if (std::filesystem::exists(manifest_path)) {
        std::ifstream mf(manifest_path);
        json m;
        try {
          mf >> m;
          if (m.value("fingerprint", "") == fp && m.value("status", "") == "completed") {
            rr.final_mse = m.at("final_mse").get<double>();
            rr.nan_events = m.at("nan_events").get<long long>();
            rr.wall_seconds = m.value("wall_seconds", 0.0);
            rr.skipped = true;
            resumed = true;
          }
        } catch (const std::exception&) {
          resumed = false;  // rewrite the run
        }
      }
      if (!resumed) {
        const auto t0 = std::chrono::steady_clock::now();
        SingleRunResult r = run_training(cfg, entry.method, seed, run_dir + "/curve.csv",
                                         run_dir + "/checkpoint.json");
        rr.final_mse = r.final_mse;
        rr.nan_events = r.nan_events;
        rr.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        ++summary.executed;
        json m = {{"fingerprint", fp},
                  {"status", "completed"},
                  {"entry", entry.label},
                  {"seed", seed},
                  {"final_mse", rr.final_mse},
                  {"nan_events", rr.nan_events},
                  {"wall_seconds", rr.wall_seconds}};
        std::ofstream mf(manifest_path);
        mf << m.dump(2);
      }
      summary.runs.push_back(rr);
    }
  }

  // baseline median over method-none runs
  std::vector<double> baseline;
  for (std::size_t e = 0; e < cfg.entries.size(); ++e) {
    if (cfg.entries[e].method.method != SslMethod::None) continue;
    for (std::size_t s = 0; s < cfg.seeds.size(); ++s)
      baseline.push_back(summary.runs[e * cfg.seeds.size() + s].final_mse);
  }
  if (!baseline.empty()) {
    std::sort(baseline.begin(), baseline.end());
    const std::size_t n = baseline.size();
    summary.baseline_median =
        n % 2 ? baseline[n / 2] : 0.5 * (baseline[n / 2 - 1] + baseline[n / 2]);
  }
  for (RunResult& rr : summary.runs) {
    rr.diverged = rr.nan_events > 0 ||
                  (summary.baseline_median > 0.0 && rr.final_mse > 100.0 * summary.baseline_median);
  }

  for (std::size_t e = 0; e < cfg.entries.size(); ++e) {
    EntrySummary es;
    es.entry = cfg.entries[e].label;
    const std::size_t n = cfg.seeds.size();
    double mean = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      const RunResult& rr = summary.runs[e * n + s];
      mean += rr.final_mse;
      es.diverged_runs += rr.diverged ? 1 : 0;
    }
    mean /= static_cast<double>(n);
    es.mean_mse = mean;
    if (n >= 2) {
      double ss = 0.0;
      for (std::size_t s = 0; s < n; ++s) {
        const double d = summary.runs[e * n + s].final_mse - mean;
        ss += d * d;
      }
      es.std_mse = std::sqrt(ss / static_cast<double>(n - 1));
      es.std_valid = true;
    }
    summary.entries.push_back(es);
  }

  json js;
  js["runs"] = json::array();
  for (const RunResult& rr : summary.runs)
    js["runs"].push_back({{"entry", rr.entry},
                          {"seed", rr.seed},
                          {"final_mse", rr.final_mse},
                          {"nan_events", rr.nan_events},
                          {"diverged", rr.diverged},
                          {"resumed", rr.skipped},
                          {"wall_seconds", rr.wall_seconds}});
  js["entries"] = json::array();
  for (const EntrySummary& es : summary.entries) {
    json je = {{"entry", es.entry},
               {"mean_mse", es.mean_mse},
               {"diverged_runs", es.diverged_runs}};
    if (es.std_valid) je["std_mse"] = es.std_mse;
    js["entries"].push_back(je);
  }
  js["baseline_median"] = summary.baseline_median;
  std::ofstream sf(root + "/summary.json");
  sf << js.dump(2);
  return summary;
}

}  // namespace sslgrasp
