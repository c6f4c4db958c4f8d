#include "sslgrasp/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "sslgrasp/errors.hpp"

namespace sslgrasp {

using ad::Tape;
using ad::Tensor;
using ad::VarId;

namespace {

Tensor draw_noise(RngStream& rng, int H, int W) {
  Tensor n({3, H, W});
  for (double& x : n.v) x = rng.normal();
  return n;
}

std::vector<Tensor*> critic_params(ConvSacModel& m) {
  return {&m.enc_w1, &m.enc_b1, &m.enc_w2, &m.enc_b2,
          &m.critic_w1, &m.critic_b1, &m.critic_w2, &m.critic_b2};
}

std::vector<const Tensor*> critic_params_const(const ConvSacModel& m) {
  return {&m.enc_w1, &m.enc_b1, &m.enc_w2, &m.enc_b2,
          &m.critic_w1, &m.critic_b1, &m.critic_w2, &m.critic_b2};
}

std::vector<Tensor*> actor_params(ConvSacModel& m) { return {&m.actor_w, &m.actor_b}; }

std::vector<const Tensor*> actor_params_const(const ConvSacModel& m) {
  return {&m.actor_w, &m.actor_b};
}

double trailing_success_rate(const std::vector<std::pair<int, int>>& bins, int window) {
  int succ = 0, att = 0;
  const int n = static_cast<int>(bins.size());
  for (int i = std::max(0, n - window); i < n; ++i) {
    succ += bins[i].first;
    att += bins[i].second;
  }
  return att > 0 ? static_cast<double>(succ) / att : 0.0;
}

}  // namespace

// ---- ReplayBuffer ----

ReplayBuffer::ReplayBuffer(int capacity) : capacity_(capacity) {
  if (capacity <= 0) throw ConfigError("replay buffer capacity must be positive");
  slots_.resize(capacity);
  ids_.assign(capacity, -1);
}

void ReplayBuffer::push(ReplaySample s) {
  const int slot = static_cast<int>(pushed_ % capacity_);
  slots_[slot] = std::move(s);
  ids_[slot] = pushed_;
  ++pushed_;
}

int ReplayBuffer::slot_of(int i) const {
  if (i < 0 || i >= size()) throw UsageError("replay buffer index out of range");
  if (pushed_ <= capacity_) return i;
  return static_cast<int>((pushed_ + i) % capacity_);
}

const ReplaySample& ReplayBuffer::at(int i) const { return slots_[slot_of(i)]; }

long long ReplayBuffer::sample_id(int i) const { return ids_[slot_of(i)]; }

// ---- step graph ----

StepGraph build_step_graph(Tape& tape, const ModelLeaves& leaves, const TrainConfig& cfg,
                           const std::vector<StepSample>& batch) {
  if (batch.empty()) throw UsageError("build_step_graph: empty batch");
  const NetConfig& net = cfg.net;
  StepGraph g;
  VarId acc_cl = tape.constant_scalar(0.0);
  VarId acc_al = tape.constant_scalar(0.0);
  VarId acc_cu = tape.constant_scalar(0.0);
  VarId acc_au = tape.constant_scalar(0.0);

  for (const StepSample& ss : batch) {
    const ReplaySample& s = *ss.sample;
    const int H = s.state.shape[1], W = s.state.shape[2];
    VarId state = tape.constant(normalize_state(net, s.state));
    VarId emb = encode(tape, net, leaves, state);

    // critic loss at the labeled pixel with the stored executed action
    Tensor amap({3, H, W});
    for (int c = 0; c < 3; ++c) amap.at3(c, s.h, s.w) = s.action[c];
    VarId q_map = critic_forward(tape, net, leaves, emb, tape.constant(amap));
    g.labeled_q_maps.push_back(q_map);
    VarId q_at = tape.pick_pixel(q_map, s.h, s.w);
    VarId lcl = tape.bce_map(q_at, tape.constant(Tensor::scalar(s.reward)));
    acc_cl = tape.add(acc_cl, lcl);

    // actor loss with a freshly sampled reparameterized action
    ActorOut ao = actor_forward(tape, net, leaves, emb, &ss.labeled_noise);
    VarId q_pi = critic_forward(tape, net, leaves, emb, ao.action);
    VarId lal =
        tape.sub(tape.mul_scalar(tape.pick_pixel(ao.logprob, s.h, s.w), cfg.entropy_alpha),
                 tape.pick_pixel(q_pi, s.h, s.w));
    acc_al = tape.add(acc_al, lal);

    bool any_weight = false;
    if (ss.has_unlabeled)
      for (double x : ss.lambda.v)
        if (x != 0.0) {
          any_weight = true;
          break;
        }
    if (any_weight) {
      VarId sstate = tape.constant(normalize_state(net, ss.strong_state));
      VarId semb = encode(tape, net, leaves, sstate);
      ActorOut sao = actor_forward(tape, net, leaves, semb, &ss.strong_noise);
      VarId sq = critic_forward(tape, net, leaves, semb, sao.action);
      g.strong_q_maps.push_back(sq);
      VarId lam = tape.constant(ss.lambda);
      VarId bce_u = tape.bce_map(sq, tape.constant(ss.pseudo_labels));
      const double inv_nu = 1.0 / (static_cast<double>(H) * W - 1.0);
      acc_cu = tape.add(acc_cu, tape.mul_scalar(tape.sum(tape.mul(lam, bce_u)), inv_nu));
      VarId au_map = tape.sub(tape.mul_scalar(sao.logprob, cfg.entropy_alpha), sq);
      acc_au = tape.add(acc_au, tape.mul_scalar(tape.sum(tape.mul(lam, au_map)), inv_nu));
    } else {
      g.strong_q_maps.push_back(-1);
    }
  }

  const double inv_b = 1.0 / static_cast<double>(batch.size());
  g.critic_labeled = tape.mul_scalar(acc_cl, inv_b);
  g.actor_labeled = tape.mul_scalar(acc_al, inv_b);
  g.critic_unlabeled = tape.mul_scalar(acc_cu, inv_b);
  g.actor_unlabeled = tape.mul_scalar(acc_au, inv_b);
  g.critic_total = tape.add(g.critic_labeled, g.critic_unlabeled);
  g.actor_total = tape.add(g.actor_labeled, g.actor_unlabeled);
  return g;
}

// ---- trainer ----

OnlineTrainer::OnlineTrainer(const TrainConfig& cfg, ConvSacModel model)
    : cfg_(cfg),
      model_(std::move(model)),
      ema_(EmaModel::from(model_)),
      critic_opt_(cfg.optim, critic_params_const(model_)),
      actor_opt_(cfg.optim, actor_params_const(model_)),
      thr_(make_threshold_state(cfg.method, 1, 1)),
      rng_(mix_seed(cfg.seed, 0x7124a1ull)) {}

void OnlineTrainer::update_thresholds(const ReplayBuffer& buffer,
                                      const std::vector<StepSample>& batch,
                                      const std::vector<Tensor>& q_aligned,
                                      const std::vector<Tensor>& stats_masks,
                                      const std::vector<long long>& batch_ids) {
  const int H = thr_.H, W = thr_.W;
  if (cfg_.method.method == SslMethod::FreeMatch) {
    std::vector<UnlabeledPrediction> preds;
    preds.reserve(batch.size());
    for (std::size_t b = 0; b < batch.size(); ++b)
      preds.push_back({&q_aligned[b], &stats_masks[b]});
    freematch_update(thr_, preds);
    return;
  }
  if (cfg_.method.method != SslMethod::FlexMatch) return;

  if (cfg_.method.flexmatch_exact) {
    // full recount: fresh weak views of every live sample under the EMA model
    RngStream ex(mix_seed(cfg_.seed, 0xF1e8ull + static_cast<std::uint64_t>(steps_)));
    const int n = buffer.size();
    std::vector<Tensor> qs(n), masks(n);
    std::vector<UnlabeledPrediction> preds;
    preds.reserve(n);
    for (int i = 0; i < n; ++i) {
      const ReplaySample& s = buffer.at(i);
      AugmentedView weak = weak_augment(s.state, cfg_.aug, ex);
      PlainForward pf = forward_plain(cfg_.net, ema_.shadow, weak.state, nullptr);
      qs[i] = std::move(pf.quality);
      Tensor m = weak.validity;
      if (auto px = transform_pixel(weak.transform, s.h, s.w, H, W))
        m.at2(px->first, px->second) = 0.0;
      masks[i] = std::move(m);
    }
    for (int i = 0; i < n; ++i) preds.push_back({&qs[i], &masks[i]});
    flexmatch_update(thr_, preds);
    return;
  }

  // amortized: refresh the tallies of the sampled slots, aggregate the rest
  for (std::size_t b = 0; b < batch.size(); ++b)
    flex_tallies_[batch_ids[b]] = flexmatch_tally(cfg_.method, q_aligned[b], stats_masks[b]);
  ++thr_.step;
  const double n_u = static_cast<double>(H) * W - 1.0;
  if (!cfg_.method.contextual) {
    std::array<double, 2> sigma{0.0, 0.0};
    double total = 0.0;
    for (int i = 0; i < buffer.size(); ++i) {
      auto it = flex_tallies_.find(buffer.sample_id(i));
      if (it == flex_tallies_.end()) {
        total += n_u;  // not visited yet: counts as unused
        continue;
      }
      sigma[0] += it->second.count[0];
      sigma[1] += it->second.count[1];
      total += it->second.total;
    }
    flexmatch_finalize(thr_, sigma, total);
  } else {
    Tensor smap({2, H, W});
    Tensor tmap({H, W});
    for (int i = 0; i < buffer.size(); ++i) {
      auto it = flex_tallies_.find(buffer.sample_id(i));
      if (it == flex_tallies_.end()) {
        const ReplaySample& s = buffer.at(i);
        for (int h = 0; h < H; ++h)
          for (int w = 0; w < W; ++w)
            if (!(h == s.h && w == s.w)) tmap.at2(h, w) += 1.0;
        continue;
      }
      for (std::size_t k = 0; k < smap.v.size(); ++k) smap.v[k] += it->second.count_map.v[k];
      for (std::size_t k = 0; k < tmap.v.size(); ++k) tmap.v[k] += it->second.total_map.v[k];
    }
    flexmatch_finalize_contextual(thr_, smap, tmap);
  }

  if (flex_tallies_.size() > static_cast<std::size_t>(buffer.size()) * 2 + 16) {
    const long long oldest = buffer.total_pushed() - buffer.size();
    for (auto it = flex_tallies_.begin(); it != flex_tallies_.end();)
      it = it->first < oldest ? flex_tallies_.erase(it) : std::next(it);
  }
}

LossBreakdown OnlineTrainer::train_step(const ReplayBuffer& buffer) {
  if (buffer.size() == 0) throw UsageError("train_step: replay buffer is empty");
  const int B = cfg_.batch_size;
  const bool ssl = cfg_.method.method != SslMethod::None;
  const int H = buffer.at(0).state.shape[1];
  const int W = buffer.at(0).state.shape[2];
  if (!thr_ready_) {
    thr_ = make_threshold_state(cfg_.method, H, W);
    thr_ready_ = true;
  }
  if (thr_.H != H || thr_.W != W)
    throw UsageError("train_step: state resolution changed mid-run");

  std::vector<StepSample> batch(B);
  std::vector<Tensor> q_aligned(B), stats_masks(B), validity(B);
  std::vector<std::optional<std::pair<int, int>>> labeled_px(B);
  std::vector<long long> batch_ids(B, -1);

  for (int b = 0; b < B; ++b) {
    const int i = rng_.uniform_int(buffer.size());
    batch_ids[b] = buffer.sample_id(i);
    StepSample& ss = batch[b];
    ss.sample = &buffer.at(i);
    ss.labeled_noise = draw_noise(rng_, H, W);
    if (!ssl) continue;
    AugmentedView weak = weak_augment(ss.sample->state, cfg_.aug, rng_);
    AugmentedView strong = strong_augment(ss.sample->state, cfg_.aug, rng_);
    ss.strong_noise = draw_noise(rng_, H, W);

    PlainForward pf = forward_plain(cfg_.net, ema_.shadow, weak.state, nullptr);
    auto aligned = align_map(pf.quality, weak.transform, strong.transform, Interp::Nearest);
    auto weak_ok = align_map(weak.validity, weak.transform, strong.transform, Interp::Nearest);
    Tensor valid({H, W});
    for (std::size_t k = 0; k < valid.v.size(); ++k)
      valid.v[k] = (strong.validity.v[k] > 0.5 && aligned.second.v[k] > 0.5 &&
                    weak_ok.first.v[k] > 0.5)
                       ? 1.0
                       : 0.0;
    labeled_px[b] = transform_pixel(strong.transform, ss.sample->h, ss.sample->w, H, W);
    Tensor smask = valid;
    if (labeled_px[b]) smask.at2(labeled_px[b]->first, labeled_px[b]->second) = 0.0;

    ss.strong_state = std::move(strong.state);
    ss.has_unlabeled = true;
    q_aligned[b] = std::move(aligned.first);
    stats_masks[b] = std::move(smask);
    validity[b] = std::move(valid);
  }

  if (ssl) {
    update_thresholds(buffer, batch, q_aligned, stats_masks, batch_ids);
    apply_lower_bound(thr_);
  }

  LossBreakdown out;
  out.tau_note = tau_summary(thr_);
  const double n_u = static_cast<double>(H) * W - 1.0;
  if (ssl) {
    for (int b = 0; b < B; ++b) {
      LambdaResult lam = compose_lambda(thr_, q_aligned[b], labeled_px[b], validity[b]);
      Tensor lam_final =
          apply_topk_budget(lam.lambda, lam.pseudo.confidence, cfg_.method.topk_budget);
      int nz = 0;
      double lsum = 0.0;
      for (double x : lam_final.v) {
        if (x != 0.0) ++nz;
        lsum += x;
      }
      out.accepted_pixels += nz;
      out.mean_lambda += lsum;
      batch[b].lambda = std::move(lam_final);
      batch[b].pseudo_labels = std::move(lam.pseudo.labels);
    }
    out.mean_lambda /= n_u * B;
  }

  try {
    Tape tape;
    ModelLeaves leaves = lift_model(tape, model_, true);
    StepGraph g = build_step_graph(tape, leaves, cfg_, batch);
    out.critic_labeled = tape.scalar_value(g.critic_labeled);
    out.actor_labeled = tape.scalar_value(g.actor_labeled);
    out.critic_unlabeled = tape.scalar_value(g.critic_unlabeled);
    out.actor_unlabeled = tape.scalar_value(g.actor_unlabeled);
    out.critic_total = tape.scalar_value(g.critic_total);
    out.actor_total = tape.scalar_value(g.actor_total);

    tape.backward(g.critic_total);
    std::vector<Tensor> cgrads = {tape.grad(leaves.enc_w1),    tape.grad(leaves.enc_b1),
                                  tape.grad(leaves.enc_w2),    tape.grad(leaves.enc_b2),
                                  tape.grad(leaves.critic_w1), tape.grad(leaves.critic_b1),
                                  tape.grad(leaves.critic_w2), tape.grad(leaves.critic_b2)};
    tape.zero_grad();
    tape.backward(g.actor_total);
    std::vector<Tensor> agrads = {tape.grad(leaves.actor_w), tape.grad(leaves.actor_b)};

    std::vector<const Tensor*> cg, ag;
    for (const Tensor& t : cgrads) cg.push_back(&t);
    for (const Tensor& t : agrads) ag.push_back(&t);
    auto cp = critic_params(model_);
    auto ap = actor_params(model_);
    critic_opt_.step(cp, cg);
    actor_opt_.step(ap, ag);
    ema_.update(model_);
  } catch (const NumericError&) {
    ++nan_events_;
    out.nan_abort = true;
  }
  ++steps_;
  return out;
}

// ---- online loop ----

OnlineResult online_loop(const OnlineConfig& cfg, OnlineTrainer* trainer) {
  if (!cfg.oracle_policy && !trainer)
    throw UsageError("online_loop: a trainer (model) is required unless oracle_policy is set");
  OnlineResult res;
  ReplayBuffer buffer(cfg.buffer_capacity);
  RngStream act_rng(mix_seed(cfg.train.seed, 0xAC7ull));
  RngStream env_rng(mix_seed(cfg.env.seed, 0xE27ull));

  std::ofstream log;
  if (!cfg.log_path.empty()) {
    log.open(cfg.log_path);
    if (!log) throw ConfigError("online_loop: cannot open log " + cfg.log_path);
    log << "step,grasp_index,reward,trailing_sr_15bins,L_critic_l,L_actor_l,L_critic_u,"
           "L_actor_u,mean_lambda,accepted_pixels,tau_summary\n";
  }
  char line[512];

  long long scene_counter = 0;
  auto next_scene = [&]() -> Scene {
    for (int tries = 0; tries < 100; ++tries) {
      SceneSpec sp = cfg.env;
      sp.seed = mix_seed(cfg.env.seed, 0x5C30ull + static_cast<std::uint64_t>(scene_counter++));
      try {
        return generate_scene(sp);
      } catch (const GenerationError&) {
        // skip this seed
      }
    }
    throw GenerationError("online_loop: 100 consecutive scene generation failures");
  };

  Scene scene = next_scene();
  std::vector<std::pair<int, int>> bins;
  bins.emplace_back(0, 0);
  res.bins_started = 1;
  int bin_attempts = 0;
  long long global_step = 0;

  for (int attempt = 0; attempt < cfg.grasp_attempts; ++attempt) {
    if (bin_attempts >= cfg.attempts_per_bin || (scene.objects.empty() && bin_attempts > 0)) {
      scene = next_scene();
      bins.emplace_back(0, 0);
      ++res.bins_started;
      bin_attempts = 0;
    }

    GraspChoice choice;
    if (cfg.oracle_policy) {
      choice = select_grasp(scene.gt.quality, scene.gt.action);
    } else {
      PlainForward pf = forward_plain(trainer->config().net, trainer->model(), scene.state,
                                      cfg.explore ? &act_rng : nullptr);
      choice = select_grasp(pf.quality, pf.action);
    }

    Tensor state_before = scene.state;
    const int r = execute_grasp(scene, choice.h, choice.w, choice.action,
                                cfg.env.bernoulli_reward ? &env_rng : nullptr);
    ++bin_attempts;
    bins.back().second += 1;
    bins.back().first += r;
    res.rewards.push_back(r);
    const double trailing = trailing_success_rate(bins, 15);
    res.final_trailing_sr = trailing;
    if (r) remove_object_at(scene, choice.h, choice.w);

    if (cfg.learn && trainer) {
      ReplaySample rs;
      rs.state = std::move(state_before);
      rs.h = choice.h;
      rs.w = choice.w;
      rs.action = choice.action;
      rs.reward = static_cast<double>(r);
      buffer.push(std::move(rs));
      for (int k = 0; k < trainer->config().steps_per_grasp; ++k) {
        LossBreakdown lb = trainer->train_step(buffer);
        ++global_step;
        if (log.is_open()) {
          std::snprintf(line, sizeof(line),
                        "%lld,%d,%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%d,%s\n", global_step,
                        attempt, r, trailing, lb.critic_labeled, lb.actor_labeled,
                        lb.critic_unlabeled, lb.actor_unlabeled, lb.mean_lambda,
                        lb.accepted_pixels, lb.tau_note.c_str());
          log << line;
        }
      }
    } else {
      ++global_step;
      if (log.is_open()) {
        std::snprintf(line, sizeof(line), "%lld,%d,%d,%.17g,0,0,0,0,0,0,-\n", global_step,
                      attempt, r, trailing);
        log << line;
      }
    }

    if (trainer && cfg.checkpoint_every > 0 && (attempt + 1) % cfg.checkpoint_every == 0 &&
        !cfg.checkpoint_prefix.empty()) {
      save_checkpoint(cfg.checkpoint_prefix + "_" + std::to_string(attempt + 1) + ".json",
                      trainer->model(), trainer->ema());
    }
  }

  if (trainer) res.nan_events = trainer->nan_events();
  return res;
}

}  // namespace sslgrasp
