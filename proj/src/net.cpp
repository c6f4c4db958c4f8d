#include "sslgrasp/net.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

namespace sslgrasp {

using ad::Tensor;
using ad::VarId;

namespace {

Tensor he_conv(RngStream& rng, int cout, int cin, int kh, int kw) {
  Tensor w({cout, cin, kh, kw});
  const double std = std::sqrt(2.0 / (cin * kh * kw));
  for (double& x : w.v) x = std * rng.normal();
  return w;
}

double log_half_range_sum(const NetConfig& cfg) {
  return std::log(cfg.angle_half_range[0]) + std::log(cfg.angle_half_range[1]) +
         std::log(cfg.angle_half_range[2]);
}

}  // namespace

ConvSacModel ConvSacModel::init(const NetConfig& cfg, RngStream& rng) {
  ConvSacModel m;
  m.cfg = cfg;
  m.enc_w1 = he_conv(rng, cfg.enc_channels, cfg.state_channels, 3, 3);
  m.enc_b1 = Tensor({cfg.enc_channels});
  m.enc_w2 = he_conv(rng, cfg.enc_channels, cfg.enc_channels, 3, 3);
  m.enc_b2 = Tensor({cfg.enc_channels});
  m.actor_w = he_conv(rng, 6, cfg.enc_channels, 1, 1);
  for (double& x : m.actor_w.v) x *= 0.1;  // start near straight-down, small spread
  m.actor_b = Tensor({6});
  for (int i = 3; i < 6; ++i) m.actor_b.v[i] = cfg.log_std_bias_init;
  m.critic_w1 = he_conv(rng, cfg.critic_hidden, cfg.enc_channels + 3, 1, 1);
  m.critic_b1 = Tensor({cfg.critic_hidden});
  m.critic_w2 = he_conv(rng, 1, cfg.critic_hidden, 1, 1);
  m.critic_b2 = Tensor({1});
  return m;
}

std::vector<Tensor*> ConvSacModel::params() {
  return {&enc_w1, &enc_b1,    &enc_w2,    &enc_b2,    &actor_w,
          &actor_b, &critic_w1, &critic_b1, &critic_w2, &critic_b2};
}

std::vector<const Tensor*> ConvSacModel::params() const {
  return {&enc_w1, &enc_b1,    &enc_w2,    &enc_b2,    &actor_w,
          &actor_b, &critic_w1, &critic_b1, &critic_w2, &critic_b2};
}

std::vector<std::string> ConvSacModel::param_names() {
  return {"enc_w1",  "enc_b1",    "enc_w2",    "enc_b2",    "actor_w",
          "actor_b", "critic_w1", "critic_b1", "critic_w2", "critic_b2"};
}

long long ConvSacModel::param_count() const {
  long long n = 0;
  for (const Tensor* p : params()) n += p->numel();
  return n;
}

ModelLeaves lift_model(ad::Tape& t, const ConvSacModel& m, bool requires_grad) {
  ModelLeaves l;
  l.enc_w1 = t.leaf(m.enc_w1, requires_grad);
  l.enc_b1 = t.leaf(m.enc_b1, requires_grad);
  l.enc_w2 = t.leaf(m.enc_w2, requires_grad);
  l.enc_b2 = t.leaf(m.enc_b2, requires_grad);
  l.actor_w = t.leaf(m.actor_w, requires_grad);
  l.actor_b = t.leaf(m.actor_b, requires_grad);
  l.critic_w1 = t.leaf(m.critic_w1, requires_grad);
  l.critic_b1 = t.leaf(m.critic_b1, requires_grad);
  l.critic_w2 = t.leaf(m.critic_w2, requires_grad);
  l.critic_b2 = t.leaf(m.critic_b2, requires_grad);
  return l;
}

Tensor normalize_state(const NetConfig& cfg, const Tensor& state) {
  if (state.rank() != 3 || state.shape[0] != cfg.state_channels)
    throw UsageError("normalize_state: expected (" + std::to_string(cfg.state_channels) +
                     ",H,W) state, got " + state.shape_str());
  Tensor out = state;
  const std::size_t plane = static_cast<std::size_t>(state.shape[1]) * state.shape[2];
  for (int c = 0; c < cfg.state_channels; ++c) {
    const double off = cfg.input_offset[c], sc = cfg.input_scale[c];
    for (std::size_t i = 0; i < plane; ++i) {
      double& x = out.v[c * plane + i];
      x = (x - off) * sc;
    }
  }
  return out;
}

VarId encode(ad::Tape& t, const NetConfig&, const ModelLeaves& l, VarId state_norm) {
  VarId h1 = t.relu(t.conv2d(state_norm, l.enc_w1, l.enc_b1));
  return t.relu(t.conv2d(h1, l.enc_w2, l.enc_b2));
}

ActorOut actor_forward(ad::Tape& t, const NetConfig& cfg, const ModelLeaves& l,
                       VarId embedding, const Tensor* noise) {
  const Tensor& emb = t.value(embedding);
  const int H = emb.shape[1], W = emb.shape[2];
  VarId head = t.conv2d(embedding, l.actor_w, l.actor_b);  // (6,H,W)
  ActorOut out;
  out.mean = t.slice_channels(head, 0, 3);
  out.log_std = t.clamp(t.slice_channels(head, 3, 3), cfg.log_std_min, cfg.log_std_max);
  if (noise) {
    if (noise->shape != std::vector<int>{3, H, W})
      throw UsageError("actor_forward: noise shape mismatch");
    VarId eps = t.constant(*noise);
    out.pre_squash = t.add(out.mean, t.mul(t.exp(out.log_std), eps));
  } else {
    out.pre_squash = out.mean;
  }
  Tensor ranges({3, H, W});
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < H * W; ++i)
      ranges.v[static_cast<std::size_t>(c) * H * W + i] = cfg.angle_half_range[c];
  out.action = t.mul(t.tanh(out.pre_squash), t.constant(ranges));
  VarId ll = ad::gaussian_logprob(t, out.pre_squash, out.mean, out.log_std, true);
  out.logprob = t.add_scalar(ll, -log_half_range_sum(cfg));
  return out;
}

VarId critic_forward(ad::Tape& t, const NetConfig&, const ModelLeaves& l, VarId embedding,
                     VarId action) {
  const Tensor& av = t.value(action);
  if (av.rank() != 3 || av.shape[0] != 3)
    throw UsageError("critic_forward: action map must be (3,H,W), got " + av.shape_str());
  VarId joint = t.concat_channels(embedding, action);
  VarId h = t.relu(t.conv2d(joint, l.critic_w1, l.critic_b1));
  VarId q = t.sigmoid(t.conv2d(h, l.critic_w2, l.critic_b2));  // (1,H,W)
  return t.sum_channels(q);                                    // (H,W)
}

// ---- plain forwards ----

Tensor encode_plain(const NetConfig& cfg, const ConvSacModel& m, const Tensor& state) {
  Tensor x = normalize_state(cfg, state);
  Tensor h1 = ad::relu_forward(ad::conv2d_forward(x, m.enc_w1, m.enc_b1));
  return ad::relu_forward(ad::conv2d_forward(h1, m.enc_w2, m.enc_b2));
}

PlainForward forward_plain(const NetConfig& cfg, const ConvSacModel& m, const Tensor& state,
                           RngStream* rng) {
  PlainForward out;
  out.embedding = encode_plain(cfg, m, state);
  const int H = out.embedding.shape[1], W = out.embedding.shape[2];
  Tensor head = ad::conv2d_forward(out.embedding, m.actor_w, m.actor_b);
  out.pre_squash = Tensor({3, H, W});
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  for (int c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < plane; ++i) {
      const double mean = head.v[c * plane + i];
      double u = mean;
      if (rng) {
        double ls = head.v[(c + 3) * plane + i];
        ls = ls < cfg.log_std_min ? cfg.log_std_min : (ls > cfg.log_std_max ? cfg.log_std_max : ls);
        u = mean + std::exp(ls) * rng->normal();
      }
      out.pre_squash.v[c * plane + i] = u;
    }
  }
  out.action = Tensor({3, H, W});
  for (int c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < plane; ++i)
      out.action.v[c * plane + i] =
          std::tanh(out.pre_squash.v[c * plane + i]) * cfg.angle_half_range[c];
  Tensor joint = ad::concat_channels_forward(out.embedding, out.action);
  Tensor h = ad::relu_forward(ad::conv2d_forward(joint, m.critic_w1, m.critic_b1));
  Tensor q = ad::sigmoid_forward(ad::conv2d_forward(h, m.critic_w2, m.critic_b2));
  out.quality = Tensor({H, W});
  std::copy(q.v.begin(), q.v.end(), out.quality.v.begin());
  return out;
}

double quality_at_plain(const NetConfig& cfg, const ConvSacModel& m, const Tensor& embedding,
                        int h, int w, const std::array<double, 3>& action) {
  const int C = embedding.shape[0];
  const int hidden = cfg.critic_hidden;
  double pre = m.critic_b2.v[0];
  for (int j = 0; j < hidden; ++j) {
    double acc = m.critic_b1.v[j];
    for (int c = 0; c < C; ++c)
      acc += m.critic_w1.v[static_cast<std::size_t>(j) * (C + 3) + c] * embedding.at3(c, h, w);
    for (int c = 0; c < 3; ++c)
      acc += m.critic_w1.v[static_cast<std::size_t>(j) * (C + 3) + C + c] * action[c];
    if (acc > 0.0) pre += m.critic_w2.v[j] * acc;
  }
  return ad::stable_sigmoid(pre);
}

GraspChoice select_grasp(const Tensor& quality, const Tensor& actions) {
  if (quality.rank() != 2) throw UsageError("select_grasp: quality must be (H,W)");
  const int H = quality.shape[0], W = quality.shape[1];
  GraspChoice choice;
  double best = quality.at2(0, 0);
  for (int h = 0; h < H; ++h) {
    for (int w = 0; w < W; ++w) {
      const double q = quality.at2(h, w);
      if (q > best) {
        best = q;
        choice.h = h;
        choice.w = w;
      }
    }
  }
  choice.confidence = best;
  for (int c = 0; c < 3; ++c) choice.action[c] = actions.at3(c, choice.h, choice.w);
  return choice;
}

EmaModel EmaModel::from(const ConvSacModel& live) {
  EmaModel e;
  e.shadow = live;
  e.momentum = live.cfg.ema_momentum;
  return e;
}

void EmaModel::update(const ConvSacModel& live) {
  auto dst = shadow.params();
  auto src = live.params();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (!dst[i]->same_shape(*src[i])) throw UsageError("ema_update: shape mismatch");
    auto& d = dst[i]->v;
    const auto& s = src[i]->v;
    for (std::size_t k = 0; k < d.size(); ++k)
      d[k] = momentum * d[k] + (1.0 - momentum) * s[k];
  }
}

// ---- checkpoints ----

namespace {
nlohmann::json tensor_to_json(const Tensor& t) {
  return {{"shape", t.shape}, {"data", t.v}};
}

Tensor tensor_from_json(const nlohmann::json& j) {
  Tensor t(j.at("shape").get<std::vector<int>>());
  auto data = j.at("data").get<std::vector<double>>();
  if (static_cast<int>(data.size()) != t.numel())
    throw ConfigError("checkpoint: blob size does not match shape");
  t.v = std::move(data);
  return t;
}

nlohmann::json params_to_json(const ConvSacModel& m) {
  nlohmann::json j = nlohmann::json::object();
  auto names = ConvSacModel::param_names();
  auto ps = m.params();
  for (std::size_t i = 0; i < ps.size(); ++i) j[names[i]] = tensor_to_json(*ps[i]);
  return j;
}

void params_from_json(const nlohmann::json& j, ConvSacModel& m) {
  auto names = ConvSacModel::param_names();
  auto ps = m.params();
  for (std::size_t i = 0; i < ps.size(); ++i) *ps[i] = tensor_from_json(j.at(names[i]));
}
}  // namespace

void save_checkpoint(const std::string& path, const ConvSacModel& live, const EmaModel& ema) {
  nlohmann::json j;
  j["format"] = "sslgrasp-checkpoint";
  j["version"] = 1;
  j["net"] = {{"state_channels", live.cfg.state_channels},
              {"enc_channels", live.cfg.enc_channels},
              {"critic_hidden", live.cfg.critic_hidden},
              {"angle_half_range", live.cfg.angle_half_range},
              {"ema_momentum", live.cfg.ema_momentum}};
  j["params"] = params_to_json(live);
  j["ema"] = params_to_json(ema.shadow);
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot open checkpoint for writing: " + path);
  f << j.dump();
}

void load_checkpoint(const std::string& path, ConvSacModel& live, EmaModel& ema) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open checkpoint: " + path);
  nlohmann::json j;
  f >> j;
  if (j.value("format", "") != "sslgrasp-checkpoint" || j.value("version", 0) != 1)
    throw ConfigError("unsupported checkpoint format in " + path);
  NetConfig cfg = live.cfg;
  const auto& n = j.at("net");
  cfg.state_channels = n.at("state_channels").get<int>();
  cfg.enc_channels = n.at("enc_channels").get<int>();
  cfg.critic_hidden = n.at("critic_hidden").get<int>();
  cfg.angle_half_range = n.at("angle_half_range").get<std::array<double, 3>>();
  cfg.ema_momentum = n.at("ema_momentum").get<double>();
  live.cfg = cfg;
  params_from_json(j.at("params"), live);
  ema.shadow.cfg = cfg;
  ema.momentum = cfg.ema_momentum;
  params_from_json(j.at("ema"), ema.shadow);
}

}  // namespace sslgrasp
