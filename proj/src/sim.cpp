#include "sslgrasp/sim.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "sslgrasp/errors.hpp"

namespace sslgrasp {

using ad::Tensor;

namespace {

constexpr double kGraspConeRad = 0.26179938779914943654;  // 15 degrees
constexpr double kQualityEdge = 0.3;
constexpr double kQualityRampPx = 3.0;

double object_surface_height(const ObjectSpec& o, double x, double y) {
  return o.base_height + o.sx * (x - o.cx) + o.sy * (y - o.cy);
}

// Signed distance (in pixels) from the pixel to the object edge, positive
// inside. Negative means not covered.
double edge_distance(const ObjectSpec& o, double x, double y) {
  if (o.kind == ObjectSpec::Kind::Disc) {
    const double d = std::sqrt((x - o.cx) * (x - o.cx) + (y - o.cy) * (y - o.cy));
    return o.rx - d;
  }
  const double dx = o.rx - std::abs(x - o.cx);
  const double dy = o.ry - std::abs(y - o.cy);
  return dx < dy ? dx : dy;
}

void write_doubles(std::ofstream& f, const std::vector<double>& v) {
  f.write(reinterpret_cast<const char*>(v.data()),
          static_cast<std::streamsize>(v.size() * sizeof(double)));
}

void read_doubles(std::ifstream& f, std::vector<double>& v) {
  f.read(reinterpret_cast<char*>(v.data()),
         static_cast<std::streamsize>(v.size() * sizeof(double)));
  if (!f) throw ConfigError("scene binary truncated");
}

}  // namespace

void render_scene(Scene& scene) {
  const SceneSpec& spec = scene.spec;
  const int H = spec.height, W = spec.width;
  scene.state = Tensor({7, H, W});
  scene.gt.quality = Tensor({H, W});
  scene.gt.action = Tensor({3, H, W});
  scene.gt.background = Tensor({H, W});
  scene.owner.assign(static_cast<std::size_t>(H) * W, -1);

  for (int h = 0; h < H; ++h) {
    for (int w = 0; w < W; ++w) {
      const double x = w, y = h;
      const bool wall = h < spec.wall_width || w < spec.wall_width ||
                        h >= H - spec.wall_width || w >= W - spec.wall_width;
      int owner = -1;
      double top = wall ? spec.wall_height : 0.0;
      for (std::size_t i = 0; i < scene.objects.size(); ++i) {
        const ObjectSpec& o = scene.objects[i];
        if (edge_distance(o, x, y) < 0.0) continue;
        const double z = object_surface_height(o, x, y);
        if (owner == -1 || z > top) {
          owner = static_cast<int>(i);
          top = z;
        }
      }
      scene.owner[static_cast<std::size_t>(h) * W + w] = owner;

      double nx = 0.0, ny = 0.0, nz = 1.0;
      double r, g, b;
      double quality = 0.0;
      Vec3 act{0.0, 0.0, 0.0};
      if (owner >= 0) {
        const ObjectSpec& o = scene.objects[owner];
        const Vec3 n = normalize3({-o.sx, -o.sy, 1.0});
        nx = n[0];
        ny = n[1];
        nz = n[2];
        const double shade = 0.7 + 0.3 * nz;
        r = o.rgb[0] * shade;
        g = o.rgb[1] * shade;
        b = o.rgb[2] * shade;
        const double d = edge_distance(o, x, y);
        const double ramp = d < kQualityRampPx ? d / kQualityRampPx : 1.0;
        quality = kQualityEdge + (1.0 - kQualityEdge) * ramp;
        act = dir_to_euler({-n[0], -n[1], -n[2]}, 0.0);
      } else if (wall) {
        r = g = b = 0.25;
      } else {
        r = g = b = 0.4;
      }
      scene.state.at3(0, h, w) = r;
      scene.state.at3(1, h, w) = g;
      scene.state.at3(2, h, w) = b;
      scene.state.at3(3, h, w) = nx;
      scene.state.at3(4, h, w) = ny;
      scene.state.at3(5, h, w) = nz;
      scene.state.at3(6, h, w) = top;
      scene.gt.quality.at2(h, w) = quality;
      scene.gt.background.at2(h, w) = owner >= 0 ? 0.0 : 1.0;
      for (int c = 0; c < 3; ++c) scene.gt.action.at3(c, h, w) = act[c];
    }
  }
}

Scene generate_scene(const SceneSpec& spec) {
  if (spec.height < 16 || spec.width < 16)
    throw UsageError("generate_scene: H and W must be at least 16");
  if (spec.min_objects < 0 || spec.max_objects < spec.min_objects)
    throw ConfigError("generate_scene: bad object count range");
  Scene scene;
  scene.spec = spec;
  RngStream rng(mix_seed(spec.seed, 0x5ce9e));

  const int count = spec.min_objects == spec.max_objects
                        ? spec.min_objects
                        : spec.min_objects +
                              rng.uniform_int(spec.max_objects - spec.min_objects + 1);
  for (int i = 0; i < count; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < spec.placement_retries && !placed; ++attempt) {
      ObjectSpec o;
      o.kind = rng.bernoulli(0.5) ? ObjectSpec::Kind::Disc : ObjectSpec::Kind::Box;
      o.rx = rng.uniform(spec.min_radius, spec.max_radius);
      o.ry = o.kind == ObjectSpec::Kind::Box ? rng.uniform(spec.min_radius, spec.max_radius)
                                             : o.rx;
      const double margin_x = spec.wall_width + o.rx + 0.5;
      const double margin_y = spec.wall_width + o.ry + 0.5;
      if (2.0 * margin_x >= spec.width - 1 || 2.0 * margin_y >= spec.height - 1)
        throw GenerationError("object radius does not fit bin interior");
      o.cx = rng.uniform(margin_x, spec.width - 1 - margin_x);
      o.cy = rng.uniform(margin_y, spec.height - 1 - margin_y);
      o.base_height = rng.uniform(spec.min_base_height, spec.max_base_height);
      if (!rng.bernoulli(spec.flat_fraction)) {
        o.sx = rng.uniform(-spec.max_tilt_slope, spec.max_tilt_slope);
        o.sy = rng.uniform(-spec.max_tilt_slope, spec.max_tilt_slope);
      }
      for (int c = 0; c < 3; ++c) o.rgb[c] = rng.uniform(0.2, 0.9);

      bool collides = false;
      for (const ObjectSpec& other : scene.objects) {
        const double dx = o.cx - other.cx, dy = o.cy - other.cy;
        const double ra = std::max(o.rx, o.ry), rb = std::max(other.rx, other.ry);
        if (std::sqrt(dx * dx + dy * dy) < 0.6 * (ra + rb)) {
          collides = true;
          break;
        }
      }
      if (!collides) {
        scene.objects.push_back(o);
        placed = true;
      }
    }
    if (!placed)
      throw GenerationError("could not place object " + std::to_string(i) + " after " +
                            std::to_string(spec.placement_retries) + " retries");
  }
  render_scene(scene);
  return scene;
}

int execute_grasp(const Scene& scene, int h, int w, const Vec3& action, RngStream* rng) {
  const int H = scene.spec.height, W = scene.spec.width;
  if (h < 0 || w < 0 || h >= H || w >= W)
    throw UsageError("execute_grasp: pixel out of bounds");
  const double q = scene.gt.quality.at2(h, w);
  Vec3 gt_act;
  for (int c = 0; c < 3; ++c) gt_act[c] = scene.gt.action.at3(c, h, w);
  const double dev = angle_between(euler_to_dir(action), euler_to_dir(gt_act));
  if (dev > kGraspConeRad) return 0;
  if (scene.spec.bernoulli_reward) {
    if (!rng) throw UsageError("execute_grasp: bernoulli mode requires an rng");
    return rng->bernoulli(q) ? 1 : 0;
  }
  return q >= 0.5 ? 1 : 0;
}

bool remove_object_at(Scene& scene, int h, int w) {
  const int idx = scene.owner[static_cast<std::size_t>(h) * scene.spec.width + w];
  if (idx < 0) return false;
  scene.objects.erase(scene.objects.begin() + idx);
  render_scene(scene);
  return true;
}

std::vector<EvalSample> make_eval_set(const SceneSpec& spec, int n_scenes,
                                      int negatives_per_scene) {
  if (n_scenes < 1) throw UsageError("make_eval_set: n_scenes must be >= 1");
  std::vector<EvalSample> out;
  out.reserve(static_cast<std::size_t>(n_scenes) * (1 + negatives_per_scene));
  for (int i = 0; i < n_scenes; ++i) {
    SceneSpec s = spec;
    s.seed = mix_seed(spec.seed, 1000000ull + static_cast<std::uint64_t>(i));
    Scene scene = generate_scene(s);
    RngStream rng(mix_seed(spec.seed, 2000000ull + static_cast<std::uint64_t>(i)));

    EvalSample grasped;
    grasped.state = scene.state;
    grasped.h = rng.uniform_int(s.height);
    grasped.w = rng.uniform_int(s.width);
    for (int c = 0; c < 3; ++c) grasped.action[c] = scene.gt.action.at3(c, grasped.h, grasped.w);
    grasped.reward = execute_grasp(scene, grasped.h, grasped.w, grasped.action);
    out.push_back(std::move(grasped));

    if (negatives_per_scene > 0) {
      std::vector<std::pair<int, int>> bg;
      for (int h = 0; h < s.height; ++h)
        for (int w = 0; w < s.width; ++w)
          if (scene.gt.background.at2(h, w) > 0.5) bg.emplace_back(h, w);
      for (int k = 0; k < negatives_per_scene; ++k) {
        const auto [h, w] = bg[rng.uniform_int(static_cast<int>(bg.size()))];
        EvalSample neg;
        neg.state = scene.state;
        neg.h = h;
        neg.w = w;
        neg.action = {rng.uniform(-3.14159265358979323846, 3.14159265358979323846),
                      rng.uniform(-0.78539816339744830962, 0.78539816339744830962),
                      rng.uniform(-0.78539816339744830962, 0.78539816339744830962)};
        neg.reward = 0;
        neg.is_background_negative = true;
        out.push_back(std::move(neg));
      }
    }
  }
  return out;
}

// ---- serialization ----

namespace {

nlohmann::json spec_to_json(const SceneSpec& s) {
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
          {"placement_retries", s.placement_retries},
          {"bernoulli_reward", s.bernoulli_reward}};
}

SceneSpec spec_from_json(const nlohmann::json& j) {
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
  s.placement_retries = j.value("placement_retries", s.placement_retries);
  s.bernoulli_reward = j.value("bernoulli_reward", s.bernoulli_reward);
  return s;
}

nlohmann::json object_to_json(const ObjectSpec& o) {
  return {{"kind", o.kind == ObjectSpec::Kind::Disc ? "disc" : "box"},
          {"cx", o.cx},
          {"cy", o.cy},
          {"rx", o.rx},
          {"ry", o.ry},
          {"base_height", o.base_height},
          {"sx", o.sx},
          {"sy", o.sy},
          {"rgb", o.rgb}};
}

ObjectSpec object_from_json(const nlohmann::json& j) {
  ObjectSpec o;
  o.kind = j.at("kind").get<std::string>() == "disc" ? ObjectSpec::Kind::Disc
                                                     : ObjectSpec::Kind::Box;
  o.cx = j.at("cx").get<double>();
  o.cy = j.at("cy").get<double>();
  o.rx = j.at("rx").get<double>();
  o.ry = j.at("ry").get<double>();
  o.base_height = j.at("base_height").get<double>();
  o.sx = j.at("sx").get<double>();
  o.sy = j.at("sy").get<double>();
  o.rgb = j.at("rgb").get<std::array<double, 3>>();
  return o;
}

}  // namespace

void save_scene(const std::string& path_prefix, const Scene& scene) {
  nlohmann::json j;
  j["format"] = "sslgrasp-scene";
  j["version"] = 1;
  j["spec"] = spec_to_json(scene.spec);
  j["channels"] = {"r", "g", "b", "nx", "ny", "nz", "height"};
  nlohmann::json objs = nlohmann::json::array();
  for (const auto& o : scene.objects) objs.push_back(object_to_json(o));
  j["objects"] = objs;
  std::ofstream jf(path_prefix + ".json");
  if (!jf) throw ConfigError("cannot write " + path_prefix + ".json");
  jf << j.dump(2);

  std::ofstream bf(path_prefix + ".bin", std::ios::binary);
  if (!bf) throw ConfigError("cannot write " + path_prefix + ".bin");
  write_doubles(bf, scene.state.v);
  write_doubles(bf, scene.gt.quality.v);
  write_doubles(bf, scene.gt.action.v);
  write_doubles(bf, scene.gt.background.v);
}

Scene load_scene(const std::string& path_prefix) {
  std::ifstream jf(path_prefix + ".json");
  if (!jf) throw ConfigError("cannot open " + path_prefix + ".json");
  nlohmann::json j;
  jf >> j;
  if (j.value("format", "") != "sslgrasp-scene" || j.value("version", 0) != 1)
    throw ConfigError("unsupported scene format in " + path_prefix);
  Scene scene;
  scene.spec = spec_from_json(j.at("spec"));
  for (const auto& jo : j.at("objects")) scene.objects.push_back(object_from_json(jo));
  const int H = scene.spec.height, W = scene.spec.width;
  scene.state = Tensor({7, H, W});
  scene.gt.quality = Tensor({H, W});
  scene.gt.action = Tensor({3, H, W});
  scene.gt.background = Tensor({H, W});
  std::ifstream bf(path_prefix + ".bin", std::ios::binary);
  if (!bf) throw ConfigError("cannot open " + path_prefix + ".bin");
  read_doubles(bf, scene.state.v);
  read_doubles(bf, scene.gt.quality.v);
  read_doubles(bf, scene.gt.action.v);
  read_doubles(bf, scene.gt.background.v);
  scene.owner.assign(static_cast<std::size_t>(H) * W, -1);
  // owner indices are derivable from the object list
  Scene rerender = scene;
  render_scene(rerender);
  scene.owner = rerender.owner;
  return scene;
}

void save_eval_set(const std::string& dir, const std::vector<EvalSample>& samples,
                   const SceneSpec& spec) {
  std::filesystem::create_directories(dir);
  nlohmann::json index;
  index["format"] = "sslgrasp-evalset";
  index["version"] = 1;
  index["spec"] = spec_to_json(spec);
  nlohmann::json list = nlohmann::json::array();
  int state_id = -1;
  const ad::Tensor* prev = nullptr;
  for (const auto& s : samples) {
    if (!prev || !(prev->shape == s.state.shape && prev->v == s.state.v)) {
      ++state_id;
      char name[32];
      std::snprintf(name, sizeof(name), "state_%05d", state_id);
      nlohmann::json header;
      header["format"] = "sslgrasp-state";
      header["version"] = 1;
      header["height"] = s.state.shape[1];
      header["width"] = s.state.shape[2];
      std::ofstream jf(dir + "/" + name + ".json");
      jf << header.dump(2);
      std::ofstream bf(dir + "/" + name + ".bin", std::ios::binary);
      write_doubles(bf, s.state.v);
      prev = &s.state;
    }
    char name[32];
    std::snprintf(name, sizeof(name), "state_%05d", state_id);
    list.push_back({{"state", name},
                    {"h", s.h},
                    {"w", s.w},
                    {"action", s.action},
                    {"reward", s.reward},
                    {"negative", s.is_background_negative}});
  }
  index["samples"] = list;
  std::ofstream f(dir + "/index.json");
  if (!f) throw ConfigError("cannot write " + dir + "/index.json");
  f << index.dump(2);
}

std::vector<EvalSample> load_eval_set(const std::string& dir) {
  std::ifstream f(dir + "/index.json");
  if (!f) throw ConfigError("cannot open " + dir + "/index.json");
  nlohmann::json index;
  f >> index;
  if (index.value("format", "") != "sslgrasp-evalset" || index.value("version", 0) != 1)
    throw ConfigError("unsupported eval set format in " + dir);
  std::vector<EvalSample> out;
  std::string cached_name;
  Tensor cached_state;
  for (const auto& js : index.at("samples")) {
    const std::string name = js.at("state").get<std::string>();
    if (name != cached_name) {
      std::ifstream jf(dir + "/" + name + ".json");
      if (!jf) throw ConfigError("cannot open " + dir + "/" + name + ".json");
      nlohmann::json header;
      jf >> header;
      const int H = header.at("height").get<int>();
      const int W = header.at("width").get<int>();
      cached_state = Tensor({7, H, W});
      std::ifstream bf(dir + "/" + name + ".bin", std::ios::binary);
      if (!bf) throw ConfigError("cannot open " + dir + "/" + name + ".bin");
      read_doubles(bf, cached_state.v);
      cached_name = name;
    }
    EvalSample s;
    s.state = cached_state;
    s.h = js.at("h").get<int>();
    s.w = js.at("w").get<int>();
    s.action = js.at("action").get<Vec3>();
    s.reward = js.at("reward").get<int>();
    s.is_background_negative = js.at("negative").get<bool>();
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace sslgrasp
