#pragma once

#include <optional>
#include <string>
#include <vector>

#include "sslgrasp/geometry.hpp"
#include "sslgrasp/rng.hpp"
#include "sslgrasp/tensor.hpp"

namespace sslgrasp {

// Procedural bin scenes with analytically known grasp quality. States are
// 7-channel (C,H,W) tensors: rgb (3), surface normals (3), height in mm (1).
struct SceneSpec {
  std::uint64_t seed = 0;
  int height = 32;
  int width = 32;
  int min_objects = 10;
  int max_objects = 12;
  double min_radius = 3.0;
  double max_radius = 5.0;
  double min_base_height = 10.0;
  double max_base_height = 30.0;
  double max_tilt_slope = 0.10;  // top-surface gradient magnitude per axis
  double flat_fraction = 0.5;    // fraction of objects with level tops
  int wall_width = 2;
  double wall_height = 40.0;
  int placement_retries = 100;
  bool bernoulli_reward = false;
};

struct ObjectSpec {
  enum class Kind { Disc, Box };
  Kind kind = Kind::Disc;
  double cx = 0, cy = 0;      // center (x: column, y: row)
  double rx = 0, ry = 0;      // radius / half extents
  double base_height = 0;     // top-surface height at the center
  double sx = 0, sy = 0;      // top-surface slope
  std::array<double, 3> rgb{};
};

struct GroundTruth {
  ad::Tensor quality;     // (H,W) in [0,1]
  ad::Tensor action;      // (3,H,W) Euler angles of -surface normal
  ad::Tensor background;  // (H,W) in {0,1}
};

struct Scene {
  SceneSpec spec;
  std::vector<ObjectSpec> objects;
  ad::Tensor state;        // (7,H,W)
  GroundTruth gt;
  std::vector<int> owner;  // per-pixel topmost object index, -1 = background
};

// Deterministic per seed. Throws GenerationError if an object cannot be
// placed within spec.placement_retries attempts.
Scene generate_scene(const SceneSpec& spec);

// Re-renders state/gt/owner from the object list (used after removals).
void render_scene(Scene& scene);

// Reward is 1 iff gt quality at the pixel is >= 0.5 and the executed
// approach direction is within 15 degrees of the ground-truth action.
// With spec.bernoulli_reward a success instead fires with probability
// equal to the gt quality (rng required).
int execute_grasp(const Scene& scene, int h, int w, const Vec3& action,
                  RngStream* rng = nullptr);

// Removes the object owning pixel (h,w), if any, and re-renders.
// Returns true if an object was removed.
bool remove_object_at(Scene& scene, int h, int w);

struct EvalSample {
  ad::Tensor state;
  int h = 0, w = 0;
  Vec3 action{};
  int reward = 0;
  bool is_background_negative = false;
};

// One gt-executed grasp per scene at a uniformly random pixel plus
// negatives_per_scene background pixels with random actions (reward 0).
std::vector<EvalSample> make_eval_set(const SceneSpec& spec, int n_scenes,
                                      int negatives_per_scene);

// ---- serialization (binary channel dump + JSON header) ----

void save_scene(const std::string& path_prefix, const Scene& scene);
Scene load_scene(const std::string& path_prefix);

void save_eval_set(const std::string& dir, const std::vector<EvalSample>& samples,
                   const SceneSpec& spec);
std::vector<EvalSample> load_eval_set(const std::string& dir);

}  // namespace sslgrasp
