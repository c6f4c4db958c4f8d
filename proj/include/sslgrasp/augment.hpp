#pragma once

#include <optional>
#include <utility>

#include "sslgrasp/geometry.hpp"
#include "sslgrasp/rng.hpp"
#include "sslgrasp/tensor.hpp"

namespace sslgrasp {

enum class Interp { Nearest, Bilinear };

// In-plane rotation about the frame center followed by a pixel shift.
// Forward map on continuous coordinates (x: column, y: row):
//   p' = R(rot) (p - c) + c + (dx, dy)
struct GeometricTransform {
  double rot_deg = 0.0;
  double dx = 0.0;
  double dy = 0.0;
  Interp interp = Interp::Bilinear;
};

struct AugmentedView {
  ad::Tensor state;            // (7,H,W)
  GeometricTransform transform;
  ad::Tensor validity;         // (H,W), 0 where the preimage falls outside the frame
};

// Defaults follow the weak/strong pipelines used for training: weak
// rotation/shift of 10, strong rotation 180 and shift 30, depth noise of
// 5 height units and 10% normal zero-out.
struct AugmentConfig {
  double weak_rot_deg = 10.0;
  double weak_shift_px = 10.0;
  bool weak_color_jitter = true;
  double weak_brightness_jitter = 0.1;
  double weak_contrast_jitter = 0.1;

  double strong_rot_deg = 180.0;
  double strong_shift_px = 30.0;
  int strong_color_ops = 2;
  bool op_autocontrast = true;
  bool op_brightness = true;
  bool op_contrast = true;
  bool op_equalize = true;
  bool op_posterize = true;
  bool op_sharpness = true;
  bool op_solarize = true;
  double depth_noise = 5.0;
  double normal_zero_rate = 0.10;
};

// Warps all 7 channels (bilinear), re-rotating normal vectors in vector
// space and renormalizing them to unit length where nonzero.
AugmentedView apply_geometric(const ad::Tensor& state, const GeometricTransform& t);

AugmentedView weak_augment(const ad::Tensor& state, const AugmentConfig& cfg, RngStream& rng);
AugmentedView strong_augment(const ad::Tensor& state, const AugmentConfig& cfg, RngStream& rng);

// Resamples a (H,W) map recorded in the source view's frame into the target
// view's frame (target o source^-1). Returns the aligned map and a validity
// mask that is 0 where the pixel has no source correspondence.
std::pair<ad::Tensor, ad::Tensor> align_map(const ad::Tensor& map,
                                            const GeometricTransform& source,
                                            const GeometricTransform& target, Interp interp);

// Rotates per-pixel approach directions consistently with the image-plane
// rotation; shifts leave angles unchanged. Values only, no resampling.
ad::Tensor transform_action_map(const ad::Tensor& actions, const GeometricTransform& t);

// Image of a pixel under the forward map, rounded to the nearest pixel;
// nullopt if it lands outside the frame.
std::optional<std::pair<int, int>> transform_pixel(const GeometricTransform& t, int h, int w,
                                                   int H, int W);

}  // namespace sslgrasp
