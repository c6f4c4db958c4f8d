#include "sslgrasp/augment.hpp"

#include <algorithm>
#include <cmath>

#include "sslgrasp/errors.hpp"

namespace sslgrasp {

using ad::Tensor;

namespace {

constexpr double kPi = 3.14159265358979323846;

// Exact sin/cos for multiples of 90 degrees so label warps round-trip
// bit-exactly; everything else goes through libm.
void rot_sincos(double deg, double& c, double& s) {
  double m = std::fmod(deg, 360.0);
  if (m < 0.0) m += 360.0;
  if (m == 0.0) {
    c = 1.0;
    s = 0.0;
  } else if (m == 90.0) {
    c = 0.0;
    s = 1.0;
  } else if (m == 180.0) {
    c = -1.0;
    s = 0.0;
  } else if (m == 270.0) {
    c = 0.0;
    s = -1.0;
  } else {
    const double rad = deg * kPi / 180.0;
    c = std::cos(rad);
    s = std::sin(rad);
  }
}

struct FrameMap {
  double c, s;        // rotation applied source->dest
  double cx, cy;
  double dx, dy;

  // dest pixel -> source coordinates
  void inverse(double x, double y, double& sx, double& sy) const {
    const double px = x - cx - dx;
    const double py = y - cy - dy;
    sx = c * px + s * py + cx;
    sy = -s * px + c * py + cy;
  }
  // source pixel -> dest coordinates
  void forward(double x, double y, double& ox, double& oy) const {
    const double px = x - cx;
    const double py = y - cy;
    ox = c * px - s * py + cx + dx;
    oy = s * px + c * py + cy + dy;
  }
};

FrameMap make_frame_map(const GeometricTransform& t, int H, int W) {
  FrameMap f;
  rot_sincos(t.rot_deg, f.c, f.s);
  f.cx = (W - 1) * 0.5;
  f.cy = (H - 1) * 0.5;
  f.dx = t.dx;
  f.dy = t.dy;
  return f;
}

bool in_frame(double x, double y, int H, int W) {
  return x >= 0.0 && x <= W - 1 && y >= 0.0 && y <= H - 1;
}

double sample_nearest(const Tensor& map, double x, double y) {
  const int W = map.shape[1], H = map.shape[0];
  int ix = static_cast<int>(std::lround(x));
  int iy = static_cast<int>(std::lround(y));
  ix = std::clamp(ix, 0, W - 1);
  iy = std::clamp(iy, 0, H - 1);
  return map.at2(iy, ix);
}

double sample_bilinear(const Tensor& map, double x, double y) {
  const int W = map.shape[1], H = map.shape[0];
  const int x0 = std::clamp(static_cast<int>(std::floor(x)), 0, W - 1);
  const int y0 = std::clamp(static_cast<int>(std::floor(y)), 0, H - 1);
  const int x1 = std::min(x0 + 1, W - 1);
  const int y1 = std::min(y0 + 1, H - 1);
  const double fx = std::clamp(x - x0, 0.0, 1.0);
  const double fy = std::clamp(y - y0, 0.0, 1.0);
  const double a = map.at2(y0, x0) * (1.0 - fx) + map.at2(y0, x1) * fx;
  const double b = map.at2(y1, x0) * (1.0 - fx) + map.at2(y1, x1) * fx;
  return a * (1.0 - fy) + b * fy;
}

Tensor channel_view(const Tensor& state, int c) {
  const int H = state.shape[1], W = state.shape[2];
  Tensor out({H, W});
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  std::copy(state.v.begin() + c * plane, state.v.begin() + (c + 1) * plane, out.v.begin());
  return out;
}

// ---- color ops on RGB channels (values in [0,1]) ----

void clamp01(Tensor& state, int c_from, int c_to) {
  const std::size_t plane = static_cast<std::size_t>(state.shape[1]) * state.shape[2];
  for (int c = c_from; c < c_to; ++c)
    for (std::size_t i = 0; i < plane; ++i) {
      double& x = state.v[c * plane + i];
      x = x < 0.0 ? 0.0 : (x > 1.0 ? 1.0 : x);
    }
}

void op_brightness(Tensor& state, double factor) {
  const std::size_t plane = static_cast<std::size_t>(state.shape[1]) * state.shape[2];
  for (int c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < plane; ++i) state.v[c * plane + i] *= factor;
  clamp01(state, 0, 3);
}

void op_contrast(Tensor& state, double factor) {
  const std::size_t plane = static_cast<std::size_t>(state.shape[1]) * state.shape[2];
  double mean = 0.0;
  for (int c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < plane; ++i) mean += state.v[c * plane + i];
  mean /= 3.0 * plane;
  for (int c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < plane; ++i) {
      double& x = state.v[c * plane + i];
      x = mean + factor * (x - mean);
    }
  clamp01(state, 0, 3);
}

void op_autocontrast(Tensor& state) {
  const std::size_t plane = static_cast<std::size_t>(state.shape[1]) * state.shape[2];
  for (int c = 0; c < 3; ++c) {
    double lo = 1.0, hi = 0.0;
    for (std::size_t i = 0; i < plane; ++i) {
      const double x = state.v[c * plane + i];
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
    if (hi - lo < 1e-12) continue;
    for (std::size_t i = 0; i < plane; ++i) {
      double& x = state.v[c * plane + i];
      x = (x - lo) / (hi - lo);
    }
  }
}

void op_equalize(Tensor& state) {
  const std::size_t plane = static_cast<std::size_t>(state.shape[1]) * state.shape[2];
  for (int c = 0; c < 3; ++c) {
    int hist[256] = {0};
    for (std::size_t i = 0; i < plane; ++i) {
      const double x = std::clamp(state.v[c * plane + i], 0.0, 1.0);
      ++hist[static_cast<int>(x * 255.0 + 0.5)];
    }
    double cdf[256];
    double acc = 0.0;
    for (int b = 0; b < 256; ++b) {
      acc += hist[b];
      cdf[b] = acc;
    }
    if (acc <= 0.0) continue;
    for (std::size_t i = 0; i < plane; ++i) {
      double& x = state.v[c * plane + i];
      const int b = static_cast<int>(std::clamp(x, 0.0, 1.0) * 255.0 + 0.5);
      x = cdf[b] / acc;
    }
  }
}

void op_posterize(Tensor& state, int bits) {
  const std::size_t plane = static_cast<std::size_t>(state.shape[1]) * state.shape[2];
  const double levels = static_cast<double>(1 << bits);
  for (int c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < plane; ++i) {
      double& x = state.v[c * plane + i];
      x = std::floor(std::clamp(x, 0.0, 1.0) * (levels - 1.0) + 0.5) / (levels - 1.0);
    }
}

void op_sharpness(Tensor& state, double factor) {
  const int H = state.shape[1], W = state.shape[2];
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  for (int c = 0; c < 3; ++c) {
    std::vector<double> smooth(plane);
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w) {
        double acc = 0.0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int yy = std::clamp(h + dy, 0, H - 1);
            const int xx = std::clamp(w + dx, 0, W - 1);
            acc += state.v[c * plane + static_cast<std::size_t>(yy) * W + xx];
          }
        smooth[static_cast<std::size_t>(h) * W + w] = acc / 9.0;
      }
    for (std::size_t i = 0; i < plane; ++i) {
      double& x = state.v[c * plane + i];
      x = smooth[i] + factor * (x - smooth[i]);
    }
  }
  clamp01(state, 0, 3);
}

void op_solarize(Tensor& state, double threshold) {
  const std::size_t plane = static_cast<std::size_t>(state.shape[1]) * state.shape[2];
  for (int c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < plane; ++i) {
      double& x = state.v[c * plane + i];
      if (x >= threshold) x = 1.0 - x;
    }
}

enum ColorOp {
  kAutoContrast,
  kBrightness,
  kContrast,
  kEqualize,
  kPosterize,
  kSharpness,
  kSolarize
};

void apply_color_op(Tensor& state, ColorOp op, double magnitude, double sign) {
  switch (op) {
    case kAutoContrast: op_autocontrast(state); break;
    case kBrightness: op_brightness(state, 1.0 + 0.9 * magnitude * sign); break;
    case kContrast: op_contrast(state, 1.0 + 0.9 * magnitude * sign); break;
    case kEqualize: op_equalize(state); break;
    case kPosterize: op_posterize(state, 8 - static_cast<int>(4.0 * magnitude)); break;
    case kSharpness: op_sharpness(state, 1.0 + 0.9 * magnitude * sign); break;
    case kSolarize: op_solarize(state, 1.0 - magnitude); break;
  }
}

}  // namespace

AugmentedView apply_geometric(const Tensor& state, const GeometricTransform& t) {
  if (state.rank() != 3 || state.shape[0] != 7)
    throw UsageError("apply_geometric: expected (7,H,W) state, got " + state.shape_str());
  const int H = state.shape[1], W = state.shape[2];
  AugmentedView view;
  view.transform = t;
  view.state = Tensor({7, H, W});
  view.validity = Tensor({H, W});
  const FrameMap f = make_frame_map(t, H, W);

  std::array<Tensor, 7> chans;
  for (int c = 0; c < 7; ++c) chans[c] = channel_view(state, c);

  for (int h = 0; h < H; ++h) {
    for (int w = 0; w < W; ++w) {
      double sx, sy;
      f.inverse(w, h, sx, sy);
      if (!in_frame(sx, sy, H, W)) continue;
      view.validity.at2(h, w) = 1.0;
      auto sample = [&](int c) {
        return t.interp == Interp::Nearest ? sample_nearest(chans[c], sx, sy)
                                           : sample_bilinear(chans[c], sx, sy);
      };
      for (int c = 0; c < 3; ++c) view.state.at3(c, h, w) = sample(c);
      // normals: resample then rotate in vector space, keep unit length
      double nx = sample(3), ny = sample(4), nz = sample(5);
      const double rx = f.c * nx - f.s * ny;
      const double ry = f.s * nx + f.c * ny;
      nx = rx;
      ny = ry;
      const double len = std::sqrt(nx * nx + ny * ny + nz * nz);
      if (len > 1e-9) {
        nx /= len;
        ny /= len;
        nz /= len;
      }
      view.state.at3(3, h, w) = nx;
      view.state.at3(4, h, w) = ny;
      view.state.at3(5, h, w) = nz;
      view.state.at3(6, h, w) = sample(6);
    }
  }
  return view;
}

AugmentedView weak_augment(const Tensor& state, const AugmentConfig& cfg, RngStream& rng) {
  GeometricTransform t;
  t.rot_deg = rng.uniform(-cfg.weak_rot_deg, cfg.weak_rot_deg);
  t.dx = rng.uniform(-cfg.weak_shift_px, cfg.weak_shift_px);
  t.dy = rng.uniform(-cfg.weak_shift_px, cfg.weak_shift_px);
  AugmentedView view = apply_geometric(state, t);
  if (cfg.weak_color_jitter) {
    const double bf = rng.uniform(1.0 - cfg.weak_brightness_jitter, 1.0 + cfg.weak_brightness_jitter);
    const double cf = rng.uniform(1.0 - cfg.weak_contrast_jitter, 1.0 + cfg.weak_contrast_jitter);
    op_brightness(view.state, bf);
    op_contrast(view.state, cf);
  }
  return view;
}

AugmentedView strong_augment(const Tensor& state, const AugmentConfig& cfg, RngStream& rng) {
  GeometricTransform t;
  t.rot_deg = rng.uniform(-cfg.strong_rot_deg, cfg.strong_rot_deg);
  t.dx = rng.uniform(-cfg.strong_shift_px, cfg.strong_shift_px);
  t.dy = rng.uniform(-cfg.strong_shift_px, cfg.strong_shift_px);
  AugmentedView view = apply_geometric(state, t);

  std::vector<ColorOp> enabled;
  if (cfg.op_autocontrast) enabled.push_back(kAutoContrast);
  if (cfg.op_brightness) enabled.push_back(kBrightness);
  if (cfg.op_contrast) enabled.push_back(kContrast);
  if (cfg.op_equalize) enabled.push_back(kEqualize);
  if (cfg.op_posterize) enabled.push_back(kPosterize);
  if (cfg.op_sharpness) enabled.push_back(kSharpness);
  if (cfg.op_solarize) enabled.push_back(kSolarize);
  if (!enabled.empty()) {
    for (int k = 0; k < cfg.strong_color_ops; ++k) {
      const ColorOp op = enabled[rng.uniform_int(static_cast<int>(enabled.size()))];
      const double magnitude = rng.u01();
      const double sign = rng.bernoulli(0.5) ? 1.0 : -1.0;
      apply_color_op(view.state, op, magnitude, sign);
    }
  }

  const int H = state.shape[1], W = state.shape[2];
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  if (cfg.depth_noise > 0.0) {
    for (std::size_t i = 0; i < plane; ++i)
      view.state.v[6 * plane + i] += rng.uniform(-cfg.depth_noise, cfg.depth_noise);
  }
  if (cfg.normal_zero_rate > 0.0) {
    for (std::size_t i = 0; i < plane; ++i) {
      if (rng.bernoulli(cfg.normal_zero_rate)) {
        view.state.v[3 * plane + i] = 0.0;
        view.state.v[4 * plane + i] = 0.0;
        view.state.v[5 * plane + i] = 0.0;
      }
    }
  }
  return view;
}

std::pair<Tensor, Tensor> align_map(const Tensor& map, const GeometricTransform& source,
                                    const GeometricTransform& target, Interp interp) {
  if (map.rank() != 2) throw UsageError("align_map: expected (H,W) map");
  const int H = map.shape[0], W = map.shape[1];
  const FrameMap fs = make_frame_map(source, H, W);
  const FrameMap ft = make_frame_map(target, H, W);
  Tensor out({H, W});
  Tensor validity({H, W});
  for (int h = 0; h < H; ++h) {
    for (int w = 0; w < W; ++w) {
      double ox, oy;  // original-frame coordinates
      ft.inverse(w, h, ox, oy);
      double sx, sy;  // source-view coordinates
      fs.forward(ox, oy, sx, sy);
      if (!in_frame(sx, sy, H, W)) continue;
      validity.at2(h, w) = 1.0;
      out.at2(h, w) = interp == Interp::Nearest ? sample_nearest(map, sx, sy)
                                                : sample_bilinear(map, sx, sy);
    }
  }
  return {std::move(out), std::move(validity)};
}

Tensor transform_action_map(const Tensor& actions, const GeometricTransform& t) {
  if (actions.rank() != 3 || actions.shape[0] != 3)
    throw UsageError("transform_action_map: expected (3,H,W) action map");
  double m = std::fmod(t.rot_deg, 360.0);
  if (m < 0.0) m += 360.0;
  if (m == 0.0) return actions;  // shifts leave angles unchanged
  double c, s;
  rot_sincos(t.rot_deg, c, s);
  const double rad = t.rot_deg * kPi / 180.0;
  const int H = actions.shape[1], W = actions.shape[2];
  Tensor out({3, H, W});
  for (int h = 0; h < H; ++h) {
    for (int w = 0; w < W; ++w) {
      const Vec3 a{actions.at3(0, h, w), actions.at3(1, h, w), actions.at3(2, h, w)};
      const Vec3 dir = rotate_z(euler_to_dir(a), c, s);
      const Vec3 a2 = dir_to_euler(dir, wrap_to_pi(a[0] + rad));
      for (int k = 0; k < 3; ++k) out.at3(k, h, w) = a2[k];
    }
  }
  return out;
}

std::optional<std::pair<int, int>> transform_pixel(const GeometricTransform& t, int h, int w,
                                                   int H, int W) {
  const FrameMap f = make_frame_map(t, H, W);
  double x, y;
  f.forward(w, h, x, y);
  const long hx = std::lround(x), hy = std::lround(y);
  if (hx < 0 || hy < 0 || hx >= W || hy >= H) return std::nullopt;
  return std::make_pair(static_cast<int>(hy), static_cast<int>(hx));
}

}  // namespace sslgrasp
