#pragma once

#include <array>
#include <cmath>

namespace sslgrasp {

using Vec3 = std::array<double, 3>;

// Gripper actions are Euler angles (yaw, pitch, roll). The approach
// direction is Rz(yaw) Ry(pitch) Rx(roll) applied to (0,0,-1), i.e. a
// zero action points straight down. x is the column axis, y the row axis,
// z points up.
inline Vec3 euler_to_dir(const Vec3& a) {
  const double cy = std::cos(a[0]), sy = std::sin(a[0]);
  const double cp = std::cos(a[1]), sp = std::sin(a[1]);
  const double cr = std::cos(a[2]), sr = std::sin(a[2]);
  // Ry(p) Rx(r) (0,0,-1) = (-cr*sp, sr, -cr*cp)
  const double x = -cr * sp, y = sr, z = -cr * cp;
  return {cy * x - sy * y, sy * x + cy * y, z};
}

// Recovers (pitch, roll) for a given downward direction and yaw. v must be
// unit length with |roll| < pi/2.
inline Vec3 dir_to_euler(const Vec3& v, double yaw) {
  const double cy = std::cos(yaw), sy = std::sin(yaw);
  const double ux = cy * v[0] + sy * v[1];
  const double uy = -sy * v[0] + cy * v[1];
  const double uz = v[2];
  double s = uy;
  s = s < -1.0 ? -1.0 : (s > 1.0 ? 1.0 : s);
  const double roll = std::asin(s);
  const double pitch = std::atan2(-ux, -uz);
  return {yaw, pitch, roll};
}

inline double dot3(const Vec3& a, const Vec3& b) {
  return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}

inline double norm3(const Vec3& a) { return std::sqrt(dot3(a, a)); }

inline Vec3 normalize3(const Vec3& a) {
  const double n = norm3(a);
  return {a[0] / n, a[1] / n, a[2] / n};
}

// Angle in radians between two (not necessarily unit) vectors.
inline double angle_between(const Vec3& a, const Vec3& b) {
  double c = dot3(a, b) / (norm3(a) * norm3(b));
  c = c < -1.0 ? -1.0 : (c > 1.0 ? 1.0 : c);
  return std::acos(c);
}

inline double wrap_to_pi(double a) {
  constexpr double kTwoPi = 6.28318530717958647692;
  while (a > 3.14159265358979323846) a -= kTwoPi;
  while (a < -3.14159265358979323846) a += kTwoPi;
  return a;
}

// Rotation about the vertical axis applied to a 3-vector (x: columns,
// y: rows).
inline Vec3 rotate_z(const Vec3& v, double cos_t, double sin_t) {
  return {cos_t * v[0] - sin_t * v[1], sin_t * v[0] + cos_t * v[1], v[2]};
}

}  // namespace sslgrasp
