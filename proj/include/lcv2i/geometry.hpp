#pragma once

#include <cmath>
#include <limits>
#include <optional>

#include "lcv2i/common.hpp"

namespace lcv2i {

struct Vec3 {
  double x = 0, y = 0, z = 0;
};

inline Vec3 operator-(const Vec3& a, const Vec3& b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
inline Vec3 operator+(const Vec3& a, const Vec3& b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
inline Vec3 operator*(double s, const Vec3& a) { return {s * a.x, s * a.y, s * a.z}; }
inline double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
inline Vec3 normalized(const Vec3& a) {
  const double n = norm(a);
  return {a.x / n, a.y / n, a.z / n};
}

// Planar rigid transform (x, y, yaw).
struct Pose2 {
  double x = 0, y = 0, yaw = 0;

  Vec3 to_global(const Vec3& local) const {
    const double c = std::cos(yaw), s = std::sin(yaw);
    return {x + c * local.x - s * local.y, y + s * local.x + c * local.y, local.z};
  }

  Vec3 to_local(const Vec3& global) const {
    const double c = std::cos(yaw), s = std::sin(yaw);
    const double dx = global.x - x, dy = global.y - y;
    return {c * dx + s * dy, -s * dx + c * dy, global.z};
  }
};

// Axis-aligned BEV box: center in meters, length along x, width along y.
struct Box2 {
  double cx = 0, cy = 0, length = 0, width = 0;

  double x0() const { return cx - length / 2; }
  double x1() const { return cx + length / 2; }
  double y0() const { return cy - width / 2; }
  double y1() const { return cy + width / 2; }
  double area() const { return length * width; }
};

inline double box_iou(const Box2& a, const Box2& b) {
  const double ix = std::max(0.0, std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0()));
  const double iy = std::max(0.0, std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0()));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni <= 0.0 ? 0.0 : inter / uni;
}

// Upright box with a footprint and a height, resting on the ground plane.
struct Box3 {
  Box2 footprint;
  double height = 0;
};

struct Ray {
  Vec3 origin;
  Vec3 dir;  // unit length
};

// Slab test against [x0,x1] x [y0,y1] x [0,h]; returns entry distance.
inline std::optional<double> ray_box_intersect(const Ray& r, const Box3& b) {
  double tmin = 0.0, tmax = std::numeric_limits<double>::infinity();
  const double lo[3] = {b.footprint.x0(), b.footprint.y0(), 0.0};
  const double hi[3] = {b.footprint.x1(), b.footprint.y1(), b.height};
  const double o[3] = {r.origin.x, r.origin.y, r.origin.z};
  const double d[3] = {r.dir.x, r.dir.y, r.dir.z};
  for (int i = 0; i < 3; ++i) {
    if (std::abs(d[i]) < 1e-15) {
      if (o[i] < lo[i] || o[i] > hi[i]) return std::nullopt;
      continue;
    }
    double t0 = (lo[i] - o[i]) / d[i];
    double t1 = (hi[i] - o[i]) / d[i];
    if (t0 > t1) std::swap(t0, t1);
    tmin = std::max(tmin, t0);
    tmax = std::min(tmax, t1);
    if (tmin > tmax) return std::nullopt;
  }
  if (tmin <= 1e-9) return std::nullopt;  // origin inside or behind
  return tmin;
}

// Pinhole camera on a planar pose at a mount height, optical axis horizontal
// along the pose yaw. Image u grows to the right, v grows downward.
struct Camera {
  double fx = 64, fy = 64, cx = 48, cy = 48;
  std::size_t width = 96, height = 96;

  struct Projection {
    double u = 0, v = 0, depth = 0;
    bool in_front = false;
    bool in_image = false;
  };

  Projection project(const Vec3& point_global, const Pose2& pose, double mount_height) const {
    const double cth = std::cos(pose.yaw), sth = std::sin(pose.yaw);
    const Vec3 d{point_global.x - pose.x, point_global.y - pose.y, point_global.z - mount_height};
    const Vec3 fwd{cth, sth, 0};
    const Vec3 right{sth, -cth, 0};
    Projection p;
    p.depth = dot(d, fwd);
    if (p.depth <= 1e-9) return p;
    p.in_front = true;
    p.u = cx + fx * dot(d, right) / p.depth;
    p.v = cy - fy * d.z / p.depth;
    p.in_image = p.u >= 0 && p.u < static_cast<double>(width) && p.v >= 0 &&
                 p.v < static_cast<double>(height);
    return p;
  }

  Ray pixel_ray(double u, double v, const Pose2& pose, double mount_height) const {
    const double cth = std::cos(pose.yaw), sth = std::sin(pose.yaw);
    const Vec3 fwd{cth, sth, 0};
    const Vec3 right{sth, -cth, 0};
    const Vec3 up{0, 0, 1};
    Vec3 dir = fwd + ((u - cx) / fx) * right + ((cy - v) / fy) * up;
    return Ray{{pose.x, pose.y, mount_height}, normalized(dir)};
  }
};

}  // namespace lcv2i
