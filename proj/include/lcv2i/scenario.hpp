#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "lcv2i/geometry.hpp"
#include "lcv2i/tensor.hpp"

namespace lcv2i {

struct SceneObject {
  std::string cls;  // "car" for detection targets, "wall" for static occluders
  double cx = 0, cy = 0, length = 0, width = 0, height = 0;

  Box2 footprint() const { return Box2{cx, cy, length, width}; }
  Box3 volume() const { return Box3{footprint(), height}; }
};

// Synthetic ground-truth world. Objects are detection targets; occluders are
// static geometry that blocks rays but carries no label.
struct Scene {
  std::uint64_t seed = 0;
  double extent = 16.0;  // half-size of the square world, meters
  std::vector<SceneObject> objects;
  std::vector<SceneObject> occluders;

  std::vector<Box3> all_volumes() const {
    std::vector<Box3> v;
    v.reserve(objects.size() + occluders.size());
    for (const auto& o : objects) v.push_back(o.volume());
    for (const auto& o : occluders) v.push_back(o.volume());
    return v;
  }
};

struct SensorRig {
  Pose2 pose;
  double mount_height = 1.8;
  std::size_t beams = 32;
  double azimuth_resolution = 2.0 * 3.14159265358979323846 / 360.0;
  std::vector<double> elevations;  // ring elevation angles, radians
  Camera camera;
};

inline SensorRig make_rig(Pose2 pose, double mount_height, std::size_t beams, double elev_min,
                          double elev_max, double azimuth_resolution, Camera camera = {}) {
  if (beams < 1) throw ConfigError("make_rig: beams must be >= 1");
  if (mount_height <= 0) throw ConfigError("make_rig: mount height must be > 0");
  SensorRig rig;
  rig.pose = pose;
  rig.mount_height = mount_height;
  rig.beams = beams;
  rig.azimuth_resolution = azimuth_resolution;
  rig.camera = camera;
  rig.elevations.resize(beams);
  for (std::size_t i = 0; i < beams; ++i)
    rig.elevations[i] =
        beams == 1 ? elev_min
                   : elev_min + (elev_max - elev_min) * static_cast<double>(i) /
                         static_cast<double>(beams - 1);
  return rig;
}

// Keeps every factor-th elevation ring, starting at ring 0.
inline SensorRig degrade_beams(const SensorRig& rig, std::size_t factor) {
  if (factor != 1 && factor != 2 && factor != 4)
    throw ConfigError("degrade_beams: factor must be 1, 2 or 4");
  if (rig.beams % factor != 0)
    throw ConfigError("degrade_beams: " + std::to_string(rig.beams) + " beams not divisible by " +
                      std::to_string(factor));
  SensorRig out = rig;
  if (factor == 1) return out;
  out.elevations.clear();
  for (std::size_t i = 0; i < rig.elevations.size(); i += factor)
    out.elevations.push_back(rig.elevations[i]);
  out.beams = out.elevations.size();
  return out;
}

struct LidarPoint {
  double x = 0, y = 0, z = 0, intensity = 0;  // sensor frame (planar transform of global)
};

struct SensorFrame {
  std::vector<LidarPoint> points;
  Tensor image;  // (1, H, W), inverse-depth silhouette render
  Pose2 pose;    // pose used for global-frame conversion downstream
  double mount_height = 0;
  Camera camera;
};

// 2.5-D ray casting: one ray per (elevation ring x azimuth step), first hit
// on any object or occluder surface yields a point with intensity 1/distance.
inline std::vector<LidarPoint> simulate_lidar(const Scene& scene, const SensorRig& rig) {
  std::vector<LidarPoint> points;
  const auto volumes = scene.all_volumes();
  if (volumes.empty()) return points;
  const std::size_t azimuth_steps =
      static_cast<std::size_t>(std::round(2.0 * 3.14159265358979323846 / rig.azimuth_resolution));
  const Vec3 origin{rig.pose.x, rig.pose.y, rig.mount_height};
  const double cy = std::cos(rig.pose.yaw), sy = std::sin(rig.pose.yaw);
  for (double elev : rig.elevations) {
    const double ce = std::cos(elev), se = std::sin(elev);
    for (std::size_t a = 0; a < azimuth_steps; ++a) {
      const double az = static_cast<double>(a) * rig.azimuth_resolution;
      const double ca = std::cos(az), sa = std::sin(az);
      // azimuth measured in the rig frame
      const Vec3 dir{ce * (cy * ca - sy * sa), ce * (sy * ca + cy * sa), se};
      Ray ray{origin, dir};
      double best = std::numeric_limits<double>::infinity();
      for (const auto& v : volumes) {
        auto t = ray_box_intersect(ray, v);
        if (t && *t < best) best = *t;
      }
      if (!std::isfinite(best)) continue;
      const Vec3 hit = ray.origin + best * ray.dir;
      const Vec3 local = rig.pose.to_local(hit);
      points.push_back({local.x, local.y, hit.z, 1.0 / best});
    }
  }
  return points;
}

// Pinhole silhouette render: per-pixel ray cast, nearest surface wins,
// pixel intensity is the inverse of the hit distance.
inline Tensor simulate_camera(const Scene& scene, const SensorRig& rig) {
  Tensor img = Tensor::zeros({1, rig.camera.height, rig.camera.width});
  const auto volumes = scene.all_volumes();
  if (volumes.empty()) return img;
  for (std::size_t v = 0; v < rig.camera.height; ++v)
    for (std::size_t u = 0; u < rig.camera.width; ++u) {
      Ray ray = rig.camera.pixel_ray(static_cast<double>(u) + 0.5, static_cast<double>(v) + 0.5,
                                     rig.pose, rig.mount_height);
      double best = std::numeric_limits<double>::infinity();
      for (const auto& vol : volumes) {
        auto t = ray_box_intersect(ray, vol);
        if (t && *t < best) best = *t;
      }
      if (std::isfinite(best)) img.at(0, v, u) = std::min(1.0, 6.0 / best);
    }
  return img;
}

struct SceneSpec {
  std::size_t min_objects = 3, max_objects = 6;
  double min_length = 4.0, max_length = 7.0;
  double min_width = 2.2, max_width = 3.2;
  double min_height = 0.8, max_height = 1.6;
  double extent = 16.0;
  std::size_t occluders = 0;          // walls placed independently of view lines
  bool occlude_view = false;          // place walls between view_pose and distant objects
  Pose2 view_pose;                    // only used when occlude_view is set
};

namespace detail {

inline bool overlaps_any(const Box2& b, const std::vector<SceneObject>& objs, double margin) {
  for (const auto& o : objs) {
    Box2 g = o.footprint();
    g.length += 2 * margin;
    g.width += 2 * margin;
    if (box_iou(b, g) > 0.0) return true;
  }
  return false;
}

}  // namespace detail

// Deterministic for a seed; objects are rejection-sampled to be disjoint.
inline Scene generate_scene(std::uint64_t seed, const SceneSpec& spec) {
  Rng rng(seed * 0x9E3779B97F4A7C15ULL + 0xD1B54A32D192ED03ULL);
  Scene scene;
  scene.seed = seed;
  scene.extent = spec.extent;
  const std::size_t count =
      spec.min_objects +
      (spec.max_objects > spec.min_objects
           ? static_cast<std::size_t>(rng.uniform_index(spec.max_objects - spec.min_objects + 1))
           : 0);
  const int max_attempts = 1000;
  for (std::size_t i = 0; i < count; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < max_attempts && !placed; ++attempt) {
      SceneObject o;
      o.cls = "car";
      o.length = rng.uniform(spec.min_length, spec.max_length);
      o.width = rng.uniform(spec.min_width, spec.max_width);
      o.height = rng.uniform(spec.min_height, spec.max_height);
      const double margin = 0.6;
      o.cx = rng.uniform(-spec.extent + o.length / 2 + margin, spec.extent - o.length / 2 - margin);
      o.cy = rng.uniform(-spec.extent + o.width / 2 + margin, spec.extent - o.width / 2 - margin);
      if (detail::overlaps_any(o.footprint(), scene.objects, 0.5)) continue;
      scene.objects.push_back(o);
      placed = true;
    }
    if (!placed)
      throw GenerationError("generate_scene: could not place object " + std::to_string(i) +
                            " within 1000 attempts (seed " + std::to_string(seed) + ")");
  }

  auto try_place_wall = [&](SceneObject wall) -> bool {
    if (detail::overlaps_any(wall.footprint(), scene.objects, 0.3)) return false;
    if (detail::overlaps_any(wall.footprint(), scene.occluders, 0.3)) return false;
    scene.occluders.push_back(wall);
    return true;
  };

  if (spec.occlude_view) {
    // A wall partway along the sight line hides the object from the ground
    // sensor while an elevated one still clears it.
    for (const auto& o : scene.objects) {
      const double dx = o.cx - spec.view_pose.x, dy = o.cy - spec.view_pose.y;
      const double dist = std::hypot(dx, dy);
      if (dist < 6.0) continue;
      bool placed = false;
      for (int attempt = 0; attempt < max_attempts && !placed; ++attempt) {
        const double f = rng.uniform(0.45, 0.7);
        SceneObject wall;
        wall.cls = "wall";
        wall.height = rng.uniform(2.6, 3.4);
        const double span = rng.uniform(4.0, 7.0);
        if (std::abs(dx) >= std::abs(dy)) {
          wall.length = rng.uniform(0.4, 0.8);
          wall.width = span;
        } else {
          wall.length = span;
          wall.width = rng.uniform(0.4, 0.8);
        }
        wall.cx = spec.view_pose.x + f * dx;
        wall.cy = spec.view_pose.y + f * dy;
        if (std::abs(wall.cx) > spec.extent - 1 || std::abs(wall.cy) > spec.extent - 1) continue;
        placed = try_place_wall(wall);
      }
    }
  }
  for (std::size_t i = 0; i < spec.occluders; ++i) {
    for (int attempt = 0; attempt < max_attempts; ++attempt) {
      SceneObject wall;
      wall.cls = "wall";
      wall.height = rng.uniform(2.6, 3.4);
      const bool along_y = rng.uniform() < 0.5;
      const double span = rng.uniform(3.0, 6.0);
      wall.length = along_y ? rng.uniform(0.4, 0.8) : span;
      wall.width = along_y ? span : rng.uniform(0.4, 0.8);
      wall.cx = rng.uniform(-spec.extent + 3, spec.extent - 3);
      wall.cy = rng.uniform(-spec.extent + 3, spec.extent - 3);
      if (try_place_wall(wall)) break;
    }
  }
  return scene;
}

// Gaussian perturbations, seeded. sigma = 0 is the identity.
inline Pose2 add_noise(const Pose2& pose, double sigma, Rng& rng) {
  if (sigma == 0.0) return pose;
  Pose2 out = pose;
  out.x += rng.normal(0.0, sigma);
  out.y += rng.normal(0.0, sigma);
  out.yaw += rng.normal(0.0, sigma);
  return out;
}

inline Tensor add_noise(const Tensor& features, double sigma, Rng& rng) {
  if (sigma == 0.0) return features;
  Tensor out = features;
  for (double& v : out.data) v += rng.normal(0.0, sigma);
  return out;
}

// --------------------------------------------------------------------------
// Scene files: one record per object, "object <class> <x> <y> <l> <w> <h>"
// --------------------------------------------------------------------------

inline void save_scene(const Scene& scene, std::ostream& os) {
  os << "# lcv2i scene\n";
  os << "seed " << scene.seed << "\n";
  os << "extent " << scene.extent << "\n";
  char buf[256];
  auto write = [&](const SceneObject& o) {
    std::snprintf(buf, sizeof(buf), "object %s %.17g %.17g %.17g %.17g %.17g\n", o.cls.c_str(),
                  o.cx, o.cy, o.length, o.width, o.height);
    os << buf;
  };
  for (const auto& o : scene.objects) write(o);
  for (const auto& o : scene.occluders) write(o);
}

inline void save_scene_file(const Scene& scene, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw ConfigError("save_scene_file: cannot open " + path);
  save_scene(scene, f);
}

inline Scene load_scene(std::istream& is) {
  Scene scene;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "seed") {
      ls >> scene.seed;
    } else if (tag == "extent") {
      ls >> scene.extent;
    } else if (tag == "object") {
      SceneObject o;
      ls >> o.cls >> o.cx >> o.cy >> o.length >> o.width >> o.height;
      if (!ls) throw ConfigError("load_scene: malformed object record: " + line);
      if (o.cls == "wall" || o.cls == "occluder")
        scene.occluders.push_back(o);
      else
        scene.objects.push_back(o);
    } else {
      throw ConfigError("load_scene: unknown record '" + tag + "'");
    }
  }
  return scene;
}

inline Scene load_scene_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("load_scene_file: cannot open " + path);
  return load_scene(f);
}

// Fingerprint for controlled-comparison checks across ablation rows.
inline std::uint64_t scene_suite_hash(const std::vector<Scene>& scenes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& s : scenes) {
    std::ostringstream os;
    save_scene(s, os);
    const std::string text = os.str();
    h = fnv1a(text.data(), text.size(), h);
  }
  return h;
}

}  // namespace lcv2i
