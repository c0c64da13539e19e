#include <catch2/catch_amalgamated.hpp>
#include <sstream>

#include "helpers.hpp"
#include "lcv2i/scenario.hpp"

using namespace lcv2i;

namespace {

constexpr double kDeg = 3.14159265358979323846 / 180.0;

bool on_surface(const Vec3& p, const Box3& b, double eps) {
  const double x0 = b.footprint.x0(), x1 = b.footprint.x1();
  const double y0 = b.footprint.y0(), y1 = b.footprint.y1();
  if (p.x < x0 - eps || p.x > x1 + eps || p.y < y0 - eps || p.y > y1 + eps || p.z < -eps ||
      p.z > b.height + eps)
    return false;
  const double face = std::min({std::abs(p.x - x0), std::abs(p.x - x1), std::abs(p.y - y0),
                                std::abs(p.y - y1), std::abs(p.z), std::abs(p.z - b.height)});
  return face <= eps;
}

std::size_t points_on(const std::vector<LidarPoint>& pts, const SensorRig& rig,
                      const SceneObject& obj) {
  std::size_t n = 0;
  for (const auto& p : pts) {
    const Vec3 g = rig.pose.to_global({p.x, p.y, p.z});
    if (on_surface(g, obj.volume(), 1e-6)) ++n;
  }
  return n;
}

}  // namespace

TEST_CASE("generate_scene is deterministic and respects empty spec") {
  SceneSpec spec;
  Scene a = generate_scene(42, spec);
  Scene b = generate_scene(42, spec);
  REQUIRE(a.objects.size() == b.objects.size());
  for (std::size_t i = 0; i < a.objects.size(); ++i) {
    CHECK(a.objects[i].cx == b.objects[i].cx);
    CHECK(a.objects[i].cy == b.objects[i].cy);
  }

  SceneSpec empty;
  empty.min_objects = empty.max_objects = 0;
  CHECK(generate_scene(1, empty).objects.empty());
}

TEST_CASE("generated objects never overlap across 100 seeds") {
  SceneSpec spec;
  spec.min_objects = 4;
  spec.max_objects = 7;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Scene s = generate_scene(seed, spec);
    for (std::size_t i = 0; i < s.objects.size(); ++i)
      for (std::size_t j = i + 1; j < s.objects.size(); ++j)
        CHECK(box_iou(s.objects[i].footprint(), s.objects[j].footprint()) == 0.0);
  }
}

TEST_CASE("lidar on empty scene returns empty cloud") {
  Scene scene;
  auto rig = make_rig({0, 0, 0}, 1.8, 32, -10 * kDeg, 10 * kDeg, 1 * kDeg);
  CHECK(simulate_lidar(scene, rig).empty());
}

TEST_CASE("halving beams on a wall halves the point count exactly") {
  Scene scene;
  SceneObject wall;
  wall.cls = "wall";
  wall.cx = 5;
  wall.cy = 0;
  wall.length = 0.4;
  wall.width = 4.0;  // narrow azimuth span keeps every ring on the wall
  wall.height = 10.0;
  scene.occluders.push_back(wall);

  auto rig = make_rig({0, 0, 0}, 1.8, 32, -10 * kDeg, 10 * kDeg, 1 * kDeg);
  auto full = simulate_lidar(scene, rig);
  auto half = simulate_lidar(scene, degrade_beams(rig, 2));
  REQUIRE(!full.empty());
  CHECK(full.size() == 2 * half.size());
}

TEST_CASE("occluded object is invisible from ground but visible from elevation") {
  Scene scene;
  SceneObject obj{"car", 6, 0, 4, 2, 1.5};
  SceneObject wall{"wall", 0, 0, 0.5, 6, 3.0};
  scene.objects.push_back(obj);
  scene.occluders.push_back(wall);

  auto vehicle = make_rig({-14, 0, 0}, 1.8, 32, -22 * kDeg, 4 * kDeg, 1 * kDeg);
  auto infra = make_rig({6, 10, -90 * kDeg}, 6.0, 32, -45 * kDeg, 0, 1 * kDeg);

  CHECK(points_on(simulate_lidar(scene, vehicle), vehicle, obj) == 0);
  CHECK(points_on(simulate_lidar(scene, infra), infra, obj) > 0);
}

TEST_CASE("lidar points lie on surfaces; removing an occluder never hides points") {
  SceneSpec spec;
  spec.occluders = 3;
  Scene scene = generate_scene(11, spec);
  auto rig = make_rig({-14, -2, 0.2}, 1.8, 32, -22 * kDeg, 4 * kDeg, 1 * kDeg);
  auto pts = simulate_lidar(scene, rig);
  REQUIRE(!pts.empty());
  auto volumes = scene.all_volumes();
  for (const auto& p : pts) {
    const Vec3 g = rig.pose.to_global({p.x, p.y, p.z});
    bool found = false;
    for (const auto& v : volumes) found = found || on_surface(g, v, 1e-6);
    CHECK(found);
  }

  Scene open = scene;
  open.occluders.clear();
  for (const auto& obj : scene.objects) {
    const auto with = points_on(pts, rig, obj);
    const auto without = points_on(simulate_lidar(open, rig), rig, obj);
    CHECK(without >= with);
  }
}

TEST_CASE("per-object point count is non-increasing under beam degradation") {
  SceneSpec spec;
  Scene scene = generate_scene(23, spec);
  auto rig = make_rig({-14, 0, 0}, 1.8, 32, -22 * kDeg, 4 * kDeg, 1 * kDeg);
  for (const auto& obj : scene.objects) {
    const auto n1 = points_on(simulate_lidar(scene, rig), rig, obj);
    const auto n2 = points_on(simulate_lidar(scene, degrade_beams(rig, 2)), rig, obj);
    const auto n4 = points_on(simulate_lidar(scene, degrade_beams(rig, 4)), rig, obj);
    CHECK(n1 >= n2);
    CHECK(n2 >= n4);
  }
}

TEST_CASE("camera render: empty scene, z-buffer, silhouette bounds") {
  auto rig = make_rig({0, 0, 0}, 1.8, 32, -22 * kDeg, 4 * kDeg, 1 * kDeg);

  Scene empty;
  auto img0 = simulate_camera(empty, rig);
  for (double v : img0.data) CHECK(v == 0.0);

  Scene two;
  two.objects.push_back({"car", 5, 0, 2, 3, 2.5});   // near face at x = 4
  two.objects.push_back({"car", 10, 0, 2, 3, 2.5});  // hidden behind
  auto img = simulate_camera(two, rig);
  const double center = img.at(0, rig.camera.height / 2, rig.camera.width / 2);
  CHECK(center > 1.0 / 5.0);  // nearer surface wins

  Scene one;
  SceneObject obj{"car", 6, 1, 2, 2, 1.5};
  one.objects.push_back(obj);
  auto render = simulate_camera(one, rig);
  double umin = 1e9, umax = -1e9, vmin = 1e9, vmax = -1e9;
  for (std::size_t v = 0; v < rig.camera.height; ++v)
    for (std::size_t u = 0; u < rig.camera.width; ++u)
      if (render.at(0, v, u) > 0) {
        umin = std::min(umin, static_cast<double>(u) + 0.5);
        umax = std::max(umax, static_cast<double>(u) + 0.5);
        vmin = std::min(vmin, static_cast<double>(v) + 0.5);
        vmax = std::max(vmax, static_cast<double>(v) + 0.5);
      }
  double pu0 = 1e9, pu1 = -1e9, pv0 = 1e9, pv1 = -1e9;
  for (double x : {obj.footprint().x0(), obj.footprint().x1()})
    for (double y : {obj.footprint().y0(), obj.footprint().y1()})
      for (double z : {0.0, obj.height}) {
        auto p = rig.camera.project({x, y, z}, rig.pose, rig.mount_height);
        REQUIRE(p.in_front);
        pu0 = std::min(pu0, p.u);
        pu1 = std::max(pu1, p.u);
        pv0 = std::min(pv0, p.v);
        pv1 = std::max(pv1, p.v);
      }
  CHECK(std::abs(umin - pu0) <= 1.5);
  CHECK(std::abs(umax - pu1) <= 1.5);
  CHECK(std::abs(vmin - pv0) <= 1.5);
  CHECK(std::abs(vmax - pv1) <= 1.5);
}

TEST_CASE("degrade_beams: identity, quarter, composition") {
  auto rig = make_rig({0, 0, 0}, 1.8, 32, -22 * kDeg, 4 * kDeg, 1 * kDeg);
  CHECK(degrade_beams(rig, 1).elevations == rig.elevations);
  CHECK(degrade_beams(rig, 4).beams == 8);
  auto twice = degrade_beams(degrade_beams(rig, 2), 2);
  CHECK(twice.elevations == degrade_beams(rig, 4).elevations);
  auto odd = make_rig({0, 0, 0}, 1.8, 30, -22 * kDeg, 4 * kDeg, 1 * kDeg);
  CHECK_THROWS_AS(degrade_beams(odd, 4), ConfigError);
}

TEST_CASE("noise: identity at sigma 0, seeded determinism, empirical std") {
  Pose2 pose{1, 2, 0.5};
  Rng r0(9);
  Pose2 same = add_noise(pose, 0.0, r0);
  CHECK(same.x == pose.x);
  CHECK(same.yaw == pose.yaw);

  Rng ra(10), rb(10);
  Pose2 na = add_noise(pose, 0.3, ra);
  Pose2 nb = add_noise(pose, 0.3, rb);
  CHECK(na.x == nb.x);
  CHECK(na.y == nb.y);
  CHECK(na.yaw == nb.yaw);

  Rng rs(11);
  const double sigma = 0.7;
  const int n = 100000;
  double sum = 0, sq = 0;
  for (int i = 0; i < n; ++i) {
    const double v = rs.normal(0.0, sigma);
    sum += v;
    sq += v * v;
  }
  const double mean = sum / n;
  const double std = std::sqrt(sq / n - mean * mean);
  CHECK(std::abs(std - sigma) / sigma < 0.02);
}

TEST_CASE("scene file round trip") {
  SceneSpec spec;
  spec.occluders = 2;
  Scene scene = generate_scene(77, spec);
  std::ostringstream os;
  save_scene(scene, os);
  std::istringstream is(os.str());
  Scene back = load_scene(is);
  REQUIRE(back.objects.size() == scene.objects.size());
  REQUIRE(back.occluders.size() == scene.occluders.size());
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    CHECK(back.objects[i].cx == scene.objects[i].cx);
    CHECK(back.objects[i].height == scene.objects[i].height);
  }
  CHECK(scene_suite_hash({scene}) == scene_suite_hash({back}));
}
