#include <catch2/catch_amalgamated.hpp>

#include <evi/map_store.hpp>
#include <evi/rng.hpp>

#include <filesystem>
#include <fstream>

using namespace evi;

namespace {

struct TempFile {
  std::string path;
  explicit TempFile(const std::string& name, const std::string& content)
      : path("/tmp/" + name) {
    std::ofstream out(path);
    out << content;
  }
  ~TempFile() { std::filesystem::remove(path); }
};

CameraModel test_camera() {
  CameraModel cam;
  cam.width = 640;
  cam.height = 480;
  cam.fx = 320.0;
  cam.fy = 320.0;
  cam.cx = 319.5;
  cam.cy = 239.5;
  return cam;
}

}  // namespace

TEST_CASE("csv maps load exact coordinates") {
  TempFile f("evi_map3.csv", "1.0,2.5,-3.25\n0,0,1\n# comment line\n-7.125,4,0.5\n");
  const SemiDenseMap map = load_map(f.path);
  REQUIRE(map.points.size() == 3);
  REQUIRE(map.points[0] == Vec3(1.0, 2.5, -3.25));
  REQUIRE(map.points[1] == Vec3(0, 0, 1));
  REQUIRE(map.points[2] == Vec3(-7.125, 4, 0.5));
}

TEST_CASE("ascii ply maps load all vertices") {
  std::string content =
      "ply\nformat ascii 1.0\ncomment synthetic\nelement vertex 1000\n"
      "property float x\nproperty float y\nproperty float z\nend_header\n";
  for (int i = 0; i < 1000; ++i)
    content += std::to_string(i * 0.01) + " 3.0 " + std::to_string(-i * 0.005) + "\n";
  TempFile f("evi_map.ply", content);
  const SemiDenseMap map = load_map(f.path);
  REQUIRE(map.points.size() == 1000);
  REQUIRE(std::abs(map.points[500].x() - 5.0) < 1e-12);
  REQUIRE(map.points[500].y() == 3.0);
}

TEST_CASE("map loading errors carry the offending line") {
  SECTION("malformed csv row") {
    TempFile f("evi_bad.csv", "1,2,3\n4,five,6\n");
    REQUIRE_THROWS_WITH(load_map(f.path), Catch::Matchers::ContainsSubstring(":2:"));
  }
  SECTION("wrong column count") {
    TempFile f("evi_bad2.csv", "1,2,3\n1,2\n");
    REQUIRE_THROWS_WITH(load_map(f.path), Catch::Matchers::ContainsSubstring(":2:"));
  }
  SECTION("truncated ply body") {
    TempFile f("evi_bad.ply",
               "ply\nformat ascii 1.0\nelement vertex 5\nproperty float x\nend_header\n1 2 3\n");
    REQUIRE_THROWS_AS(load_map(f.path), std::runtime_error);
  }
  SECTION("empty map") {
    TempFile f("evi_empty.csv", "\n\n");
    REQUIRE_THROWS_WITH(load_map(f.path), Catch::Matchers::ContainsSubstring("no points"));
  }
  SECTION("missing file") {
    REQUIRE_THROWS_WITH(load_map("/tmp/evi_does_not_exist.csv"),
                        Catch::Matchers::ContainsSubstring("cannot open"));
  }
}

TEST_CASE("frustum culling basics") {
  SemiDenseMap map;
  map.points.push_back(Vec3(0, 0, 1));    // optical axis, 1 m (camera looks +z here)
  map.points.push_back(Vec3(0, 0, -1));   // behind
  map.points.push_back(Vec3(0, 0, 50));   // beyond z_far
  map.points.push_back(Vec3(0, 0, 0.05)); // closer than z_near
  const CameraModel cam = test_camera();
  FrustumConfig frustum;
  for (double margin : {1.0, 1.3, 2.0}) {
    frustum.margin_factor = margin;
    const ActivePointSet active =
        refresh_active_set(map, Rotation::identity(), Vec3::Zero(), cam, frustum);
    REQUIRE(active.indices == std::vector<int>{0});
  }
  FrustumConfig bad;
  bad.margin_factor = 0.5;
  REQUIRE_THROWS_AS(refresh_active_set(map, Rotation::identity(), Vec3::Zero(), cam, bad),
                    std::invalid_argument);
}

TEST_CASE("margin 1 equals brute-force frustum culling") {
  CounterRng rng(71);
  SemiDenseMap map;
  for (int i = 0; i < 2000; ++i)
    map.points.push_back(Vec3(4.0 * (rng.next_double() - 0.5), 4.0 * (rng.next_double() - 0.5),
                              22.0 * rng.next_double() - 1.0));
  const CameraModel cam = test_camera();
  const Rotation rot = Rotation::from_axis_angle(Vec3(0.1, -0.2, 0.15));
  const Vec3 pos(0.3, -0.1, 0.2);
  FrustumConfig frustum;
  frustum.margin_factor = 1.0;
  const ActivePointSet active = refresh_active_set(map, rot, pos, cam, frustum);

  std::vector<int> oracle;
  for (int i = 0; i < 2000; ++i) {
    const Vec3 pc = world_point_to_camera(map.points[i], rot, pos, cam);
    if (pc.z() < frustum.z_near || pc.z() > frustum.z_far) continue;
    const auto px = project(pc, cam);
    if (!px) continue;
    if (px->x() >= 0.0 && px->x() <= cam.width - 1.0 && px->y() >= 0.0 &&
        px->y() <= cam.height - 1.0)
      oracle.push_back(i);
  }
  REQUIRE(active.indices == oracle);
}

TEST_CASE("widened frustum captures proportionally more of a uniform plane") {
  CounterRng rng(72);
  SemiDenseMap map;
  for (int i = 0; i < 40000; ++i)
    map.points.push_back(
        Vec3(24.0 * (rng.next_double() - 0.5), 18.0 * (rng.next_double() - 0.5), 5.0));
  const CameraModel cam = test_camera();
  FrustumConfig narrow, wide;
  narrow.margin_factor = 1.0;
  wide.margin_factor = 1.2;
  const size_t n1 =
      refresh_active_set(map, Rotation::identity(), Vec3::Zero(), cam, narrow).indices.size();
  const size_t n2 =
      refresh_active_set(map, Rotation::identity(), Vec3::Zero(), cam, wide).indices.size();
  REQUIRE(n2 > n1);
  const double ratio = double(n2) / double(n1);
  REQUIRE(ratio > 1.44 * 0.9);
  REQUIRE(ratio < 1.44 * 1.1);

  // superset relation
  const auto a1 = refresh_active_set(map, Rotation::identity(), Vec3::Zero(), cam, narrow);
  const auto a2 = refresh_active_set(map, Rotation::identity(), Vec3::Zero(), cam, wide);
  REQUIRE(std::includes(a2.indices.begin(), a2.indices.end(), a1.indices.begin(),
                        a1.indices.end()));
}

TEST_CASE("previously visible points stay active") {
  SemiDenseMap map;
  map.points.push_back(Vec3(0, 0, 1));
  map.points.push_back(Vec3(100, 0, 1));  // far outside any frustum
  const CameraModel cam = test_camera();
  const ActivePointSet active = refresh_active_set(map, Rotation::identity(), Vec3::Zero(), cam,
                                                   FrustumConfig{}, {1}, 7);
  REQUIRE(active.indices == std::vector<int>{0, 1});
  REQUIRE(active.keyframe_id == 7);
}

TEST_CASE("point sampling") {
  SECTION("small sets are returned whole") {
    ActivePointSet active;
    for (int i = 0; i < 10; ++i) active.indices.push_back(i * 3);
    REQUIRE(sample_points(active, 20, 42) == active.indices);
  }
  SECTION("same seed gives identical subsets, membership holds") {
    ActivePointSet active;
    for (int i = 0; i < 500; ++i) active.indices.push_back(i);
    const auto a = sample_points(active, 50, 1234);
    const auto b = sample_points(active, 50, 1234);
    REQUIRE(a == b);
    REQUIRE(a.size() == 50);
    for (int idx : a) REQUIRE(std::binary_search(active.indices.begin(), active.indices.end(), idx));
    const auto c = sample_points(active, 50, 1235);
    REQUIRE(a != c);
  }
  SECTION("empty set warns") {
    ActivePointSet active;
    bool warned = false;
    REQUIRE(sample_points(active, 5, 0, &warned).empty());
    REQUIRE(warned);
  }
  SECTION("k must be positive") {
    ActivePointSet active;
    active.indices = {1, 2, 3};
    REQUIRE_THROWS_AS(sample_points(active, 0, 0), std::invalid_argument);
  }
  SECTION("sampling is uniform") {
    ActivePointSet active;
    for (int i = 0; i < 10000; ++i) active.indices.push_back(i);
    std::vector<int> hits(10000, 0);
    const int trials = 100;
    for (int trial = 0; trial < trials; ++trial)
      for (int idx : sample_points(active, 1000, 9000 + trial)) ++hits[idx];
    // grand mean is exact by construction; bucketed means catch positional bias
    long total = 0;
    for (int h : hits) total += h;
    REQUIRE(total == trials * 1000);
    for (int bucket = 0; bucket < 10; ++bucket) {
      long sum = 0;
      for (int i = bucket * 1000; i < (bucket + 1) * 1000; ++i) sum += hits[i];
      const double freq = double(sum) / (1000.0 * trials);
      REQUIRE(freq > 0.08);
      REQUIRE(freq < 0.12);
    }
    for (int h : hits) REQUIRE(h <= 35);  // no point is quasi-deterministically included
  }
}
