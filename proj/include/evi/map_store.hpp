#pragma once

#include <evi/geometry.hpp>
#include <evi/rng.hpp>

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace evi {

namespace detail {

inline bool parse_double(std::string_view token, double& out) {
  const char* begin = token.data();
  const char* end = begin + token.size();
  auto [ptr, ec] = std::from_chars(begin, end, out);
  return ec == std::errc() && ptr == end;
}

inline std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  size_t start = 0;
  while (start <= line.size()) {
    const size_t pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

}  // namespace detail

struct SemiDenseMap {
  std::vector<Vec3> points;
};

struct ActivePointSet {
  std::vector<int> indices;  // sorted, unique
  std::int64_t keyframe_id = -1;
};

namespace detail {

[[noreturn]] inline void map_parse_error(const std::string& path, size_t line_no,
                                         const std::string& what) {
  throw std::runtime_error("map: " + path + ":" + std::to_string(line_no) + ": " + what);
}

inline SemiDenseMap load_map_csv(std::istream& in, const std::string& path) {
  SemiDenseMap map;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string_view trimmed = trim(line);
    if (trimmed.empty() || trimmed.front() == '#') continue;
    const auto cols = split(trimmed, ',');
    if (cols.size() != 3) map_parse_error(path, line_no, "expected 3 comma-separated values");
    Vec3 p;
    for (int i = 0; i < 3; ++i)
      if (!parse_double(trim(cols[i]), p(i)))
        map_parse_error(path, line_no, "bad number '" + std::string(cols[i]) + "'");
    if (!p.allFinite()) map_parse_error(path, line_no, "non-finite coordinate");
    map.points.push_back(p);
  }
  return map;
}

inline SemiDenseMap load_map_ply(std::istream& in, const std::string& path) {
  std::string line;
  size_t line_no = 0;
  size_t vertex_count = 0;
  bool in_header = true;
  std::getline(in, line);
  ++line_no;
  if (trim(line) != "ply") map_parse_error(path, line_no, "missing ply magic");
  while (in_header && std::getline(in, line)) {
    ++line_no;
    const std::string_view t = trim(line);
    if (t.rfind("format", 0) == 0 && t.find("ascii") == std::string_view::npos)
      map_parse_error(path, line_no, "only ascii ply is supported");
    if (t.rfind("element vertex", 0) == 0) {
      const auto tokens = split(t, ' ');
      if (tokens.size() < 3) map_parse_error(path, line_no, "bad element vertex line");
      double n;
      if (!parse_double(tokens[2], n)) map_parse_error(path, line_no, "bad vertex count");
      vertex_count = static_cast<size_t>(n);
    }
    if (t == "end_header") in_header = false;
  }
  if (in_header) map_parse_error(path, line_no, "unterminated header");

  SemiDenseMap map;
  map.points.reserve(vertex_count);
  while (map.points.size() < vertex_count && std::getline(in, line)) {
    ++line_no;
    std::string_view t = trim(line);
    if (t.empty()) continue;
    std::vector<std::string_view> tokens;
    for (std::string_view tok : split(t, ' '))
      if (!tok.empty()) tokens.push_back(tok);
    if (tokens.size() < 3) map_parse_error(path, line_no, "expected at least 3 coordinates");
    Vec3 p;
    for (int i = 0; i < 3; ++i)
      if (!parse_double(tokens[i], p(i)))
        map_parse_error(path, line_no, "bad number '" + std::string(tokens[i]) + "'");
    if (!p.allFinite()) map_parse_error(path, line_no, "non-finite coordinate");
    map.points.push_back(p);
  }
  if (map.points.size() != vertex_count)
    map_parse_error(path, line_no, "vertex rows ended early");
  return map;
}

}  // namespace detail

// Loads a gravity-aligned point cloud from CSV (x,y,z per line) or ASCII PLY,
// chosen by file extension.
inline SemiDenseMap load_map(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("map: cannot open " + path);
  SemiDenseMap map;
  if (path.size() >= 4 && path.substr(path.size() - 4) == ".ply")
    map = detail::load_map_ply(in, path);
  else
    map = detail::load_map_csv(in, path);
  if (map.points.empty()) throw std::runtime_error("map: " + path + " contains no points");
  return map;
}

struct FrustumConfig {
  double margin_factor = 1.3;
  double z_near = 0.1;
  double z_far = 20.0;

  void validate() const {
    if (margin_factor < 1.0) throw std::invalid_argument("frustum: margin_factor must be >= 1");
    if (z_near <= 0.0 || z_far <= z_near)
      throw std::invalid_argument("frustum: need 0 < z_near < z_far");
  }
};

// Union of the previously visible indices and all points whose projection
// falls inside the frustum widened by margin_factor on each half-extent.
inline ActivePointSet refresh_active_set(const SemiDenseMap& map, const Rotation& body_rotation,
                                         const Vec3& body_position, const CameraModel& camera,
                                         const FrustumConfig& frustum,
                                         const std::vector<int>& last_visible = {},
                                         std::int64_t keyframe_id = 0) {
  frustum.validate();
  const double cu = 0.5 * (camera.width - 1);
  const double cv = 0.5 * (camera.height - 1);
  const double half_u = frustum.margin_factor * cu;
  const double half_v = frustum.margin_factor * cv;

  ActivePointSet active;
  active.keyframe_id = keyframe_id;
  for (int i = 0; i < static_cast<int>(map.points.size()); ++i) {
    const Vec3 pc = world_point_to_camera(map.points[i], body_rotation, body_position, camera);
    if (pc.z() < frustum.z_near || pc.z() > frustum.z_far) continue;
    const auto px = project(pc, camera);
    if (!px) continue;
    if (std::abs(px->x() - cu) <= half_u && std::abs(px->y() - cv) <= half_v)
      active.indices.push_back(i);
  }
  active.indices.insert(active.indices.end(), last_visible.begin(), last_visible.end());
  std::sort(active.indices.begin(), active.indices.end());
  active.indices.erase(std::unique(active.indices.begin(), active.indices.end()),
                       active.indices.end());
  return active;
}

// Uniform sample of k indices without replacement via partial Fisher-Yates;
// everything is returned when the set is small enough.
inline std::vector<int> sample_points(const ActivePointSet& active, size_t k, uint64_t seed,
                                      bool* empty_warning = nullptr) {
  if (k < 1) throw std::invalid_argument("sample_points: k must be >= 1");
  if (empty_warning) *empty_warning = active.indices.empty();
  if (active.indices.size() <= k) return active.indices;
  std::vector<int> pool = active.indices;
  CounterRng rng(seed);
  for (size_t i = 0; i < k; ++i) {
    const size_t j = i + rng.next_below(pool.size() - i);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(k);
  std::sort(pool.begin(), pool.end());
  return pool;
}

}  // namespace evi
