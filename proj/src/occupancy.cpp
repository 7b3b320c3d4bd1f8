#include "occflow/occupancy.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

namespace occflow {

OccupancyGrid::OccupancyGrid(int64_t h, int64_t w, int64_t d, double res, uint32_t nc)
    : H(h), W(w), D(d), resolution(res), n_classes(nc),
      classes(static_cast<size_t>(h * w * d), 0) {
  validate();
}

int64_t OccupancyGrid::occupied_count() const {
  int64_t n = 0;
  for (uint8_t c : classes) n += (c != 0);
  return n;
}

bool OccupancyGrid::same_layout(const OccupancyGrid& o) const {
  return H == o.H && W == o.W && D == o.D;
}

void OccupancyGrid::validate() const {
  if (H <= 0 || W <= 0 || D <= 0) throw std::invalid_argument("grid dims must be positive");
  if (!(resolution > 0.0)) throw std::invalid_argument("grid resolution must be positive");
  if (static_cast<int64_t>(classes.size()) != numel())
    throw std::invalid_argument("grid storage does not match dims");
  if (n_classes < 2) throw std::invalid_argument("grid needs at least empty + one class");
  for (uint8_t c : classes)
    if (c >= n_classes) throw std::invalid_argument("class id out of range");
}

void SequenceClip::recompute_trajectory() {
  trajectory.assign(frames.size(), {0.0, 0.0, 0.0});
  for (size_t i = 1; i < ego_poses.size(); ++i) {
    trajectory[i] = {ego_poses[i].x - ego_poses[i - 1].x,
                     ego_poses[i].y - ego_poses[i - 1].y,
                     ego_poses[i].yaw - ego_poses[i - 1].yaw};
  }
}

void SequenceClip::validate() const {
  size_t n = frames.size();
  if (ego_poses.size() != n || timestamps.size() != n || trajectory.size() != n)
    throw std::invalid_argument("clip arrays must have equal lengths");
  for (size_t i = 1; i < n; ++i)
    if (!(timestamps[i] > timestamps[i - 1]))
      throw std::invalid_argument("timestamps must be strictly increasing");
  for (size_t i = 1; i < n; ++i)
    if (!frames[i].same_layout(frames[0]) || frames[i].resolution != frames[0].resolution)
      throw std::invalid_argument("frames must share dims and resolution");
}

VoxelizeResult voxelize_points(const std::vector<std::array<double, 3>>& points,
                               int64_t H, int64_t W, int64_t D, double resolution,
                               const std::array<double, 3>& origin) {
  if (!(resolution > 0.0)) throw std::invalid_argument("voxelize: resolution must be positive");
  VoxelizeResult r;
  r.grid = OccupancyGrid(H, W, D, resolution);
  r.grid.origin = origin;
  for (const auto& p : points) {
    int64_t x = static_cast<int64_t>(std::floor((p[0] - origin[0]) / resolution));
    int64_t y = static_cast<int64_t>(std::floor((p[1] - origin[1]) / resolution));
    int64_t z = static_cast<int64_t>(std::floor((p[2] - origin[2]) / resolution));
    if (r.grid.in_bounds(x, y, z))
      r.grid.at(x, y, z) = 1;
    else
      ++r.dropped;
  }
  return r;
}

SequenceClip densify_sequence(const SequenceClip& clip) {
  clip.validate();
  int64_t F = clip.n_frames();
  SequenceClip out = clip;
  if (F <= 1) return out;

  for (int64_t dst = 0; dst < F; ++dst) {
    // Source frames ordered by temporal distance; earlier frame wins ties.
    std::vector<int64_t> order(static_cast<size_t>(F));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
      double da = std::fabs(clip.timestamps[static_cast<size_t>(a)] - clip.timestamps[static_cast<size_t>(dst)]);
      double db = std::fabs(clip.timestamps[static_cast<size_t>(b)] - clip.timestamps[static_cast<size_t>(dst)]);
      if (da != db) return da < db;
      return a < b;
    });

    OccupancyGrid& g = out.frames[static_cast<size_t>(dst)];
    g.classes.assign(g.classes.size(), 0);
    const Se2Pose& pd = clip.ego_poses[static_cast<size_t>(dst)];
    double cd = std::cos(pd.yaw), sd = std::sin(pd.yaw);

    for (int64_t src : order) {
      const OccupancyGrid& s = clip.frames[static_cast<size_t>(src)];
      const Se2Pose& ps = clip.ego_poses[static_cast<size_t>(src)];
      double cs = std::cos(ps.yaw), ss = std::sin(ps.yaw);
      for (int64_t x = 0; x < s.H; ++x)
        for (int64_t y = 0; y < s.W; ++y)
          for (int64_t z = 0; z < s.D; ++z) {
            uint8_t cls = s.at(x, y, z);
            if (cls == 0) continue;
            // voxel center in source ego coordinates
            double ex = s.origin[0] + (static_cast<double>(x) + 0.5) * s.resolution;
            double ey = s.origin[1] + (static_cast<double>(y) + 0.5) * s.resolution;
            // into world
            double wx = ps.x + cs * ex - ss * ey;
            double wy = ps.y + ss * ex + cs * ey;
            // into destination ego
            double rx = wx - pd.x, ry = wy - pd.y;
            double dx = cd * rx + sd * ry;
            double dy = -sd * rx + cd * ry;
            int64_t ix = static_cast<int64_t>(std::floor((dx - g.origin[0]) / g.resolution));
            int64_t iy = static_cast<int64_t>(std::floor((dy - g.origin[1]) / g.resolution));
            if (!g.in_bounds(ix, iy, z)) continue;
            uint8_t& cell = g.at(ix, iy, z);
            if (cell == 0) cell = cls;
          }
    }
  }
  return out;
}

double iou(const OccupancyGrid& a, const OccupancyGrid& b) {
  if (!a.same_layout(b)) throw std::invalid_argument("iou: grid dims differ");
  int64_t inter = 0, uni = 0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    bool oa = a.occupied(i), ob = b.occupied(i);
    inter += (oa && ob);
    uni += (oa || ob);
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

MiouResult miou(const OccupancyGrid& a, const OccupancyGrid& b, uint32_t n_classes) {
  if (!a.same_layout(b)) throw std::invalid_argument("miou: grid dims differ");
  MiouResult r;
  r.per_class.assign(n_classes, std::nan(""));
  std::vector<int64_t> inter(n_classes, 0), uni(n_classes, 0);
  for (int64_t i = 0; i < a.numel(); ++i) {
    uint8_t ca = a.classes[static_cast<size_t>(i)];
    uint8_t cb = b.classes[static_cast<size_t>(i)];
    if (ca >= n_classes || cb >= n_classes) throw std::invalid_argument("miou: class id out of range");
    if (ca == cb && ca != 0) ++inter[ca];
    if (ca != 0) ++uni[ca];
    if (cb != 0 && cb != ca) ++uni[cb];
  }
  double sum = 0.0;
  for (uint32_t c = 1; c < n_classes; ++c) {
    if (uni[c] == 0) continue;  // absent from both grids
    double v = static_cast<double>(inter[c]) / static_cast<double>(uni[c]);
    r.per_class[c] = v;
    r.class_ids.push_back(c);
    sum += v;
  }
  r.mean = r.class_ids.empty() ? 1.0 : sum / static_cast<double>(r.class_ids.size());
  return r;
}

Domain domain_from_string(const std::string& s) {
  if (s == "outdoor") return Domain::Outdoor;
  if (s == "indoor") return Domain::Indoor;
  if (s == "semantic") return Domain::Semantic;
  if (s == "high_res") return Domain::HighRes;
  throw std::invalid_argument("unknown domain: " + s);
}

const char* domain_name(Domain d) {
  switch (d) {
    case Domain::Outdoor: return "outdoor";
    case Domain::Indoor: return "indoor";
    case Domain::Semantic: return "semantic";
    case Domain::HighRes: return "high_res";
  }
  return "?";
}

SceneParams SceneParams::for_domain(Domain d) {
  SceneParams p;
  switch (d) {
    case Domain::Outdoor:
      break;
    case Domain::Semantic:
      // Same geometry knobs as outdoor; only labels differ.
      p.semantic = true;
      p.n_classes = 5;
      break;
    case Domain::Indoor:
      p.resolution = 0.25;  // shrinks metric extent, keeps voxel dims
      p.n_boxes = 6;
      p.ego_step = 0.25;
      p.box_speed_max = 0.25;
      break;
    case Domain::HighRes:
      p.H = 64;
      p.W = 64;
      p.D = 16;
      p.resolution = 0.25;  // same extent, finer voxels
      break;
  }
  return p;
}

namespace {

struct Box {
  double cx, cy;        // center, world meters
  double vx, vy;        // meters per frame
  double sx, sy;        // half extents
  int64_t z0, z1;       // voxel height span
  uint8_t category;
};

// Class labels: 1 = structure (ground/walls), boxes get 2.. in semantic
// scenes; everything collapses to 1 otherwise.
constexpr uint8_t kStructure = 1;

}  // namespace

SequenceClip synth_scene(Domain domain, uint64_t seed, int64_t n_frames) {
  return synth_scene(SceneParams::for_domain(domain), seed, n_frames);
}

SequenceClip synth_scene(const SceneParams& p, uint64_t seed, int64_t n_frames) {
  if (n_frames < 2) throw std::invalid_argument("synth_scene: need at least 2 frames");
  Rng rng(seed ^ 0x5ce9e5u);

  double ext_x = static_cast<double>(p.H) * p.resolution;
  double ext_y = static_cast<double>(p.W) * p.resolution;
  // World strip long enough to cover the ego's travel.
  double travel = p.ego_step * static_cast<double>(n_frames);
  double wx0 = -ext_x / 2.0, wx1 = ext_x / 2.0 + travel + ext_x / 2.0;
  double wy0 = -ext_y / 2.0, wy1 = ext_y / 2.0;

  int64_t wall_h = std::max<int64_t>(2, p.D / 2);

  // Static wall segments: thin runs parallel to x inside the strip.
  struct Wall { double x0, x1, y; };
  std::vector<Wall> walls;
  for (int i = 0; i < p.n_wall_segments; ++i) {
    double x0 = wx0 + rng.uniform() * (wx1 - wx0) * 0.7;
    double len = (0.15 + 0.25 * rng.uniform()) * (wx1 - wx0);
    double y = wy0 + ext_y * (0.15 + 0.7 * rng.uniform());
    walls.push_back({x0, x0 + len, y});
  }

  std::vector<Box> boxes;
  for (int i = 0; i < p.n_boxes; ++i) {
    Box b;
    b.cx = wx0 + rng.uniform() * (wx1 - wx0);
    b.cy = wy0 + ext_y * (0.2 + 0.6 * rng.uniform());
    double ang = rng.uniform() * 2.0 * 3.14159265358979323846;
    double spd = p.box_speed_max * (0.25 + 0.75 * rng.uniform());
    b.vx = spd * std::cos(ang);
    b.vy = spd * std::sin(ang);
    b.sx = p.resolution * (0.5 + 1.5 * rng.uniform());
    b.sy = p.resolution * (0.5 + 1.5 * rng.uniform());
    b.z0 = 1;
    b.z1 = std::min<int64_t>(p.D - 1, 1 + 1 + rng.uniform_int(std::max<int64_t>(1, p.D / 2)));
    b.category = static_cast<uint8_t>(p.n_classes > 3 ? 2 + (i % (p.n_classes - 2)) : 1);
    boxes.push_back(b);
  }

  SequenceClip clip;
  for (int64_t f = 0; f < n_frames; ++f) {
    Se2Pose pose{p.ego_step * static_cast<double>(f), 0.0, 0.0};
    OccupancyGrid g(p.H, p.W, p.D, p.resolution, p.n_classes);
    g.origin = {-ext_x / 2.0, -ext_y / 2.0, 0.0};

    auto label = [&](uint8_t category) -> uint8_t {
      return p.semantic ? category : kStructure;
    };

    // Ground plane (z = 0).
    if (p.ground_plane)
      for (int64_t x = 0; x < p.H; ++x)
        for (int64_t y = 0; y < p.W; ++y) g.at(x, y, 0) = label(kStructure);

    auto world_to_vx = [&](double wx) {
      return static_cast<int64_t>(std::floor((wx - pose.x - g.origin[0]) / p.resolution));
    };
    auto world_to_vy = [&](double wy) {
      return static_cast<int64_t>(std::floor((wy - pose.y - g.origin[1]) / p.resolution));
    };

    // Boundary walls of the world strip.
    if (p.border_walls) {
      for (int64_t x = 0; x < p.H; ++x)
        for (int64_t z = 1; z < wall_h; ++z) {
          int64_t ylo = world_to_vy(wy0 + p.resolution * 0.5);
          int64_t yhi = world_to_vy(wy1 - p.resolution * 0.5);
          if (ylo >= 0 && ylo < p.W) g.at(x, ylo, z) = label(kStructure);
          if (yhi >= 0 && yhi < p.W) g.at(x, yhi, z) = label(kStructure);
        }
    }

    for (const auto& w : walls) {
      int64_t y = world_to_vy(w.y);
      if (y < 0 || y >= p.W) continue;
      int64_t x0 = std::max<int64_t>(0, world_to_vx(w.x0));
      int64_t x1 = std::min<int64_t>(p.H - 1, world_to_vx(w.x1));
      for (int64_t x = x0; x <= x1; ++x)
        for (int64_t z = 1; z < wall_h; ++z) g.at(x, y, z) = label(kStructure);
    }

    for (const auto& b : boxes) {
      double bx = b.cx + b.vx * static_cast<double>(f);
      double by = b.cy + b.vy * static_cast<double>(f);
      int64_t x0 = std::max<int64_t>(0, world_to_vx(bx - b.sx));
      int64_t x1 = std::min<int64_t>(p.H - 1, world_to_vx(bx + b.sx));
      int64_t y0 = std::max<int64_t>(0, world_to_vy(by - b.sy));
      int64_t y1 = std::min<int64_t>(p.W - 1, world_to_vy(by + b.sy));
      for (int64_t x = x0; x <= x1; ++x)
        for (int64_t y = y0; y <= y1; ++y)
          for (int64_t z = b.z0; z <= b.z1 && z < p.D; ++z) g.at(x, y, z) = label(b.category);
    }

    clip.frames.push_back(std::move(g));
    clip.ego_poses.push_back(pose);
    clip.timestamps.push_back(p.frame_dt * static_cast<double>(f));
  }
  clip.recompute_trajectory();
  return clip;
}

DatasetSplit split_fraction(const std::vector<int64_t>& ids, double fraction, uint64_t seed) {
  if (ids.empty()) throw std::invalid_argument("split_fraction: empty id list");
  if (!(fraction > 0.0 && fraction <= 1.0))
    throw std::invalid_argument("split_fraction: fraction must be in (0, 1]");
  std::vector<int64_t> shuffled = ids;
  Rng rng(seed ^ 0x51f7u);
  rng.shuffle(shuffled);
  int64_t n = static_cast<int64_t>(shuffled.size());
  int64_t take = std::max<int64_t>(1, static_cast<int64_t>(std::llround(fraction * static_cast<double>(n))));
  take = std::min(take, n);
  DatasetSplit s;
  s.fraction = fraction;
  s.train.assign(shuffled.begin(), shuffled.begin() + take);
  return s;
}

namespace {

void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("truncated file");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

void put_f32(std::ostream& os, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(os, bits);
}

float get_f32(std::istream& is) {
  uint32_t bits = get_u32(is);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

void put_f64(std::ostream& os, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u32(os, static_cast<uint32_t>(bits));
  put_u32(os, static_cast<uint32_t>(bits >> 32));
}

double get_f64(std::istream& is) {
  uint64_t lo = get_u32(is);
  uint64_t hi = get_u32(is);
  uint64_t bits = lo | (hi << 32);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

void write_grid_block(std::ostream& os, const OccupancyGrid& g) {
  os.write("OCG1", 4);
  put_u32(os, static_cast<uint32_t>(g.H));
  put_u32(os, static_cast<uint32_t>(g.W));
  put_u32(os, static_cast<uint32_t>(g.D));
  put_u32(os, g.n_classes);
  put_f32(os, static_cast<float>(g.resolution));
  for (double o : g.origin) put_f32(os, static_cast<float>(o));
  os.write(reinterpret_cast<const char*>(g.classes.data()),
           static_cast<std::streamsize>(g.classes.size()));
}

OccupancyGrid read_grid_block(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "OCG1", 4) != 0) throw std::runtime_error("bad grid magic");
  uint32_t H = get_u32(is), W = get_u32(is), D = get_u32(is), nc = get_u32(is);
  if (H == 0 || W == 0 || D == 0 || static_cast<uint64_t>(H) * W * D > (1ULL << 30))
    throw std::runtime_error("grid dims out of range");
  OccupancyGrid g(H, W, D, 1.0, nc);
  g.resolution = static_cast<double>(get_f32(is));
  for (double& o : g.origin) o = static_cast<double>(get_f32(is));
  is.read(reinterpret_cast<char*>(g.classes.data()), static_cast<std::streamsize>(g.classes.size()));
  if (!is) throw std::runtime_error("truncated grid payload");
  g.validate();
  return g;
}

}  // namespace

void save_grid(const std::string& path, const OccupancyGrid& grid) {
  grid.validate();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for write: " + path);
  write_grid_block(os, grid);
  if (!os) throw std::runtime_error("write failed: " + path);
}

OccupancyGrid load_grid(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path);
  return read_grid_block(is);
}

void save_clip(const std::string& path, const SequenceClip& clip) {
  clip.validate();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for write: " + path);
  os.write("OCLP", 4);
  put_u32(os, static_cast<uint32_t>(clip.frames.size()));
  for (const auto& g : clip.frames) write_grid_block(os, g);
  for (size_t i = 0; i < clip.frames.size(); ++i) {
    put_f64(os, clip.ego_poses[i].x);
    put_f64(os, clip.ego_poses[i].y);
    put_f64(os, clip.ego_poses[i].yaw);
    put_f64(os, clip.timestamps[i]);
  }
  if (!os) throw std::runtime_error("write failed: " + path);
}

SequenceClip load_clip(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "OCLP", 4) != 0) throw std::runtime_error("bad clip magic");
  uint32_t n = get_u32(is);
  if (n == 0 || n > (1u << 20)) throw std::runtime_error("clip frame count out of range");
  SequenceClip clip;
  for (uint32_t i = 0; i < n; ++i) clip.frames.push_back(read_grid_block(is));
  for (uint32_t i = 0; i < n; ++i) {
    Se2Pose p;
    p.x = get_f64(is);
    p.y = get_f64(is);
    p.yaw = get_f64(is);
    clip.ego_poses.push_back(p);
    clip.timestamps.push_back(get_f64(is));
  }
  clip.recompute_trajectory();
  clip.validate();
  return clip;
}

}  // namespace occflow
