#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "occflow/tensor.hpp"

namespace occflow {

// Dense 3D voxel grid of class ids. Class 0 is empty. Storage is x-major:
// index = (x * W + y) * D + z.
struct OccupancyGrid {
  int64_t H = 0, W = 0, D = 0;      // voxel counts along x, y, z
  double resolution = 0.5;           // meters per voxel
  std::array<double, 3> origin{};    // metric position of the (0,0,0) voxel corner
  uint32_t n_classes = 2;
  std::vector<uint8_t> classes;

  OccupancyGrid() = default;
  OccupancyGrid(int64_t h, int64_t w, int64_t d, double res, uint32_t nc = 2);

  int64_t numel() const { return H * W * D; }
  int64_t index(int64_t x, int64_t y, int64_t z) const { return (x * W + y) * D + z; }
  uint8_t at(int64_t x, int64_t y, int64_t z) const { return classes[static_cast<size_t>(index(x, y, z))]; }
  uint8_t& at(int64_t x, int64_t y, int64_t z) { return classes[static_cast<size_t>(index(x, y, z))]; }
  bool in_bounds(int64_t x, int64_t y, int64_t z) const {
    return x >= 0 && x < H && y >= 0 && y < W && z >= 0 && z < D;
  }
  bool occupied(int64_t i) const { return classes[static_cast<size_t>(i)] != 0; }
  int64_t occupied_count() const;
  bool same_layout(const OccupancyGrid& o) const;
  void validate() const;
};

// Planar ego pose: translation plus yaw.
struct Se2Pose {
  double x = 0.0, y = 0.0, yaw = 0.0;
};

// Ordered frames with per-frame ego poses, timestamps and pose deltas
// (the trajectory fed to the forecaster as a condition).
struct SequenceClip {
  std::vector<OccupancyGrid> frames;
  std::vector<Se2Pose> ego_poses;
  std::vector<double> timestamps;
  std::vector<std::array<double, 3>> trajectory;  // per-frame (dx, dy, dyaw)

  int64_t n_frames() const { return static_cast<int64_t>(frames.size()); }
  void recompute_trajectory();
  void validate() const;
};

struct DatasetSplit {
  std::vector<int64_t> train;
  std::vector<int64_t> validation;
  double fraction = 1.0;
};

struct VoxelizeResult {
  OccupancyGrid grid;
  int64_t dropped = 0;  // points outside the grid bounds
};

VoxelizeResult voxelize_points(const std::vector<std::array<double, 3>>& points,
                               int64_t H, int64_t W, int64_t D, double resolution,
                               const std::array<double, 3>& origin);

// Accumulate every frame's occupied voxels into every frame's ego coordinates
// (nearest-voxel resampling). When several source frames write the same
// destination voxel, the frame nearest in time wins; equal distances resolve
// to the earlier frame.
SequenceClip densify_sequence(const SequenceClip& clip);

// Binary intersection-over-union on the occupied masks. Both grids empty
// counts as a perfect match (1.0).
double iou(const OccupancyGrid& a, const OccupancyGrid& b);

struct MiouResult {
  std::vector<double> per_class;     // indexed by class id; NaN when absent in both
  std::vector<uint32_t> class_ids;   // classes present in either grid (excluding empty)
  double mean = 1.0;
};

MiouResult miou(const OccupancyGrid& a, const OccupancyGrid& b, uint32_t n_classes);

enum class Domain { Outdoor, Indoor, Semantic, HighRes };
Domain domain_from_string(const std::string& s);
const char* domain_name(Domain d);

// Synthetic world: static walls and ground plus constant-velocity boxes,
// rasterized into the moving ego frame. `semantic` only changes the class
// labels; the geometry for a given seed is shared with the plain variant.
struct SceneParams {
  int64_t H = 32, W = 32, D = 8;
  double resolution = 0.5;
  int n_boxes = 3;
  int n_wall_segments = 2;
  bool border_walls = true;
  bool ground_plane = true;
  double ego_step = 0.5;        // meters per frame along +x
  double box_speed_max = 0.5;   // meters per frame
  uint32_t n_classes = 2;
  bool semantic = false;
  double frame_dt = 0.5;        // seconds (2 Hz)

  static SceneParams for_domain(Domain d);
};

SequenceClip synth_scene(Domain domain, uint64_t seed, int64_t n_frames);
SequenceClip synth_scene(const SceneParams& params, uint64_t seed, int64_t n_frames);

// Seeded shuffle, then a prefix of round(fraction * n) ids (at least one).
// Prefixes nest across fractions for a fixed seed. Validation ids are left
// for the caller to assign.
DatasetSplit split_fraction(const std::vector<int64_t>& ids, double fraction, uint64_t seed);

// Binary file formats (little-endian):
//   grid: "OCG1", u32 H, W, D, n_classes, f32 resolution, 3x f32 origin,
//         then H*W*D class bytes (x-major).
//   clip: "OCLP", u32 frame count, the frame grid blocks, then per frame
//         3x f64 pose and f64 timestamp.
void save_grid(const std::string& path, const OccupancyGrid& grid);
OccupancyGrid load_grid(const std::string& path);
void save_clip(const std::string& path, const SequenceClip& clip);
SequenceClip load_clip(const std::string& path);

}  // namespace occflow
