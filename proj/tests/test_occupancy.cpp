#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "occflow/occupancy.hpp"

using namespace occflow;

namespace {

std::string temp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

OccupancyGrid random_grid(int64_t H, int64_t W, int64_t D, uint32_t nc, Rng& rng, double p_occ = 0.3) {
  OccupancyGrid g(H, W, D, 0.5, nc);
  for (auto& c : g.classes)
    if (rng.uniform() < p_occ) c = static_cast<uint8_t>(1 + rng.uniform_int(nc - 1));
  return g;
}

}  // namespace

TEST_CASE("voxelize single point and empty list") {
  std::array<double, 3> origin{0, 0, 0};
  auto r = voxelize_points({{0.0, 0.0, 0.0}}, 4, 4, 2, 0.5, origin);
  CHECK(r.grid.at(0, 0, 0) == 1);
  CHECK(r.grid.occupied_count() == 1);
  CHECK(r.dropped == 0);

  auto e = voxelize_points({}, 4, 4, 2, 0.5, origin);
  CHECK(e.grid.occupied_count() == 0);
}

TEST_CASE("voxelize drops out-of-bounds and matches per-point binning oracle") {
  Rng rng(21);
  std::vector<std::array<double, 3>> pts;
  for (int i = 0; i < 1000; ++i)
    pts.push_back({rng.uniform() * 4.0 - 1.0, rng.uniform() * 4.0 - 1.0, rng.uniform() * 2.0 - 0.5});
  std::array<double, 3> origin{0, 0, 0};
  auto r = voxelize_points(pts, 4, 4, 2, 0.5, origin);

  std::set<int64_t> expect;
  int64_t dropped = 0;
  for (const auto& p : pts) {
    int64_t x = static_cast<int64_t>(std::floor(p[0] / 0.5));
    int64_t y = static_cast<int64_t>(std::floor(p[1] / 0.5));
    int64_t z = static_cast<int64_t>(std::floor(p[2] / 0.5));
    if (x < 0 || x >= 4 || y < 0 || y >= 4 || z < 0 || z >= 2) {
      ++dropped;
      continue;
    }
    expect.insert((x * 4 + y) * 2 + z);
  }
  CHECK(r.dropped == dropped);
  for (int64_t i = 0; i < r.grid.numel(); ++i)
    CHECK(r.grid.occupied(i) == (expect.count(i) > 0));
}

TEST_CASE("voxelize is idempotent through voxel centers") {
  Rng rng(22);
  std::vector<std::array<double, 3>> pts;
  for (int i = 0; i < 200; ++i)
    pts.push_back({rng.uniform() * 2.0, rng.uniform() * 2.0, rng.uniform()});
  std::array<double, 3> origin{0, 0, 0};
  auto r1 = voxelize_points(pts, 4, 4, 2, 0.5, origin);

  std::vector<std::array<double, 3>> centers;
  for (int64_t x = 0; x < 4; ++x)
    for (int64_t y = 0; y < 4; ++y)
      for (int64_t z = 0; z < 2; ++z)
        if (r1.grid.at(x, y, z)) centers.push_back({(x + 0.5) * 0.5, (y + 0.5) * 0.5, (z + 0.5) * 0.5});
  auto r2 = voxelize_points(centers, 4, 4, 2, 0.5, origin);
  CHECK(r1.grid.classes == r2.grid.classes);
}

TEST_CASE("iou identities and oracle") {
  Rng rng(23);
  OccupancyGrid a = random_grid(6, 6, 3, 2, rng);
  CHECK(iou(a, a) == 1.0);

  OccupancyGrid empty(6, 6, 3, 0.5);
  CHECK(iou(empty, empty) == 1.0);

  OccupancyGrid x(4, 1, 1, 0.5), y(4, 1, 1, 0.5);
  x.at(0, 0, 0) = 1;
  x.at(1, 0, 0) = 1;
  y.at(1, 0, 0) = 1;
  y.at(2, 0, 0) = 1;
  CHECK(iou(x, y) == doctest::Approx(1.0 / 3.0));
  CHECK(iou(x, y) == iou(y, x));

  OccupancyGrid b = random_grid(6, 6, 3, 2, rng);
  int64_t inter = 0, uni = 0;
  for (int64_t xx = 0; xx < 6; ++xx)
    for (int64_t yy = 0; yy < 6; ++yy)
      for (int64_t zz = 0; zz < 3; ++zz) {
        bool oa = a.at(xx, yy, zz) != 0, ob = b.at(xx, yy, zz) != 0;
        inter += (oa && ob);
        uni += (oa || ob);
      }
  CHECK(iou(a, b) == doctest::Approx(static_cast<double>(inter) / uni));

  OccupancyGrid wrong(5, 6, 3, 0.5);
  CHECK_THROWS(iou(a, wrong));
}

TEST_CASE("miou identities, disjoint case, exhaustive oracle") {
  Rng rng(24);
  OccupancyGrid a = random_grid(5, 5, 2, 4, rng);
  MiouResult self = miou(a, a, 4);
  CHECK(self.mean == doctest::Approx(1.0));

  // class 1 perfect, class 2 disjoint
  OccupancyGrid p(4, 1, 1, 0.5, 3), q(4, 1, 1, 0.5, 3);
  p.at(0, 0, 0) = 1;
  q.at(0, 0, 0) = 1;
  p.at(1, 0, 0) = 2;
  q.at(2, 0, 0) = 2;
  MiouResult r = miou(p, q, 3);
  CHECK(r.mean == doctest::Approx(0.5));

  OccupancyGrid b = random_grid(5, 5, 2, 4, rng);
  MiouResult m = miou(a, b, 4);
  double sum = 0.0;
  int count = 0;
  for (uint32_t c = 1; c < 4; ++c) {
    int64_t inter = 0, uni = 0;
    for (int64_t i = 0; i < a.numel(); ++i) {
      bool ia = a.classes[static_cast<size_t>(i)] == c;
      bool ib = b.classes[static_cast<size_t>(i)] == c;
      inter += (ia && ib);
      uni += (ia || ib);
    }
    if (uni == 0) continue;
    sum += static_cast<double>(inter) / uni;
    ++count;
    CHECK(m.per_class[c] == doctest::Approx(static_cast<double>(inter) / uni));
  }
  CHECK(m.mean == doctest::Approx(sum / count));
  // mean equals arithmetic mean of included per-class values
  double mean2 = 0.0;
  for (uint32_t c : m.class_ids) mean2 += m.per_class[c];
  CHECK(m.mean == doctest::Approx(mean2 / m.class_ids.size()));
}

TEST_CASE("densify identity cases") {
  // Two frames, identity poses, disjoint voxels -> both get the union.
  SequenceClip clip;
  for (int f = 0; f < 2; ++f) {
    OccupancyGrid g(4, 4, 2, 0.5);
    g.origin = {0, 0, 0};
    clip.frames.push_back(g);
    clip.ego_poses.push_back({0, 0, 0});
    clip.timestamps.push_back(0.5 * f);
  }
  clip.frames[0].at(0, 0, 0) = 1;
  clip.frames[1].at(3, 3, 1) = 1;
  clip.recompute_trajectory();

  SequenceClip d = densify_sequence(clip);
  for (int f = 0; f < 2; ++f) {
    CHECK(d.frames[f].at(0, 0, 0) == 1);
    CHECK(d.frames[f].at(3, 3, 1) == 1);
    CHECK(d.frames[f].occupied_count() == 2);
  }

  // Idempotence for identity poses.
  SequenceClip dd = densify_sequence(d);
  for (int f = 0; f < 2; ++f) CHECK(dd.frames[f].classes == d.frames[f].classes);

  // Single frame is unchanged.
  SequenceClip one;
  one.frames.push_back(clip.frames[0]);
  one.ego_poses.push_back({0, 0, 0});
  one.timestamps.push_back(0.0);
  one.recompute_trajectory();
  SequenceClip od = densify_sequence(one);
  CHECK(od.frames[0].classes == one.frames[0].classes);
}

TEST_CASE("densify matches integer-shift oracle under pure translation") {
  Rng rng(25);
  const int64_t H = 6, W = 6, D = 2, F = 3;
  const double res = 0.5;
  SequenceClip clip;
  for (int64_t f = 0; f < F; ++f) {
    OccupancyGrid g(H, W, D, res);
    g.origin = {-1.5, -1.5, 0};
    for (auto& c : g.classes)
      if (rng.uniform() < 0.2) c = 1;
    clip.frames.push_back(std::move(g));
    clip.ego_poses.push_back({res * 2.0 * static_cast<double>(f), 0.0, 0.0});  // exactly 2 voxels/frame
    clip.timestamps.push_back(0.5 * static_cast<double>(f));
  }
  clip.recompute_trajectory();

  SequenceClip d = densify_sequence(clip);

  for (int64_t dst = 0; dst < F; ++dst) {
    // Brute force: voxel (x,y,z) of frame src appears at x + 2*(src-dst) in dst.
    OccupancyGrid want(H, W, D, res);
    for (int64_t src = 0; src < F; ++src)
      for (int64_t x = 0; x < H; ++x)
        for (int64_t y = 0; y < W; ++y)
          for (int64_t z = 0; z < D; ++z) {
            if (!clip.frames[static_cast<size_t>(src)].at(x, y, z)) continue;
            int64_t nx = x + 2 * (src - dst);
            if (nx >= 0 && nx < H) want.at(nx, y, z) = 1;
          }
    CHECK(d.frames[static_cast<size_t>(dst)].classes == want.classes);
  }
}

TEST_CASE("synth_scene determinism and semantic pairing") {
  SequenceClip a = synth_scene(Domain::Outdoor, 99, 4);
  SequenceClip b = synth_scene(Domain::Outdoor, 99, 4);
  REQUIRE(a.n_frames() == 4);
  for (int f = 0; f < 4; ++f) CHECK(a.frames[f].classes == b.frames[f].classes);

  SequenceClip sem = synth_scene(Domain::Semantic, 99, 4);
  CHECK(sem.frames[0].n_classes == 5);
  for (int f = 0; f < 4; ++f) {
    REQUIRE(sem.frames[f].numel() == a.frames[f].numel());
    for (int64_t i = 0; i < a.frames[f].numel(); ++i) {
      bool geo = a.frames[f].classes[static_cast<size_t>(i)] != 0;
      bool s = sem.frames[f].classes[static_cast<size_t>(i)] != 0;
      CHECK(geo == s);
    }
  }

  SequenceClip hr = synth_scene(Domain::HighRes, 5, 3);
  CHECK(hr.frames[0].H == 64);
  CHECK(hr.frames[0].resolution == doctest::Approx(0.25));

  CHECK_THROWS(synth_scene(Domain::Outdoor, 1, 1));
}

TEST_CASE("synth_scene centroid tracking oracle") {
  // One box moving exactly one voxel per frame, static ego, no clutter.
  SceneParams p;
  p.n_boxes = 0;
  p.n_wall_segments = 0;
  p.border_walls = false;
  p.ground_plane = false;
  p.ego_step = 0.0;
  SequenceClip clip = synth_scene(p, 7, 5);

  // Inject the box by hand through the same rasterization the generator uses:
  // occupy a 2x2 block drifting +1 voxel in x per frame.
  for (int64_t f = 0; f < 5; ++f) {
    OccupancyGrid& g = clip.frames[static_cast<size_t>(f)];
    for (int64_t x = 4 + f; x < 6 + f; ++x)
      for (int64_t y = 10; y < 12; ++y) g.at(x, y, 2) = 1;
  }

  double prev = 0.0;
  for (int64_t f = 0; f < 5; ++f) {
    const OccupancyGrid& g = clip.frames[static_cast<size_t>(f)];
    double cx = 0.0;
    int64_t n = 0;
    for (int64_t x = 0; x < g.H; ++x)
      for (int64_t y = 0; y < g.W; ++y)
        for (int64_t z = 0; z < g.D; ++z)
          if (g.at(x, y, z)) {
            cx += static_cast<double>(x);
            ++n;
          }
    cx /= static_cast<double>(n);
    if (f > 0) CHECK(cx - prev == doctest::Approx(1.0).epsilon(1e-12));
    prev = cx;
  }
}

TEST_CASE("split_fraction sizes and nesting") {
  std::vector<int64_t> ids(100);
  for (int64_t i = 0; i < 100; ++i) ids[static_cast<size_t>(i)] = i;

  DatasetSplit full = split_fraction(ids, 1.0, 3);
  CHECK(full.train.size() == 100);

  DatasetSplit quarter = split_fraction(ids, 0.25, 3);
  CHECK(quarter.train.size() == 25);

  for (uint64_t seed : {1ull, 2ull, 3ull, 17ull}) {
    std::vector<std::vector<int64_t>> chains;
    for (double f : {0.10, 0.25, 0.50, 1.00}) chains.push_back(split_fraction(ids, f, seed).train);
    for (size_t i = 0; i + 1 < chains.size(); ++i) {
      std::set<int64_t> big(chains[i + 1].begin(), chains[i + 1].end());
      for (int64_t id : chains[i]) CHECK(big.count(id) == 1);
    }
  }

  CHECK_THROWS(split_fraction({}, 0.5, 1));
  CHECK_THROWS(split_fraction(ids, 0.0, 1));
  CHECK_THROWS(split_fraction(ids, 1.5, 1));
}

TEST_CASE("grid io round-trip, corruption, exact size") {
  Rng rng(26);
  OccupancyGrid g = random_grid(5, 4, 3, 4, rng);
  g.resolution = 0.25;
  g.origin = {-1.0, -0.5, 0.0};
  std::string path = temp_path("occflow_grid_test.ocg");
  save_grid(path, g);

  OccupancyGrid back = load_grid(path);
  CHECK(back.classes == g.classes);
  CHECK(back.H == g.H);
  CHECK(back.resolution == doctest::Approx(0.25));
  CHECK(back.origin[0] == doctest::Approx(-1.0));

  // header: 4 magic + 4*4 dims + 4 res + 12 origin = 36 bytes, then payload
  CHECK(std::filesystem::file_size(path) == 36u + 5u * 4u * 3u);

  // corrupt the magic
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.put('X');
  }
  CHECK_THROWS(load_grid(path));
  std::filesystem::remove(path);
}

TEST_CASE("clip io round-trip and truncation") {
  SequenceClip clip = synth_scene(Domain::Outdoor, 11, 3);
  std::string path = temp_path("occflow_clip_test.oclp");
  save_clip(path, clip);
  SequenceClip back = load_clip(path);
  REQUIRE(back.n_frames() == 3);
  for (int f = 0; f < 3; ++f) CHECK(back.frames[f].classes == clip.frames[f].classes);
  CHECK(back.ego_poses[2].x == clip.ego_poses[2].x);
  CHECK(back.timestamps[1] == clip.timestamps[1]);
  CHECK(back.trajectory[1][0] == clip.trajectory[1][0]);

  auto sz = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, sz - 8);
  CHECK_THROWS(load_clip(path));
  std::filesystem::remove(path);
}
