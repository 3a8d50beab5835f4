#pragma once

#include "occ3d/mesh.hpp"

#include <functional>
#include <span>
#include <vector>

namespace occ3d {

inline constexpr double kSceneHalfExtent = 0.55;

// Scalar samples at the cell centers of an N^3 lattice over the scene cube.
// Linear index is (iz * N + iy) * N + ix.
struct OccupancyGrid {
  int resolution = 0;
  double lo = -kSceneHalfExtent;
  double hi = kSceneHalfExtent;
  std::vector<double> values;

  double cell_size() const { return (hi - lo) / resolution; }
  double center(int i) const { return lo + (i + 0.5) * cell_size(); }
  Vec3 cell_center(int ix, int iy, int iz) const { return {center(ix), center(iy), center(iz)}; }
  std::size_t index(int ix, int iy, int iz) const {
    return (static_cast<std::size_t>(iz) * resolution + iy) * resolution + ix;
  }
  double at(int ix, int iy, int iz) const { return values[index(ix, iy, iz)]; }
};

// Batched scalar field: maps a block of world points to one value per point.
using FieldFn = std::function<std::vector<double>(std::span<const Vec3>)>;

inline constexpr std::size_t kMaxFieldBatch = 65536;

OccupancyGrid evaluate_grid(const FieldFn& field, int resolution, std::size_t max_batch = kMaxFieldBatch);

// Marching cubes over the cell-center lattice, padded with zeros outside the
// grid so every mesh is closed. Corners with value >= iso are inside and
// normals point from inside to outside.
TriangleMesh marching_cubes(const OccupancyGrid& grid, double iso = 0.5);

namespace mc_detail {

// Surface loops for one of the 256 corner configurations, as cycles of cube
// edge ids 0..11. Loops that touch an ambiguous face are fanned around their
// centroid so the two cubes sharing that face never emit the same diagonal.
struct Loop {
  std::vector<int> edges;
  bool centroid_fan = false;
};
struct CaseEntry {
  std::vector<Loop> loops;
};
const std::array<CaseEntry, 256>& case_table();

// Corner c sits at offset (c & 1, (c >> 1) & 1, (c >> 2) & 1).
const std::array<std::array<int, 2>, 12>& edge_corners();

}  // namespace mc_detail

}  // namespace occ3d
