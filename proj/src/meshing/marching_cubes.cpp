#include "occ3d/meshing.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <unordered_map>

namespace occ3d {

namespace mc_detail {
namespace {

struct CubeTopology {
  std::array<std::array<int, 2>, 12> edges{};
  std::array<std::array<int, 8>, 8> edge_of{};  // corner pair -> edge id, -1 otherwise
  // Faces as corner cycles, counter-clockwise seen from outside the cube.
  std::array<std::array<int, 4>, 6> faces{};
};

CubeTopology build_topology() {
  CubeTopology topo;
  for (auto& row : topo.edge_of) row.fill(-1);
  int e = 0;
  for (int axis = 0; axis < 3; ++axis) {
    for (int c0 = 0; c0 < 8; ++c0) {
      if (c0 & (1 << axis)) continue;
      const int c1 = c0 | (1 << axis);
      topo.edges[e] = {c0, c1};
      topo.edge_of[c0][c1] = e;
      topo.edge_of[c1][c0] = e;
      ++e;
    }
  }
  int f = 0;
  for (int axis = 0; axis < 3; ++axis) {
    const int b = (axis + 1) % 3;
    const int c = (axis + 2) % 3;
    for (int side = 0; side < 2; ++side) {
      const int base = side << axis;
      std::array<int, 4> cyc = {base, base | (1 << b), base | (1 << b) | (1 << c), base | (1 << c)};
      if (side == 0) std::reverse(cyc.begin(), cyc.end());
      topo.faces[f++] = cyc;
    }
  }
  return topo;
}

const CubeTopology& topology() {
  static const CubeTopology topo = build_topology();
  return topo;
}

Eigen::Vector3d edge_midpoint(int e) {
  const auto& [a, b] = topology().edges[e];
  const Eigen::Vector3d pa(a & 1, (a >> 1) & 1, (a >> 2) & 1);
  const Eigen::Vector3d pb(b & 1, (b >> 1) & 1, (b >> 2) & 1);
  return 0.5 * (pa + pb);
}

CaseEntry build_case(int config) {
  const CubeTopology& topo = topology();
  auto inside = [config](int corner) { return ((config >> corner) & 1) != 0; };

  std::array<int, 12> next;
  next.fill(-1);
  std::array<bool, 12> on_ambiguous_face{};
  for (const auto& face : topo.faces) {
    int crossings = 0;
    for (int k = 0; k < 4; ++k) crossings += inside(face[k]) != inside(face[(k + 1) % 4]);
    // Each run of inside corners is cut off by one segment running from the
    // edge where the walk leaves the run to the edge where it entered it.
    for (int k = 0; k < 4; ++k) {
      const int cur = face[k];
      const int nxt = face[(k + 1) % 4];
      if (!(inside(cur) && !inside(nxt))) continue;
      const int exit_edge = topo.edge_of[cur][nxt];
      int start = k;
      while (inside(face[(start + 3) % 4])) start = (start + 3) % 4;
      const int before = face[(start + 3) % 4];
      const int enter_edge = topo.edge_of[before][face[start]];
      next[exit_edge] = enter_edge;
      if (crossings == 4) {
        on_ambiguous_face[exit_edge] = true;
        on_ambiguous_face[enter_edge] = true;
      }
    }
  }

  CaseEntry entry;
  std::array<bool, 12> used{};
  for (int e = 0; e < 12; ++e) {
    if (next[e] < 0 || used[e]) continue;
    Loop loop;
    int cur = e;
    while (!used[cur]) {
      used[cur] = true;
      loop.edges.push_back(cur);
      loop.centroid_fan = loop.centroid_fan || on_ambiguous_face[cur];
      cur = next[cur];
    }
    if (loop.edges.size() < 4) loop.centroid_fan = false;
    entry.loops.push_back(std::move(loop));
  }
  return entry;
}

std::array<CaseEntry, 256> build_table() {
  std::array<CaseEntry, 256> table;
  for (int config = 0; config < 256; ++config) table[config] = build_case(config);
  // Fix the winding globally so the single-corner case faces away from its corner.
  const Loop& probe = table[1].loops.front();
  const Eigen::Vector3d a = edge_midpoint(probe.edges[0]);
  const Eigen::Vector3d b = edge_midpoint(probe.edges[1]);
  const Eigen::Vector3d c = edge_midpoint(probe.edges[2]);
  if ((b - a).cross(c - a).dot(a) < 0.0) {
    for (auto& entry : table) {
      for (auto& loop : entry.loops) std::reverse(loop.edges.begin(), loop.edges.end());
    }
  }
  return table;
}

}  // namespace

const std::array<CaseEntry, 256>& case_table() {
  static const std::array<CaseEntry, 256> table = build_table();
  return table;
}

const std::array<std::array<int, 2>, 12>& edge_corners() { return topology().edges; }

}  // namespace mc_detail

namespace {

struct SlabOutput {
  std::vector<std::uint64_t> keys;  // lattice-edge key per emitted vertex, or ~0 for centroids
  std::vector<Vec3> positions;
  std::vector<Triangle> triangles;  // indices into this slab's vertex list
};

// Padded lattice index range is [-1, N]; stored shifted by +1.
class PaddedLattice {
 public:
  PaddedLattice(const OccupancyGrid& grid) : grid_(grid), n_(grid.resolution) {}

  double value(int ix, int iy, int iz) const {
    if (ix < 0 || iy < 0 || iz < 0 || ix >= n_ || iy >= n_ || iz >= n_) return 0.0;
    return grid_.at(ix, iy, iz);
  }
  Vec3 position(int ix, int iy, int iz) const {
    return {grid_.center(ix), grid_.center(iy), grid_.center(iz)};
  }
  std::uint64_t edge_key(int ix, int iy, int iz, int axis) const {
    const std::uint64_t m = static_cast<std::uint64_t>(n_) + 2;
    const std::uint64_t lin = (static_cast<std::uint64_t>(iz + 1) * m + (iy + 1)) * m + (ix + 1);
    return lin * 3 + axis;
  }

 private:
  const OccupancyGrid& grid_;
  int n_;
};

void process_slab(const PaddedLattice& lattice, int n, int iz, double iso, SlabOutput& out) {
  const auto& table = mc_detail::case_table();
  const auto& edges = mc_detail::edge_corners();
  std::unordered_map<std::uint64_t, std::uint32_t> local;

  for (int iy = -1; iy < n; ++iy) {
    for (int ix = -1; ix < n; ++ix) {
      std::array<double, 8> val;
      int config = 0;
      for (int c = 0; c < 8; ++c) {
        val[c] = lattice.value(ix + (c & 1), iy + ((c >> 1) & 1), iz + ((c >> 2) & 1));
        if (val[c] >= iso) config |= 1 << c;
      }
      if (config == 0 || config == 255) continue;

      std::array<std::int64_t, 12> vid;
      vid.fill(-1);
      auto vertex_for_edge = [&](int e) -> std::uint32_t {
        if (vid[e] >= 0) return static_cast<std::uint32_t>(vid[e]);
        const int a = edges[e][0];
        const int b = edges[e][1];
        const int axis = (a ^ b) == 1 ? 0 : ((a ^ b) == 2 ? 1 : 2);
        const int ax = ix + (a & 1), ay = iy + ((a >> 1) & 1), az = iz + ((a >> 2) & 1);
        const std::uint64_t key = lattice.edge_key(ax, ay, az, axis);
        auto [it, inserted] = local.try_emplace(key, static_cast<std::uint32_t>(out.positions.size()));
        if (inserted) {
          double t = (iso - val[a]) / (val[b] - val[a]);
          t = std::clamp(t, 1e-6, 1.0 - 1e-6);
          const Vec3 pa = lattice.position(ax, ay, az);
          const Vec3 pb = lattice.position(ix + (b & 1), iy + ((b >> 1) & 1), iz + ((b >> 2) & 1));
          out.positions.push_back(pa + t * (pb - pa));
          out.keys.push_back(key);
        }
        vid[e] = it->second;
        return it->second;
      };

      for (const auto& loop : table[config].loops) {
        const std::size_t m = loop.edges.size();
        std::vector<std::uint32_t> ids(m);
        for (std::size_t k = 0; k < m; ++k) ids[k] = vertex_for_edge(loop.edges[k]);
        if (loop.centroid_fan) {
          Vec3 c = Vec3::Zero();
          for (auto id : ids) c += out.positions[id];
          c /= static_cast<double>(m);
          const auto cid = static_cast<std::uint32_t>(out.positions.size());
          out.positions.push_back(c);
          out.keys.push_back(~std::uint64_t{0});
          for (std::size_t k = 0; k < m; ++k) out.triangles.push_back({cid, ids[k], ids[(k + 1) % m]});
        } else {
          for (std::size_t k = 1; k + 1 < m; ++k) out.triangles.push_back({ids[0], ids[k], ids[k + 1]});
        }
      }
    }
  }
}

}  // namespace

OccupancyGrid evaluate_grid(const FieldFn& field, int resolution, std::size_t max_batch) {
  if (resolution < 8) throw std::invalid_argument("grid resolution must be at least 8");
  if (max_batch == 0) throw std::invalid_argument("batch size must be positive");
  OccupancyGrid grid;
  grid.resolution = resolution;
  const std::size_t total = static_cast<std::size_t>(resolution) * resolution * resolution;
  grid.values.resize(total);
  std::vector<Vec3> block;
  block.reserve(std::min(total, max_batch));
  for (std::size_t start = 0; start < total; start += max_batch) {
    const std::size_t end = std::min(total, start + max_batch);
    block.clear();
    for (std::size_t i = start; i < end; ++i) {
      const int ix = static_cast<int>(i % resolution);
      const int iy = static_cast<int>((i / resolution) % resolution);
      const int iz = static_cast<int>(i / (static_cast<std::size_t>(resolution) * resolution));
      block.push_back(grid.cell_center(ix, iy, iz));
    }
    const std::vector<double> vals = field(block);
    if (vals.size() != block.size()) throw std::runtime_error("field returned the wrong number of values");
    std::copy(vals.begin(), vals.end(), grid.values.begin() + static_cast<std::ptrdiff_t>(start));
  }
  return grid;
}

TriangleMesh marching_cubes(const OccupancyGrid& grid, double iso) {
  if (!(iso > 0.0 && iso < 1.0)) throw std::invalid_argument("iso level must lie in (0, 1)");
  const int n = grid.resolution;
  if (n < 1 || grid.values.size() != static_cast<std::size_t>(n) * n * n) {
    throw std::invalid_argument("malformed occupancy grid");
  }
  const PaddedLattice lattice(grid);
  std::vector<SlabOutput> slabs(static_cast<std::size_t>(n) + 1);

#pragma omp parallel for schedule(dynamic)
  for (int iz = -1; iz < n; ++iz) process_slab(lattice, n, iz, iso, slabs[static_cast<std::size_t>(iz + 1)]);

  // Deterministic merge in slab order, deduplicating by lattice-edge key.
  TriangleMesh mesh;
  std::unordered_map<std::uint64_t, std::uint32_t> global;
  for (const SlabOutput& slab : slabs) {
    std::vector<std::uint32_t> remap(slab.positions.size());
    for (std::size_t v = 0; v < slab.positions.size(); ++v) {
      const std::uint64_t key = slab.keys[v];
      if (key == ~std::uint64_t{0}) {
        remap[v] = static_cast<std::uint32_t>(mesh.vertices.size());
        mesh.vertices.push_back(slab.positions[v]);
        continue;
      }
      auto [it, inserted] = global.try_emplace(key, static_cast<std::uint32_t>(mesh.vertices.size()));
      if (inserted) mesh.vertices.push_back(slab.positions[v]);
      remap[v] = it->second;
    }
    for (const Triangle& t : slab.triangles) mesh.triangles.push_back({remap[t[0]], remap[t[1]], remap[t[2]]});
  }
  mesh.finalize();
  return mesh;
}

}  // namespace occ3d
