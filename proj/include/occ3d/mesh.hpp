#pragma once

#include "occ3d/geometry.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

namespace occ3d {

struct EmptyMesh : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct MeshIoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr double kMinTriangleArea = 1e-12;

using Triangle = std::array<std::uint32_t, 3>;

struct TriangleMesh {
  std::vector<Vec3> vertices;
  std::vector<Triangle> triangles;
  // One unit normal per triangle, right-hand rule over the index order.
  std::vector<Vec3> normals;

  bool empty() const { return triangles.empty(); }
  double triangle_area(std::size_t t) const;
  double surface_area() const;
  // Positive for outward-oriented closed meshes.
  double signed_volume() const;

  // Drops triangles below kMinTriangleArea and unreferenced vertices, then
  // recomputes normals.
  void finalize();
  void validate() const;
};

// Number of undirected edges not shared by exactly two triangles.
std::size_t count_non_manifold_edges(const TriangleMesh& mesh);
inline bool is_watertight(const TriangleMesh& mesh) { return !mesh.empty() && count_non_manifold_edges(mesh) == 0; }

TriangleMesh make_box_mesh(const Vec3& lo, const Vec3& hi);

void write_obj(const TriangleMesh& mesh, const std::filesystem::path& path);
TriangleMesh read_obj(const std::filesystem::path& path);
// Binary little-endian PLY with float64 vertices and uint32 face indices.
void write_ply(const TriangleMesh& mesh, const std::filesystem::path& path);
TriangleMesh read_ply(const std::filesystem::path& path);
// Dispatches on the file extension (.obj or .ply).
TriangleMesh read_mesh(const std::filesystem::path& path);
void write_mesh(const TriangleMesh& mesh, const std::filesystem::path& path);

}  // namespace occ3d
