#include "occ3d/mesh.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

namespace occ3d {

double TriangleMesh::triangle_area(std::size_t t) const {
  const Triangle& tri = triangles[t];
  return 0.5 * (vertices[tri[1]] - vertices[tri[0]]).cross(vertices[tri[2]] - vertices[tri[0]]).norm();
}

double TriangleMesh::surface_area() const {
  double total = 0.0;
  for (std::size_t t = 0; t < triangles.size(); ++t) total += triangle_area(t);
  return total;
}

double TriangleMesh::signed_volume() const {
  double vol = 0.0;
  for (const Triangle& tri : triangles) {
    vol += vertices[tri[0]].dot(vertices[tri[1]].cross(vertices[tri[2]]));
  }
  return vol / 6.0;
}

void TriangleMesh::finalize() {
  std::vector<Triangle> kept;
  kept.reserve(triangles.size());
  for (std::size_t t = 0; t < triangles.size(); ++t) {
    const Triangle& tri = triangles[t];
    if (tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2]) continue;
    if (triangle_area(t) < kMinTriangleArea) continue;
    kept.push_back(tri);
  }
  std::vector<std::int64_t> remap(vertices.size(), -1);
  std::vector<Vec3> compact;
  compact.reserve(vertices.size());
  for (Triangle& tri : kept) {
    for (auto& idx : tri) {
      if (remap[idx] < 0) {
        remap[idx] = static_cast<std::int64_t>(compact.size());
        compact.push_back(vertices[idx]);
      }
      idx = static_cast<std::uint32_t>(remap[idx]);
    }
  }
  vertices = std::move(compact);
  triangles = std::move(kept);
  normals.resize(triangles.size());
  for (std::size_t t = 0; t < triangles.size(); ++t) {
    const Triangle& tri = triangles[t];
    normals[t] = (vertices[tri[1]] - vertices[tri[0]]).cross(vertices[tri[2]] - vertices[tri[0]]).normalized();
  }
}

void TriangleMesh::validate() const {
  for (const Triangle& tri : triangles) {
    for (auto idx : tri) {
      if (idx >= vertices.size()) throw std::out_of_range("triangle index out of range");
    }
  }
  if (normals.size() != triangles.size()) throw std::logic_error("normals not computed");
}

std::size_t count_non_manifold_edges(const TriangleMesh& mesh) {
  std::map<std::pair<std::uint32_t, std::uint32_t>, int> uses;
  for (const Triangle& tri : mesh.triangles) {
    for (int k = 0; k < 3; ++k) {
      std::uint32_t a = tri[k];
      std::uint32_t b = tri[(k + 1) % 3];
      if (a > b) std::swap(a, b);
      ++uses[{a, b}];
    }
  }
  std::size_t bad = 0;
  for (const auto& [edge, count] : uses) bad += count != 2;
  return bad;
}

TriangleMesh make_box_mesh(const Vec3& lo, const Vec3& hi) {
  TriangleMesh mesh;
  for (int c = 0; c < 8; ++c) {
    mesh.vertices.emplace_back((c & 1) ? hi.x() : lo.x(), (c & 2) ? hi.y() : lo.y(), (c & 4) ? hi.z() : lo.z());
  }
  // Outward-wound quads over corner bits (x=1, y=2, z=4).
  const int quads[6][4] = {{0, 4, 6, 2}, {1, 3, 7, 5}, {0, 1, 5, 4}, {2, 6, 7, 3}, {0, 2, 3, 1}, {4, 5, 7, 6}};
  for (const auto& q : quads) {
    mesh.triangles.push_back({static_cast<std::uint32_t>(q[0]), static_cast<std::uint32_t>(q[1]),
                              static_cast<std::uint32_t>(q[2])});
    mesh.triangles.push_back({static_cast<std::uint32_t>(q[0]), static_cast<std::uint32_t>(q[2]),
                              static_cast<std::uint32_t>(q[3])});
  }
  mesh.finalize();
  return mesh;
}

void write_obj(const TriangleMesh& mesh, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw MeshIoError("cannot open " + path.string() + " for writing");
  out << std::setprecision(17);
  for (const Vec3& v : mesh.vertices) out << "v " << v.x() << ' ' << v.y() << ' ' << v.z() << '\n';
  for (const Triangle& t : mesh.triangles) out << "f " << t[0] + 1 << ' ' << t[1] + 1 << ' ' << t[2] + 1 << '\n';
  if (!out) throw MeshIoError("write failed for " + path.string());
}

TriangleMesh read_obj(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MeshIoError("cannot open " + path.string());
  TriangleMesh mesh;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "v") {
      double x, y, z;
      if (!(ls >> x >> y >> z)) throw MeshIoError("bad vertex line in " + path.string());
      mesh.vertices.emplace_back(x, y, z);
    } else if (tag == "f") {
      std::vector<std::uint32_t> idx;
      std::string tok;
      while (ls >> tok) {
        // Accept "i", "i/t" and "i/t/n" forms.
        const long v = std::stol(tok.substr(0, tok.find('/')));
        if (v <= 0) throw MeshIoError("unsupported face index in " + path.string());
        idx.push_back(static_cast<std::uint32_t>(v - 1));
      }
      if (idx.size() < 3) throw MeshIoError("face with fewer than 3 vertices in " + path.string());
      for (std::size_t k = 1; k + 1 < idx.size(); ++k) mesh.triangles.push_back({idx[0], idx[k], idx[k + 1]});
    }
  }
  for (const Triangle& t : mesh.triangles) {
    for (auto i : t) {
      if (i >= mesh.vertices.size()) throw MeshIoError("face index out of range in " + path.string());
    }
  }
  mesh.finalize();
  return mesh;
}

namespace {

template <typename T>
void put_le(std::ostream& out, T value) {
  static_assert(std::endian::native == std::endian::little, "big-endian hosts are not supported");
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get_le(std::istream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw MeshIoError("truncated PLY body");
  return value;
}

}  // namespace

void write_ply(const TriangleMesh& mesh, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw MeshIoError("cannot open " + path.string() + " for writing");
  out << "ply\nformat binary_little_endian 1.0\n"
      << "element vertex " << mesh.vertices.size() << "\n"
      << "property double x\nproperty double y\nproperty double z\n"
      << "element face " << mesh.triangles.size() << "\n"
      << "property list uchar uint vertex_indices\nend_header\n";
  for (const Vec3& v : mesh.vertices) {
    put_le(out, v.x());
    put_le(out, v.y());
    put_le(out, v.z());
  }
  for (const Triangle& t : mesh.triangles) {
    put_le<std::uint8_t>(out, 3);
    for (auto i : t) put_le<std::uint32_t>(out, i);
  }
  if (!out) throw MeshIoError("write failed for " + path.string());
}

TriangleMesh read_ply(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MeshIoError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "ply") throw MeshIoError("not a PLY file: " + path.string());
  std::size_t n_vertices = 0, n_faces = 0;
  std::vector<std::string> vertex_props;
  std::string current;
  bool binary_le = false;
  while (std::getline(in, line)) {
    if (line == "end_header") break;
    std::istringstream ls(line);
    std::string word;
    ls >> word;
    if (word == "format") {
      std::string fmt;
      ls >> fmt;
      binary_le = fmt == "binary_little_endian";
    } else if (word == "element") {
      ls >> current;
      if (current == "vertex") ls >> n_vertices;
      if (current == "face") ls >> n_faces;
    } else if (word == "property" && current == "vertex") {
      std::string type;
      ls >> type;
      vertex_props.push_back(type);
    }
  }
  if (!binary_le) throw MeshIoError("only binary little-endian PLY is supported");
  if (vertex_props.size() != 3) throw MeshIoError("expected exactly x, y, z vertex properties");
  const bool as_float = vertex_props[0] == "float";
  TriangleMesh mesh;
  mesh.vertices.reserve(n_vertices);
  for (std::size_t i = 0; i < n_vertices; ++i) {
    Vec3 v;
    for (int k = 0; k < 3; ++k) v[k] = as_float ? get_le<float>(in) : get_le<double>(in);
    mesh.vertices.push_back(v);
  }
  for (std::size_t f = 0; f < n_faces; ++f) {
    const auto count = get_le<std::uint8_t>(in);
    std::vector<std::uint32_t> idx(count);
    for (auto& i : idx) {
      i = get_le<std::uint32_t>(in);
      if (i >= n_vertices) throw MeshIoError("face index out of range in " + path.string());
    }
    for (std::size_t k = 1; k + 1 < idx.size(); ++k) mesh.triangles.push_back({idx[0], idx[k], idx[k + 1]});
  }
  mesh.finalize();
  return mesh;
}

TriangleMesh read_mesh(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".obj") return read_obj(path);
  if (ext == ".ply") return read_ply(path);
  throw MeshIoError("unsupported mesh extension '" + ext + "'");
}

void write_mesh(const TriangleMesh& mesh, const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".obj") return write_obj(mesh, path);
  if (ext == ".ply") return write_ply(mesh, path);
  throw MeshIoError("unsupported mesh extension '" + ext + "'");
}

}  // namespace occ3d
