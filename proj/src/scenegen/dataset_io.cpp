#include "occ3d/dataset_io.hpp"

#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace occ3d {

namespace fs = std::filesystem;

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string vec(const Vec3& v) { return num(v.x()) + " " + num(v.y()) + " " + num(v.z()); }

std::string mat(const Mat3& m) {
  std::string s;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) {
      if (!s.empty()) s += ' ';
      s += num(m(r, c));
    }
  }
  return s;
}

std::string join(const std::vector<std::string>& items) {
  std::string s;
  for (const auto& it : items) s += (s.empty() ? "" : ",") + it;
  return s;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

class Tokenizer {
 public:
  explicit Tokenizer(const std::string& text) {
    std::string cur;
    auto flush = [&] {
      if (!cur.empty()) tokens_.push_back(cur);
      cur.clear();
    };
    for (char ch : text) {
      if (ch == '(' || ch == ')') {
        flush();
        tokens_.emplace_back(1, ch);
      } else if (std::isspace(static_cast<unsigned char>(ch))) {
        flush();
      } else {
        cur += ch;
      }
    }
    flush();
  }
  bool done() const { return pos_ >= tokens_.size(); }
  const std::string& peek() const {
    if (done()) throw DatasetIoError("unexpected end of shape text");
    return tokens_[pos_];
  }
  std::string next() {
    std::string t = peek();
    ++pos_;
    return t;
  }
  void expect(const std::string& t) {
    if (next() != t) throw DatasetIoError("expected '" + t + "' in shape text");
  }
  double real() {
    const std::string t = next();
    try {
      std::size_t used = 0;
      const double v = std::stod(t, &used);
      if (used != t.size()) throw DatasetIoError("bad number '" + t + "'");
      return v;
    } catch (const std::logic_error&) {
      throw DatasetIoError("bad number '" + t + "'");
    }
  }
  Vec3 vec3() {
    const double x = real();
    const double y = real();
    const double z = real();
    return {x, y, z};
  }

 private:
  std::vector<std::string> tokens_;
  std::size_t pos_ = 0;
};

ShapeNode parse_node(Tokenizer& tok) {
  tok.expect("(");
  const std::string kind = tok.next();
  auto children = [&] {
    std::vector<ShapeNode> kids;
    while (tok.peek() != ")") kids.push_back(parse_node(tok));
    return kids;
  };
  ShapeNode node;
  if (kind == "sphere") {
    const Vec3 c = tok.vec3();
    node.node = Sphere{c, tok.real()};
  } else if (kind == "box") {
    const Vec3 c = tok.vec3();
    node.node = Box{c, tok.vec3()};
  } else if (kind == "capsule") {
    const Vec3 a = tok.vec3();
    const Vec3 b = tok.vec3();
    node.node = Capsule{a, b, tok.real()};
  } else if (kind == "torus") {
    Torus t;
    t.center = tok.vec3();
    t.major = tok.real();
    t.minor = tok.real();
    t.axis = tok.vec3();
    node.node = t;
  } else if (kind == "union") {
    node.node = Union{children()};
  } else if (kind == "intersection") {
    node.node = Intersection{children()};
  } else if (kind == "difference") {
    node.node = Difference{children()};
  } else if (kind == "transformed") {
    Transformed t;
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) t.rotation(r, c) = tok.real();
    }
    t.translation = tok.vec3();
    t.child = children();
    node.node = std::move(t);
  } else {
    throw DatasetIoError("unknown shape node '" + kind + "'");
  }
  tok.expect(")");
  return node;
}

using KeyValues = std::map<std::string, std::string>;

KeyValues read_key_values(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DatasetIoError("cannot open " + path.string());
  KeyValues kv;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) throw DatasetIoError("malformed line in " + path.string() + ": " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 3);
  }
  return kv;
}

const std::string& require(const KeyValues& kv, const std::string& key, const fs::path& where) {
  auto it = kv.find(key);
  if (it == kv.end()) throw DatasetIoError("missing key '" + key + "' in " + where.string());
  return it->second;
}

std::string dataset_text(const Dataset& ds) {
  const DatasetConfig& c = ds.config;
  std::ostringstream out;
  out << "format = occ3d-dataset-1\n";
  out << "seed = " << c.seed << "\n";
  out << "seen_families = " << join(c.seen_families) << "\n";
  out << "unseen_families = " << join(c.unseen_families) << "\n";
  out << "train_per_family = " << c.train_per_family << "\n";
  out << "test_per_family = " << c.test_per_family << "\n";
  out << "image_size = " << c.image_size << "\n";
  out << "focal_ratio = " << num(c.focal_ratio) << "\n";
  out << "views_per_shape = " << c.views_per_shape << "\n";
  out << "pool_size = " << c.pool_size << "\n";
  out << "radius_min = " << num(c.radius_min) << "\n";
  out << "radius_max = " << num(c.radius_max) << "\n";
  const Intrinsics& k = ds.intrinsics;
  out << "intrinsics = " << num(k.fx) << ' ' << num(k.fy) << ' ' << num(k.cx) << ' ' << num(k.cy) << ' '
      << k.width << ' ' << k.height << "\n";
  out << "samples = " << ds.samples.size() << "\n";
  std::vector<std::string> ids;
  for (const auto& s : ds.samples) ids.push_back(s.id);
  out << "sample_ids = " << join(ids) << "\n";
  return out.str();
}

std::string manifest_text(const Sample& s) {
  std::ostringstream out;
  out << "id = " << s.id << "\n";
  out << "family = " << s.shape.family << "\n";
  out << "split = " << (s.split == Split::Train ? "train" : "test") << "\n";
  out << "albedo = " << num(s.shape.albedo[0]) << ' ' << num(s.shape.albedo[1]) << ' ' << num(s.shape.albedo[2])
      << "\n";
  out << "shape = " << shape_to_string(s.shape.root) << "\n";
  out << "views = " << s.rigs.size() << "\n";
  for (std::size_t v = 0; v < s.rigs.size(); ++v) out << "rig." << v << " = " << rig_to_string(s.rigs[v]) << "\n";
  out << "points = " << s.point_pool.size() << "\n";
  return out.str();
}

std::string points_blob(const PointBatch& pb) {
  static_assert(std::endian::native == std::endian::little, "big-endian hosts are not supported");
  std::string blob;
  blob.resize(pb.size() * (3 * sizeof(double) + 1));
  char* dst = blob.data();
  for (const Vec3& p : pb.points) {
    for (int k = 0; k < 3; ++k) {
      const double v = p[k];
      std::memcpy(dst, &v, sizeof v);
      dst += sizeof v;
    }
  }
  std::memcpy(dst, pb.labels.data(), pb.labels.size());
  return blob;
}

std::string ppm_blob(const Image& img) {
  std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  for (float v : img.rgb) out += static_cast<char>(static_cast<std::uint8_t>(std::lround(v * 255.0f)));
  return out;
}

std::string pgm_blob(const Image& img) {
  std::string out = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  for (auto m : img.mask) out += static_cast<char>(m ? 255 : 0);
  return out;
}

void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DatasetIoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DatasetIoError("write failed for " + path.string());
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetIoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Pnm {
  int width = 0;
  int height = 0;
  std::string data;
};

Pnm parse_pnm(const std::string& bytes, const std::string& magic, int channels, const fs::path& where) {
  std::istringstream in(bytes);
  std::string m;
  int w = 0, h = 0, maxval = 0;
  in >> m >> w >> h >> maxval;
  if (m != magic || w <= 0 || h <= 0 || maxval != 255) throw DatasetIoError("bad image header in " + where.string());
  in.get();
  const auto offset = static_cast<std::size_t>(in.tellg());
  const std::size_t need = static_cast<std::size_t>(w) * h * channels;
  if (bytes.size() < offset + need) throw DatasetIoError("truncated image " + where.string());
  return {w, h, bytes.substr(offset, need)};
}

fs::path sample_dir(const fs::path& root, const std::string& id) { return root / "samples" / id; }

std::uint64_t fnv1a(std::uint64_t h, const std::string& bytes) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

}  // namespace

std::string shape_to_string(const ShapeNode& node) {
  return std::visit(
      Overloaded{[](const Sphere& s) { return "(sphere " + vec(s.center) + " " + num(s.radius) + ")"; },
                 [](const Box& b) { return "(box " + vec(b.center) + " " + vec(b.half_extents) + ")"; },
                 [](const Capsule& c) { return "(capsule " + vec(c.a) + " " + vec(c.b) + " " + num(c.radius) + ")"; },
                 [](const Torus& t) {
                   return "(torus " + vec(t.center) + " " + num(t.major) + " " + num(t.minor) + " " + vec(t.axis) + ")";
                 },
                 [](const Union& u) {
                   std::string s = "(union";
                   for (const auto& c : u.children) s += " " + shape_to_string(c);
                   return s + ")";
                 },
                 [](const Intersection& u) {
                   std::string s = "(intersection";
                   for (const auto& c : u.children) s += " " + shape_to_string(c);
                   return s + ")";
                 },
                 [](const Difference& d) {
                   return "(difference " + shape_to_string(d.operands[0]) + " " + shape_to_string(d.operands[1]) + ")";
                 },
                 [](const Transformed& t) {
                   return "(transformed " + mat(t.rotation) + " " + vec(t.translation) + " " +
                          shape_to_string(t.child.front()) + ")";
                 }},
      node.node);
}

ShapeNode shape_from_string(const std::string& text) {
  Tokenizer tok(text);
  ShapeNode node = parse_node(tok);
  if (!tok.done()) throw DatasetIoError("trailing tokens after shape");
  return node;
}

std::string rig_to_string(const CameraRig& rig) {
  const Intrinsics& k = rig.intrinsics;
  return num(k.fx) + " " + num(k.fy) + " " + num(k.cx) + " " + num(k.cy) + " " + std::to_string(k.width) + " " +
         std::to_string(k.height) + " " + mat(rig.extrinsics.rotation) + " " + vec(rig.extrinsics.translation);
}

CameraRig rig_from_string(const std::string& text) {
  std::istringstream in(text);
  CameraRig rig;
  Intrinsics& k = rig.intrinsics;
  in >> k.fx >> k.fy >> k.cx >> k.cy >> k.width >> k.height;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) in >> rig.extrinsics.rotation(r, c);
  }
  for (int c = 0; c < 3; ++c) in >> rig.extrinsics.translation[c];
  if (!in) throw DatasetIoError("malformed rig: " + text);
  return rig;
}

void write_ppm(const Image& img, const fs::path& path) { write_file(path, ppm_blob(img)); }

Image read_ppm(const fs::path& rgb_path, const fs::path& mask_path) {
  const Pnm rgb = parse_pnm(read_file(rgb_path), "P6", 3, rgb_path);
  const Pnm mask = parse_pnm(read_file(mask_path), "P5", 1, mask_path);
  if (rgb.width != mask.width || rgb.height != mask.height) throw DatasetIoError("mask size differs from view");
  Image img;
  img.width = rgb.width;
  img.height = rgb.height;
  img.rgb.resize(rgb.data.size());
  for (std::size_t i = 0; i < rgb.data.size(); ++i) {
    img.rgb[i] = static_cast<float>(static_cast<std::uint8_t>(rgb.data[i])) / 255.0f;
  }
  img.mask.resize(mask.data.size());
  for (std::size_t i = 0; i < mask.data.size(); ++i) img.mask[i] = static_cast<std::uint8_t>(mask.data[i]) ? 1 : 0;
  return img;
}

void save_dataset(const Dataset& ds, const fs::path& root) {
  fs::create_directories(root / "samples");
  write_file(root / "dataset.txt", dataset_text(ds));
  for (const Sample& s : ds.samples) {
    const fs::path dir = sample_dir(root, s.id);
    fs::create_directories(dir);
    write_file(dir / "manifest.txt", manifest_text(s));
    for (std::size_t v = 0; v < s.views.size(); ++v) {
      char name[32];
      std::snprintf(name, sizeof name, "view_%02zu.ppm", v);
      write_file(dir / name, ppm_blob(s.views[v]));
      std::snprintf(name, sizeof name, "mask_%02zu.pgm", v);
      write_file(dir / name, pgm_blob(s.views[v]));
    }
    write_file(dir / "points.bin", points_blob(s.point_pool));
  }
}

Dataset load_dataset(const fs::path& root) {
  const fs::path top = root / "dataset.txt";
  const KeyValues kv = read_key_values(top);
  if (require(kv, "format", top) != "occ3d-dataset-1") throw DatasetIoError("unsupported dataset format");
  Dataset ds;
  DatasetConfig& c = ds.config;
  try {
    c.seed = std::stoull(require(kv, "seed", top));
    c.seen_families = split_list(require(kv, "seen_families", top));
    c.unseen_families = split_list(require(kv, "unseen_families", top));
    c.train_per_family = std::stoi(require(kv, "train_per_family", top));
    c.test_per_family = std::stoi(require(kv, "test_per_family", top));
    c.image_size = std::stoi(require(kv, "image_size", top));
    c.focal_ratio = std::stod(require(kv, "focal_ratio", top));
    c.views_per_shape = std::stoi(require(kv, "views_per_shape", top));
    c.pool_size = std::stoull(require(kv, "pool_size", top));
    c.radius_min = std::stod(require(kv, "radius_min", top));
    c.radius_max = std::stod(require(kv, "radius_max", top));
  } catch (const std::logic_error& e) {
    throw DatasetIoError(std::string("bad value in dataset.txt: ") + e.what());
  }
  {
    std::istringstream in(require(kv, "intrinsics", top));
    Intrinsics& k = ds.intrinsics;
    in >> k.fx >> k.fy >> k.cx >> k.cy >> k.width >> k.height;
    if (!in) throw DatasetIoError("malformed intrinsics");
  }
  for (const std::string& id : split_list(require(kv, "sample_ids", top))) {
    const fs::path dir = sample_dir(root, id);
    const fs::path mpath = dir / "manifest.txt";
    const KeyValues m = read_key_values(mpath);
    Sample s;
    s.id = require(m, "id", mpath);
    s.split = require(m, "split", mpath) == "train" ? Split::Train : Split::Test;
    s.shape.family = require(m, "family", mpath);
    {
      std::istringstream in(require(m, "albedo", mpath));
      in >> s.shape.albedo[0] >> s.shape.albedo[1] >> s.shape.albedo[2];
    }
    s.shape.root = shape_from_string(require(m, "shape", mpath));
    const auto views = std::stoull(require(m, "views", mpath));
    for (std::size_t v = 0; v < views; ++v) {
      s.rigs.push_back(rig_from_string(require(m, "rig." + std::to_string(v), mpath)));
      char rgb[32], mask[32];
      std::snprintf(rgb, sizeof rgb, "view_%02zu.ppm", v);
      std::snprintf(mask, sizeof mask, "mask_%02zu.pgm", v);
      s.views.push_back(read_ppm(dir / rgb, dir / mask));
    }
    const auto n = std::stoull(require(m, "points", mpath));
    const std::string blob = read_file(dir / "points.bin");
    if (blob.size() != n * (3 * sizeof(double) + 1)) throw DatasetIoError("points.bin size mismatch for " + id);
    s.point_pool.points.resize(n);
    s.point_pool.labels.resize(n);
    const char* src = blob.data();
    for (auto& p : s.point_pool.points) {
      for (int k = 0; k < 3; ++k) {
        std::memcpy(&p[k], src, sizeof(double));
        src += sizeof(double);
      }
    }
    std::memcpy(s.point_pool.labels.data(), src, n);
    (s.split == Split::Train ? ds.train_indices : ds.test_indices).push_back(ds.samples.size());
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

std::uint64_t dataset_hash(const Dataset& ds) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  h = fnv1a(h, dataset_text(ds));
  for (const Sample& s : ds.samples) {
    h = fnv1a(h, manifest_text(s));
    for (const Image& img : s.views) {
      h = fnv1a(h, ppm_blob(img));
      h = fnv1a(h, pgm_blob(img));
    }
    h = fnv1a(h, points_blob(s.point_pool));
  }
  return h;
}

std::string hex_hash(std::uint64_t h) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace occ3d
