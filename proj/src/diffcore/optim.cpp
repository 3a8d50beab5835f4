#include "occ3d/diffcore/optim.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <set>

namespace occ3d::diff {
inline namespace OCC3D_DIFF_NS {

void adam_step(ParameterSet& params, OptimizerState& state) {
  const auto& list = params.parameters();
  for (const auto& p : list) {
    if (!p.tensor.has_grad()) throw MissingGrad("parameter has no gradient: " + p.name);
  }
  if (state.m.size() != list.size()) {
    state.m.assign(list.size(), {});
    state.v.assign(list.size(), {});
    for (std::size_t i = 0; i < list.size(); ++i) {
      state.m[i].assign(list[i].tensor.size(), Real(0));
      state.v[i].assign(list[i].tensor.size(), Real(0));
    }
  }
  ++state.step;
  const AdamConfig& c = state.config;
  const double t = static_cast<double>(state.step);
  const double corr1 = 1.0 - std::pow(c.beta1, t);
  const double corr2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < list.size(); ++i) {
    Tensor w = list[i].tensor;
    if (state.m[i].size() != w.size()) throw std::logic_error("optimizer moments do not match " + list[i].name);
    auto value = w.values();
    auto grad = w.grad();
    Real* m = state.m[i].data();
    Real* v = state.v[i].data();
    for (std::size_t k = 0; k < value.size(); ++k) {
      const double g = grad[k];
      const double mk = c.beta1 * m[k] + (1.0 - c.beta1) * g;
      const double vk = c.beta2 * v[k] + (1.0 - c.beta2) * g * g;
      m[k] = static_cast<Real>(mk);
      v[k] = static_cast<Real>(vk);
      const double step = c.lr * (mk / corr1) / (std::sqrt(vk / corr2) + c.eps);
      value[k] = static_cast<Real>(value[k] - step);
    }
  }
}

namespace {

constexpr char kMagic[8] = {'O', 'C', 'C', '3', 'D', 'C', 'K', 'P'};

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path) : out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw IoError("cannot open checkpoint for writing: " + path.string());
  }
  template <typename T>
  void put(T v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void bytes(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  template <typename R>
  void floats(const R* data, std::size_t n) {
    std::vector<float> tmp(data, data + n);
    out_.write(reinterpret_cast<const char*>(tmp.data()), static_cast<std::streamsize>(n * sizeof(float)));
  }
  void finish(const std::filesystem::path& path) {
    out_.flush();
    if (!out_) throw IoError("failed writing checkpoint: " + path.string());
  }

 private:
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : path_(path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path.string());
    data_.assign(std::istreambuf_iterator<char>(in), {});
  }
  void raw(void* dst, std::size_t n) {
    if (n > data_.size() - pos_) throw IoError("truncated checkpoint: " + path_.string());
    std::memcpy(dst, data_.data() + pos_, n);
    pos_ += n;
  }
  template <typename T>
  T get() {
    T v;
    raw(&v, sizeof(T));
    return v;
  }
  std::string bytes() {
    const auto n = get<std::uint32_t>();
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
  }
  std::vector<float> floats(std::size_t n) {
    if (n > (data_.size() - pos_) / sizeof(float)) throw IoError("truncated checkpoint: " + path_.string());
    std::vector<float> v(n);
    raw(v.data(), n * sizeof(float));
    return v;
  }
  bool at_end() const { return pos_ == data_.size(); }

 private:
  std::filesystem::path path_;
  std::vector<char> data_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParameterSet& params, const std::string& meta,
                     const OptimizerState* optimizer) {
  Writer w(path);
  for (char c : kMagic) w.put(c);
  w.put(kCheckpointVersion);
  w.bytes(meta);
  const auto& ps = params.parameters();
  const auto& bs = params.buffers();
  w.put(static_cast<std::uint32_t>(ps.size() + bs.size()));
  for (const auto& p : ps) {
    w.bytes(p.name);
    w.put(std::uint8_t{0});
    w.put(static_cast<std::uint32_t>(p.tensor.rank()));
    for (std::size_t d : p.tensor.shape()) w.put(static_cast<std::uint64_t>(d));
    w.floats(p.tensor.data(), p.tensor.size());
  }
  for (const auto& b : bs) {
    w.bytes(b.name);
    w.put(std::uint8_t{1});
    w.put(std::uint32_t{1});
    w.put(static_cast<std::uint64_t>(b.values->size()));
    w.floats(b.values->data(), b.values->size());
  }
  const bool with_opt = optimizer != nullptr && optimizer->m.size() == ps.size();
  w.put(static_cast<std::uint8_t>(with_opt ? 1 : 0));
  if (with_opt) {
    w.put(optimizer->step);
    w.put(optimizer->config.lr);
    w.put(optimizer->config.beta1);
    w.put(optimizer->config.beta2);
    w.put(optimizer->config.eps);
    for (std::size_t i = 0; i < ps.size(); ++i) {
      w.put(static_cast<std::uint64_t>(optimizer->m[i].size()));
      w.floats(optimizer->m[i].data(), optimizer->m[i].size());
      w.floats(optimizer->v[i].data(), optimizer->v[i].size());
    }
  }
  w.finish(path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  Reader r(path);
  char magic[8];
  r.raw(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof magic) != 0) throw IoError("not a checkpoint file: " + path.string());
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw VersionMismatch("checkpoint version " + std::to_string(version) + ", expected " +
                          std::to_string(kCheckpointVersion));
  }
  Checkpoint ck;
  ck.meta = r.bytes();
  const auto count = r.get<std::uint32_t>();
  std::size_t param_count = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointRecord rec;
    rec.name = r.bytes();
    const auto kind = r.get<std::uint8_t>();
    if (kind > 1) throw IoError("corrupt checkpoint record kind in " + path.string());
    rec.buffer = kind == 1;
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw IoError("corrupt checkpoint record rank in " + path.string());
    for (std::uint32_t d = 0; d < rank; ++d) rec.shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>()));
    rec.values = r.floats(numel(rec.shape));
    if (!rec.buffer) ++param_count;
    ck.records.push_back(std::move(rec));
  }
  ck.has_optimizer = r.get<std::uint8_t>() == 1;
  if (ck.has_optimizer) {
    ck.optimizer.step = r.get<std::uint64_t>();
    ck.optimizer.config.lr = r.get<double>();
    ck.optimizer.config.beta1 = r.get<double>();
    ck.optimizer.config.beta2 = r.get<double>();
    ck.optimizer.config.eps = r.get<double>();
    for (std::size_t i = 0; i < param_count; ++i) {
      const auto n = static_cast<std::size_t>(r.get<std::uint64_t>());
      const auto m = r.floats(n);
      const auto v = r.floats(n);
      ck.optimizer.m.emplace_back(m.begin(), m.end());
      ck.optimizer.v.emplace_back(v.begin(), v.end());
    }
  }
  if (!r.at_end()) throw IoError("trailing bytes in checkpoint: " + path.string());
  return ck;
}

void apply_checkpoint(const Checkpoint& ckpt, ParameterSet& params, OptimizerState* optimizer) {
  std::map<std::string, const CheckpointRecord*> by_name;
  for (const auto& rec : ckpt.records) by_name[rec.name] = &rec;
  std::set<std::string> expected;
  for (const auto& p : params.parameters()) expected.insert(p.name);
  for (const auto& b : params.buffers()) expected.insert(b.name);

  std::string missing, extra;
  for (const auto& name : expected) {
    if (!by_name.count(name)) missing += (missing.empty() ? "" : ",") + name;
  }
  for (const auto& [name, rec] : by_name) {
    if (!expected.count(name)) extra += (extra.empty() ? "" : ",") + name;
  }
  if (!missing.empty() || !extra.empty()) {
    throw NameMismatch("checkpoint parameter names differ; missing [" + missing + "] unexpected [" + extra + "]");
  }

  for (const auto& p : params.parameters()) {
    const CheckpointRecord& rec = *by_name.at(p.name);
    if (rec.buffer || rec.shape != p.tensor.shape()) {
      throw NameMismatch("checkpoint record " + p.name + " has shape " + shape_string(rec.shape) + ", model expects " +
                         shape_string(p.tensor.shape()));
    }
  }
  for (const auto& b : params.buffers()) {
    const CheckpointRecord& rec = *by_name.at(b.name);
    if (!rec.buffer || rec.values.size() != b.values->size()) {
      throw NameMismatch("checkpoint buffer " + b.name + " does not match the model");
    }
  }
  for (const auto& p : params.parameters()) {
    const CheckpointRecord& rec = *by_name.at(p.name);
    Tensor t = p.tensor;
    std::copy(rec.values.begin(), rec.values.end(), t.values().begin());
  }
  for (const auto& b : params.buffers()) {
    const CheckpointRecord& rec = *by_name.at(b.name);
    std::copy(rec.values.begin(), rec.values.end(), b.values->begin());
  }
  if (optimizer && ckpt.has_optimizer) {
    // Moments were written in the saved parameter order; remap by name.
    std::vector<std::string> saved_order;
    for (const auto& rec : ckpt.records) {
      if (!rec.buffer) saved_order.push_back(rec.name);
    }
    std::map<std::string, std::size_t> saved_index;
    for (std::size_t i = 0; i < saved_order.size(); ++i) saved_index[saved_order[i]] = i;
    optimizer->config = ckpt.optimizer.config;
    optimizer->step = ckpt.optimizer.step;
    optimizer->m.clear();
    optimizer->v.clear();
    for (const auto& p : params.parameters()) {
      const std::size_t i = saved_index.at(p.name);
      optimizer->m.push_back(ckpt.optimizer.m[i]);
      optimizer->v.push_back(ckpt.optimizer.v[i]);
    }
  }
}

}  // namespace OCC3D_DIFF_NS
}  // namespace occ3d::diff
