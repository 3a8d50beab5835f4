#pragma once

#include "occ3d/diffcore/layers.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace occ3d::diff {
inline namespace OCC3D_DIFF_NS {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimizerState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<std::vector<Real>> m;
  std::vector<std::vector<Real>> v;
};

// Bias-corrected Adam update over every parameter of the set. Throws
// MissingGrad if any parameter has no gradient buffer.
void adam_step(ParameterSet& params, OptimizerState& state);

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct VersionMismatch : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NameMismatch : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Checkpoint layout, little-endian:
//   "OCC3DCKP" u32 version
//   u32 meta_len, meta bytes (free-form text, e.g. the model config)
//   u32 record_count, then per record:
//     u32 name_len, name, u8 kind (0 parameter, 1 buffer), u32 rank,
//     u64 dims[rank], f32 values[prod(dims)]
//   u8 has_optimizer; if 1:
//     u64 step, f64 lr, beta1, beta2, eps, then per parameter in record
//     order: u64 n, f32 m[n], f32 v[n]
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointRecord {
  std::string name;
  bool buffer = false;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  std::string meta;
  std::vector<CheckpointRecord> records;
  bool has_optimizer = false;
  OptimizerState optimizer;
};

void save_checkpoint(const std::filesystem::path& path, const ParameterSet& params, const std::string& meta,
                     const OptimizerState* optimizer = nullptr);
Checkpoint read_checkpoint(const std::filesystem::path& path);
// Copies record values into the set. The name sets (and shapes) must match
// exactly, otherwise NameMismatch.
void apply_checkpoint(const Checkpoint& ckpt, ParameterSet& params, OptimizerState* optimizer = nullptr);

}  // namespace OCC3D_DIFF_NS
}  // namespace occ3d::diff
