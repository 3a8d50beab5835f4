#pragma once

#include "occ3d/scenegen.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

namespace occ3d {

struct DatasetIoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Layout:
//   <root>/dataset.txt                 config, intrinsics, split lists
//   <root>/samples/<id>/manifest.txt   family, split, albedo, shape tree, rigs
//   <root>/samples/<id>/view_<k>.ppm   8-bit binary RGB
//   <root>/samples/<id>/mask_<k>.pgm   8-bit binary mask (0 or 255)
//   <root>/samples/<id>/points.bin     n x 3 float64 then n x uint8, little endian
// Reals in text files use 17 significant digits.
void save_dataset(const Dataset& ds, const std::filesystem::path& root);
Dataset load_dataset(const std::filesystem::path& root);

// FNV-1a over the serialized form; equal datasets hash equal.
std::uint64_t dataset_hash(const Dataset& ds);
std::string hex_hash(std::uint64_t h);

std::string shape_to_string(const ShapeNode& node);
ShapeNode shape_from_string(const std::string& text);

std::string rig_to_string(const CameraRig& rig);
CameraRig rig_from_string(const std::string& text);

void write_ppm(const Image& img, const std::filesystem::path& path);
Image read_ppm(const std::filesystem::path& rgb_path, const std::filesystem::path& mask_path);

}  // namespace occ3d
