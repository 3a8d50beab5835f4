#include "occ3d/scenegen.hpp"

#include <algorithm>
#include <cstdio>
#include <exception>

namespace occ3d {

std::vector<std::string> DatasetConfig::violations() const {
  std::vector<std::string> v;
  if (seen_families.size() < 3) v.push_back("dataset.seen_families needs at least 3 families");
  if (unseen_families.empty()) v.push_back("dataset.unseen_families needs at least 1 family");
  auto known = [](const std::string& f) {
    return std::find(kSeenFamilies.begin(), kSeenFamilies.end(), f) != kSeenFamilies.end() ||
           std::find(kUnseenFamilies.begin(), kUnseenFamilies.end(), f) != kUnseenFamilies.end();
  };
  for (const auto* list : {&seen_families, &unseen_families}) {
    for (const auto& f : *list) {
      if (!known(f)) v.push_back("dataset: unknown family '" + f + "'");
    }
  }
  for (const auto& f : seen_families) {
    if (std::find(unseen_families.begin(), unseen_families.end(), f) != unseen_families.end()) {
      v.push_back("dataset: family '" + f + "' is both seen and unseen");
    }
  }
  if (train_per_family < 1) v.push_back("dataset.train_per_family must be at least 1");
  if (test_per_family < 0) v.push_back("dataset.test_per_family must be non-negative");
  if (image_size < 8) v.push_back("dataset.image_size must be at least 8");
  if (!(focal_ratio > 0.0)) v.push_back("dataset.focal_ratio must be positive");
  if (views_per_shape < 1) v.push_back("dataset.views_per_shape must be positive");
  if (pool_size < 1) v.push_back("dataset.pool_size must be positive");
  if (!(radius_min > kSceneBoundRadius) || radius_max < radius_min) {
    v.push_back("dataset: camera radius range must lie outside the scene bound");
  }
  return v;
}

void DatasetConfig::validate() const {
  const auto v = violations();
  if (v.empty()) return;
  std::string msg;
  for (const auto& s : v) msg += (msg.empty() ? "" : "; ") + s;
  throw ConfigError(msg);
}

bool Dataset::is_seen(const std::string& family) const {
  const auto& seen = config.seen_families;
  return std::find(seen.begin(), seen.end(), family) != seen.end();
}

Sample generate_sample(const DatasetConfig& config, const Intrinsics& k, const std::string& family,
                       std::size_t index, Split split) {
  Rng rng(mix_seed(config.seed, index));
  Sample s;
  char id[32];
  std::snprintf(id, sizeof id, "s%06zu", index);
  s.id = id;
  s.split = split;
  s.shape = random_shape(family, rng);
  for (int v = 0; v < config.views_per_shape; ++v) {
    s.rigs.push_back({k, sample_camera_pose(rng, config.radius_min, config.radius_max)});
  }
  for (const auto& rig : s.rigs) s.views.push_back(render_view(s.shape, rig));
  s.point_pool = sample_occupancy_points(s.shape, config.pool_size, mix_seed(rng(), index));
  return s;
}

Dataset generate_dataset(const DatasetConfig& config) {
  config.validate();
  Dataset ds;
  ds.config = config;
  ds.intrinsics = Intrinsics::centered(config.image_size, config.focal_ratio * config.image_size);

  struct Job {
    std::string family;
    Split split;
  };
  std::vector<Job> jobs;
  for (const auto& f : config.seen_families) {
    for (int i = 0; i < config.train_per_family; ++i) jobs.push_back({f, Split::Train});
  }
  std::vector<std::string> all = config.seen_families;
  all.insert(all.end(), config.unseen_families.begin(), config.unseen_families.end());
  for (const auto& f : all) {
    for (int i = 0; i < config.test_per_family; ++i) jobs.push_back({f, Split::Test});
  }

  ds.samples.resize(jobs.size());
  std::exception_ptr failure;
  // Each sample draws from its own stream, so shapes can be built in any order.
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(jobs.size()); ++i) {
    try {
      ds.samples[i] =
          generate_sample(config, ds.intrinsics, jobs[i].family, static_cast<std::size_t>(i), jobs[i].split);
    } catch (...) {
#pragma omp critical(occ3d_dataset_failure)
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    (ds.samples[i].split == Split::Train ? ds.train_indices : ds.test_indices).push_back(i);
  }
  return ds;
}

}  // namespace occ3d
