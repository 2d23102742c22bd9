#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "dreg/geometry.hpp"
#include "dreg/mesh.hpp"

namespace dreg {

using DisplacementField = std::vector<Vec3>;

// Mean displacement plus orthonormal principal directions of the centered,
// flattened training fields. `stddev[k]` is the standard deviation of the
// training coefficients along component k.
struct StatModel {
  DisplacementField mean;
  std::vector<DisplacementField> components;
  std::vector<double> stddev;

  std::size_t vertex_count() const { return mean.size(); }
  std::size_t mode_count() const { return components.size(); }
};

StatModel fit_pca(std::span<const DisplacementField> fields);

// d = w0 * mean + sum_{k>=1} w_k * stddev_k * component_k. Weights beyond the
// available modes must be zero.
DisplacementField synthesize_displacement(const StatModel& model, std::span<const double> weights);

// Inverse of synthesize_displacement for w0 = 1: weights reproducing `field`'s
// projection onto the model subspace.
std::vector<double> project_field(const StatModel& model, std::span<const Vec3> field);

struct AugmentConfig {
  std::vector<double> weights{2.0, 1.0, 0.0};
  // Per call, draw w_k uniformly from [-weights[k], +weights[k]]; otherwise use weights as given.
  bool randomize = true;
};

struct AugmentedPair {
  Mesh deformed;                    // template with v_i - d_i
  std::vector<Vec3> target;         // the undeformed input vertices
  std::vector<double> weights;      // weights actually used
  DisplacementField displacement;   // d
};

AugmentedPair augment_pair(const Mesh& mesh, const StatModel& model, const AugmentConfig& config,
                           std::uint64_t seed);

void save_statmodel(const StatModel& model, const std::filesystem::path& path);
StatModel load_statmodel(const std::filesystem::path& path);

}  // namespace dreg
