#pragma once

#include <span>
#include <utility>

#include "dreg/geometry.hpp"
#include "dreg/mesh.hpp"

namespace dreg {

inline constexpr double kDefaultDscVoxelMm = 1.0;

struct MetricReport {
  double md_mm = 0.0;
  double hd_mm = 0.0;
  double mae_mm = 0.0;
  double dsc_percent = 0.0;
};

struct SurfaceDistance {
  double md_mm = 0.0;
  double hd_mm = 0.0;
};

// Bidirectional nearest-vertex distances: MD is their mean, HD their maximum.
SurfaceDistance metric_md_hd(std::span<const Vec3> pred, std::span<const Vec3> target);

// Mean Euclidean distance between corresponding vertices.
double metric_mae(std::span<const Vec3> pred, std::span<const Vec3> target);

// Dice overlap (percent) of the volumes enclosed by two watertight meshes.
double metric_dsc(const Mesh& pred, const Mesh& target, double voxel_mm = kDefaultDscVoxelMm);

// All four metrics for meshes sharing connectivity.
MetricReport evaluate_metrics(const Mesh& pred, const Mesh& target, double voxel_mm = kDefaultDscVoxelMm);

}  // namespace dreg
