#pragma once

#include <cstdint>
#include <vector>

#include "dreg/geometry.hpp"
#include "dreg/mesh.hpp"

namespace dreg {

// Regular grid of voxel centers origin + (i, j, k) * voxel.
struct VoxelGrid {
  Vec3 origin;
  double voxel = 1.0;
  int nx = 0;
  int ny = 0;
  int nz = 0;

  std::size_t size() const { return static_cast<std::size_t>(nx) * ny * nz; }
  std::size_t index(int i, int j, int k) const { return (static_cast<std::size_t>(k) * ny + j) * nx + i; }

  // Grid covering `box` with half-voxel alignment to `voxel`-multiples of `anchor`.
  static VoxelGrid covering(const Box& box, double voxel, Vec3 anchor = {});
};

// Throws ValidationError unless every surface edge is shared by exactly two triangles.
void require_watertight(const Mesh& mesh);

// Inside/outside occupancy of each voxel center by ray parity along +z.
std::vector<std::uint8_t> voxelize(const Mesh& mesh, const VoxelGrid& grid);

}  // namespace dreg
