#include "dreg/voxelize.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "coverage.hpp"
#include "dreg/error.hpp"

namespace dreg {

VoxelGrid VoxelGrid::covering(const Box& box, double voxel, Vec3 anchor) {
  if (!(voxel > 0.0)) throw ValidationError("voxel size must be positive");
  VoxelGrid grid;
  grid.voxel = voxel;
  int* n[3] = {&grid.nx, &grid.ny, &grid.nz};
  for (int a = 0; a < 3; ++a) {
    // Voxel centers sit at anchor + (m + 0.5) * voxel.
    const double first = std::floor((box.lo[a] - anchor[a]) / voxel);
    const double last = std::ceil((box.hi[a] - anchor[a]) / voxel);
    grid.origin[a] = anchor[a] + (first + 0.5) * voxel;
    *n[a] = std::max(1, static_cast<int>(last - first));
  }
  return grid;
}

void require_watertight(const Mesh& mesh) {
  std::map<Edge, int> uses;
  for (const auto& t : mesh.triangles) {
    for (int k = 0; k < 3; ++k) {
      auto a = t[k];
      auto b = t[(k + 1) % 3];
      if (a > b) std::swap(a, b);
      ++uses[{a, b}];
    }
  }
  if (uses.empty()) throw ValidationError("mesh has no triangles");
  for (const auto& [e, count] : uses) {
    if (count != 2) throw ValidationError("mesh is not watertight (open or non-manifold edge)");
  }
}

std::vector<std::uint8_t> voxelize(const Mesh& mesh, const VoxelGrid& grid) {
  using detail::P2;
  std::vector<std::uint8_t> occ(grid.size(), 0);
  // Crossing depths per (i, j) column.
  std::vector<std::vector<double>> hits(static_cast<std::size_t>(grid.nx) * grid.ny);
  for (const auto& tri : mesh.triangles) {
    const Vec3& a = mesh.vertices[tri[0]];
    const Vec3& b = mesh.vertices[tri[1]];
    const Vec3& c = mesh.vertices[tri[2]];
    // Work in grid index space for x/y.
    auto to2 = [&](const Vec3& p) { return P2{(p.x - grid.origin.x) / grid.voxel, (p.y - grid.origin.y) / grid.voxel}; };
    const detail::TriangleCoverage cov(tri, to2(a), to2(b), to2(c));
    if (cov.degenerate()) continue;
    const int i0 = std::max(0, static_cast<int>(std::ceil(cov.min_x())));
    const int i1 = std::min(grid.nx - 1, static_cast<int>(std::floor(cov.max_x())));
    const int j0 = std::max(0, static_cast<int>(std::ceil(cov.min_y())));
    const int j1 = std::min(grid.ny - 1, static_cast<int>(std::floor(cov.max_y())));
    for (int j = j0; j <= j1; ++j) {
      for (int i = i0; i <= i1; ++i) {
        std::array<double, 3> w;
        if (!cov.covers(P2{static_cast<double>(i), static_cast<double>(j)}, w)) continue;
        hits[static_cast<std::size_t>(j) * grid.nx + i].push_back(w[0] * a.z + w[1] * b.z + w[2] * c.z);
      }
    }
  }
  for (int j = 0; j < grid.ny; ++j) {
    for (int i = 0; i < grid.nx; ++i) {
      auto& zs = hits[static_cast<std::size_t>(j) * grid.nx + i];
      if (zs.size() < 2) continue;
      std::sort(zs.begin(), zs.end());
      for (int k = 0; k < grid.nz; ++k) {
        const double z = grid.origin.z + k * grid.voxel;
        const auto crossings = std::upper_bound(zs.begin(), zs.end(), z) - zs.begin();
        if (crossings % 2 == 1) occ[grid.index(i, j, k)] = 1;
      }
    }
  }
  return occ;
}

}  // namespace dreg
