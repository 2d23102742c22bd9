#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "dreg/geometry.hpp"

namespace dreg {

using Triangle = std::array<std::uint32_t, 3>;
using Edge = std::pair<std::uint32_t, std::uint32_t>;

inline constexpr std::size_t kMaxMeshVertices = 100000;

// Triangle surface (possibly several organs) plus optional non-surface bridge
// edges that only participate in graph propagation.
struct Mesh {
  std::vector<Vec3> vertices;
  std::vector<Triangle> triangles;
  std::vector<int> organ_id;
  std::vector<Edge> bridges;

  std::size_t size() const { return vertices.size(); }

  // Throws ValidationError on out-of-range or repeated triangle indices,
  // organ label length mismatch, or a vertex count outside [1, kMaxMeshVertices].
  void validate() const;

  // Sorted unique undirected edges (i < j) from triangles only.
  std::vector<Edge> surface_edges() const;
  // Surface edges plus bridges, sorted and deduplicated.
  std::vector<Edge> graph_edges() const;

  std::vector<std::vector<std::uint32_t>> surface_neighbors() const;
  std::vector<std::vector<std::uint32_t>> graph_neighbors() const;

  int organ_count() const;
  // Vertex indices belonging to `organ`, ascending.
  std::vector<std::uint32_t> organ_vertices(int organ) const;
  // Standalone copy of one organ: its vertices, triangles (reindexed), organ_id reset to 0.
  Mesh extract_organ(int organ) const;

  Mesh with_positions(std::vector<Vec3> positions) const;
};

// D̂^{-1/2} (A + I) D̂^{-1/2} over the mesh graph (surface edges and bridges).
struct GraphOperator {
  Eigen::SparseMatrix<double, Eigen::RowMajor> propagation;
  std::vector<int> degree;  // edge count, self-loop excluded
  std::vector<std::vector<std::uint32_t>> neighbor_lists;

  std::size_t size() const { return degree.size(); }
  Eigen::MatrixXd dense() const { return Eigen::MatrixXd(propagation); }
};

GraphOperator build_graph_operator(const Mesh& mesh);

// Uniform umbrella Laplacian over surface neighbors as a sparse n x n matrix,
// L = I - D^{-1} A. Rows of vertices without neighbors are zero.
Eigen::SparseMatrix<double, Eigen::RowMajor> laplacian_matrix(const Mesh& mesh);

// L(v_i) = sum_{j in N(i)} (v_i - v_j) / |N(i)|; zero for isolated vertices.
std::vector<Vec3> discrete_laplacian(const Mesh& mesh, std::span<const Vec3> positions);

// Affine map of an axis-aligned box onto [-1, 1]^3.
class CoordinateNormalizer {
 public:
  explicit CoordinateNormalizer(const Box& box);

  const Box& box() const { return box_; }
  Vec3 center() const { return center_; }
  Vec3 half_extent() const { return half_; }

  Vec3 normalize(const Vec3& p) const;
  Vec3 denormalize(const Vec3& q) const;

 private:
  Box box_;
  Vec3 center_;
  Vec3 half_;
};

struct NormalizedCoordinates {
  std::vector<Vec3> positions;
  CoordinateNormalizer transform;
};

NormalizedCoordinates normalize_coordinates(const Mesh& mesh, const Box& box);

inline constexpr int kDefaultBridgeCount = 8;

// Concatenates organ meshes (organ_id = input index) and adds, for every ordered
// organ pair, the k_bridge nearest cross-organ vertex pairs as bridge edges.
Mesh compose_multi_organ_graph(std::span<const Mesh> meshes, int k_bridge = kDefaultBridgeCount);

// Splits a multi-organ mesh into per-organ meshes and recomposes it with bridges.
Mesh compose_organs(const Mesh& mesh, int k_bridge = kDefaultBridgeCount);

// Wavefront OBJ: `v`/`f` records, 1-based triangle indices. Organ labels go to
// `<stem>.labels` next to the OBJ (one integer per line) when any label is nonzero.
Mesh load_obj(const std::filesystem::path& path);
void save_obj(const Mesh& mesh, const std::filesystem::path& path);
std::filesystem::path labels_path_for(const std::filesystem::path& obj_path);

}  // namespace dreg
