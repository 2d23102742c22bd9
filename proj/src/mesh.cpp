#include "dreg/mesh.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <tuple>

#include "dreg/error.hpp"

namespace dreg {

namespace {

Edge ordered(std::uint32_t a, std::uint32_t b) { return a < b ? Edge{a, b} : Edge{b, a}; }

std::vector<std::vector<std::uint32_t>> adjacency(std::size_t n, const std::vector<Edge>& edges) {
  std::vector<std::vector<std::uint32_t>> nbrs(n);
  for (const auto& [a, b] : edges) {
    nbrs[a].push_back(b);
    nbrs[b].push_back(a);
  }
  for (auto& list : nbrs) std::sort(list.begin(), list.end());
  return nbrs;
}

}  // namespace

void Mesh::validate() const {
  const std::size_t n = vertices.size();
  if (n == 0 || n > kMaxMeshVertices) {
    throw ValidationError("mesh vertex count " + std::to_string(n) + " outside [1, " +
                          std::to_string(kMaxMeshVertices) + "]");
  }
  if (!organ_id.empty() && organ_id.size() != n) {
    throw ValidationError("organ_id length does not match vertex count");
  }
  for (std::size_t t = 0; t < triangles.size(); ++t) {
    const auto& tri = triangles[t];
    for (auto idx : tri) {
      if (idx >= n) throw ValidationError("triangle " + std::to_string(t) + " index out of range");
    }
    if (tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2]) {
      throw ValidationError("triangle " + std::to_string(t) + " is degenerate");
    }
  }
  for (const auto& [a, b] : bridges) {
    if (a >= n || b >= n || a == b) throw ValidationError("invalid bridge edge");
  }
  for (const auto& v : vertices) {
    if (!is_finite(v)) throw ValidationError("non-finite vertex position");
  }
}

std::vector<Edge> Mesh::surface_edges() const {
  std::vector<Edge> edges;
  edges.reserve(triangles.size() * 3);
  for (const auto& t : triangles) {
    edges.push_back(ordered(t[0], t[1]));
    edges.push_back(ordered(t[1], t[2]));
    edges.push_back(ordered(t[2], t[0]));
  }
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  return edges;
}

std::vector<Edge> Mesh::graph_edges() const {
  auto edges = surface_edges();
  for (const auto& [a, b] : bridges) edges.push_back(ordered(a, b));
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  return edges;
}

std::vector<std::vector<std::uint32_t>> Mesh::surface_neighbors() const {
  return adjacency(vertices.size(), surface_edges());
}

std::vector<std::vector<std::uint32_t>> Mesh::graph_neighbors() const {
  return adjacency(vertices.size(), graph_edges());
}

int Mesh::organ_count() const {
  if (organ_id.empty()) return 1;
  return *std::max_element(organ_id.begin(), organ_id.end()) + 1;
}

std::vector<std::uint32_t> Mesh::organ_vertices(int organ) const {
  std::vector<std::uint32_t> out;
  for (std::uint32_t i = 0; i < vertices.size(); ++i) {
    const int id = organ_id.empty() ? 0 : organ_id[i];
    if (id == organ) out.push_back(i);
  }
  return out;
}

Mesh Mesh::extract_organ(int organ) const {
  const auto keep = organ_vertices(organ);
  if (keep.empty()) throw ValidationError("organ " + std::to_string(organ) + " has no vertices");
  std::vector<std::int64_t> remap(vertices.size(), -1);
  Mesh out;
  for (std::size_t k = 0; k < keep.size(); ++k) {
    remap[keep[k]] = static_cast<std::int64_t>(k);
    out.vertices.push_back(vertices[keep[k]]);
  }
  for (const auto& t : triangles) {
    if (remap[t[0]] < 0 || remap[t[1]] < 0 || remap[t[2]] < 0) continue;
    out.triangles.push_back({static_cast<std::uint32_t>(remap[t[0]]), static_cast<std::uint32_t>(remap[t[1]]),
                             static_cast<std::uint32_t>(remap[t[2]])});
  }
  out.organ_id.assign(out.vertices.size(), 0);
  return out;
}

Mesh Mesh::with_positions(std::vector<Vec3> positions) const {
  if (positions.size() != vertices.size()) throw ValidationError("position count does not match mesh");
  Mesh out = *this;
  out.vertices = std::move(positions);
  return out;
}

GraphOperator build_graph_operator(const Mesh& mesh) {
  mesh.validate();
  const std::size_t n = mesh.size();
  GraphOperator op;
  op.neighbor_lists = mesh.graph_neighbors();
  op.degree.resize(n);
  std::vector<double> inv_sqrt(n);
  for (std::size_t i = 0; i < n; ++i) {
    op.degree[i] = static_cast<int>(op.neighbor_lists[i].size());
    inv_sqrt[i] = 1.0 / std::sqrt(static_cast<double>(op.degree[i] + 1));
  }
  std::vector<Eigen::Triplet<double>> triplets;
  for (std::size_t i = 0; i < n; ++i) {
    triplets.emplace_back(i, i, inv_sqrt[i] * inv_sqrt[i]);
    for (auto j : op.neighbor_lists[i]) triplets.emplace_back(i, j, inv_sqrt[i] * inv_sqrt[j]);
  }
  op.propagation.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  op.propagation.setFromTriplets(triplets.begin(), triplets.end());
  op.propagation.makeCompressed();
  return op;
}

Eigen::SparseMatrix<double, Eigen::RowMajor> laplacian_matrix(const Mesh& mesh) {
  const auto nbrs = mesh.surface_neighbors();
  const std::size_t n = mesh.size();
  std::vector<Eigen::Triplet<double>> triplets;
  for (std::size_t i = 0; i < n; ++i) {
    if (nbrs[i].empty()) continue;
    const double w = 1.0 / static_cast<double>(nbrs[i].size());
    triplets.emplace_back(i, i, 1.0);
    for (auto j : nbrs[i]) triplets.emplace_back(i, j, -w);
  }
  Eigen::SparseMatrix<double, Eigen::RowMajor> lap(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  lap.setFromTriplets(triplets.begin(), triplets.end());
  lap.makeCompressed();
  return lap;
}

std::vector<Vec3> discrete_laplacian(const Mesh& mesh, std::span<const Vec3> positions) {
  if (positions.size() != mesh.size()) {
    throw ValidationError("laplacian: position count " + std::to_string(positions.size()) +
                          " != vertex count " + std::to_string(mesh.size()));
  }
  const auto nbrs = mesh.surface_neighbors();
  std::vector<Vec3> out(positions.size());
  for (std::size_t i = 0; i < positions.size(); ++i) {
    if (nbrs[i].empty()) continue;
    Vec3 acc;
    for (auto j : nbrs[i]) acc += positions[i] - positions[j];
    out[i] = acc / static_cast<double>(nbrs[i].size());
  }
  return out;
}

CoordinateNormalizer::CoordinateNormalizer(const Box& box) : box_(box) {
  for (int a = 0; a < 3; ++a) {
    const double extent = box.hi[a] - box.lo[a];
    if (!(extent > 0.0) || !std::isfinite(extent)) {
      throw ValidationError("normalization box has zero extent on axis " + std::to_string(a));
    }
  }
  center_ = box.center();
  half_ = box.extent() * 0.5;
}

Vec3 CoordinateNormalizer::normalize(const Vec3& p) const {
  return {(p.x - center_.x) / half_.x, (p.y - center_.y) / half_.y, (p.z - center_.z) / half_.z};
}

Vec3 CoordinateNormalizer::denormalize(const Vec3& q) const { return center_ + hadamard(q, half_); }

NormalizedCoordinates normalize_coordinates(const Mesh& mesh, const Box& box) {
  CoordinateNormalizer transform(box);
  std::vector<Vec3> out;
  out.reserve(mesh.size());
  for (const auto& v : mesh.vertices) out.push_back(transform.normalize(v));
  return {std::move(out), transform};
}

Mesh compose_multi_organ_graph(std::span<const Mesh> meshes, int k_bridge) {
  if (meshes.size() < 2) throw ValidationError("multi-organ composition requires at least 2 meshes");
  if (k_bridge < 1) throw ValidationError("k_bridge must be >= 1");
  Mesh out;
  std::vector<std::uint32_t> offsets;
  for (std::size_t m = 0; m < meshes.size(); ++m) {
    const auto& mesh = meshes[m];
    if (mesh.vertices.empty()) throw ValidationError("cannot compose an empty mesh");
    mesh.validate();
    const auto base = static_cast<std::uint32_t>(out.vertices.size());
    offsets.push_back(base);
    out.vertices.insert(out.vertices.end(), mesh.vertices.begin(), mesh.vertices.end());
    out.organ_id.insert(out.organ_id.end(), mesh.size(), static_cast<int>(m));
    for (const auto& t : mesh.triangles) out.triangles.push_back({t[0] + base, t[1] + base, t[2] + base});
    for (const auto& [a, b] : mesh.bridges) out.bridges.emplace_back(a + base, b + base);
  }
  std::set<Edge> bridges(out.bridges.begin(), out.bridges.end());
  for (std::size_t a = 0; a < meshes.size(); ++a) {
    for (std::size_t b = 0; b < meshes.size(); ++b) {
      if (a == b) continue;
      // (distance², i, j) ordering makes ties deterministic.
      std::vector<std::tuple<double, std::uint32_t, std::uint32_t>> pairs;
      pairs.reserve(meshes[a].size() * meshes[b].size());
      for (std::uint32_t i = 0; i < meshes[a].size(); ++i) {
        for (std::uint32_t j = 0; j < meshes[b].size(); ++j) {
          pairs.emplace_back(squared_norm(meshes[a].vertices[i] - meshes[b].vertices[j]), i + offsets[a],
                             j + offsets[b]);
        }
      }
      const auto k = std::min<std::size_t>(static_cast<std::size_t>(k_bridge), pairs.size());
      std::partial_sort(pairs.begin(), pairs.begin() + static_cast<std::ptrdiff_t>(k), pairs.end());
      for (std::size_t p = 0; p < k; ++p) {
        bridges.insert(ordered(std::get<1>(pairs[p]), std::get<2>(pairs[p])));
      }
    }
  }
  out.bridges.assign(bridges.begin(), bridges.end());
  return out;
}

Mesh compose_organs(const Mesh& mesh, int k_bridge) {
  std::vector<Mesh> parts;
  for (int o = 0; o < mesh.organ_count(); ++o) parts.push_back(mesh.extract_organ(o));
  return compose_multi_organ_graph(parts, k_bridge);
}

std::filesystem::path labels_path_for(const std::filesystem::path& obj_path) {
  auto p = obj_path;
  p.replace_extension(".labels");
  return p;
}

Mesh load_obj(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open OBJ file " + path.string());
  Mesh mesh;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ss(line);
    std::string tag;
    if (!(ss >> tag) || tag[0] == '#') continue;
    if (tag == "v") {
      Vec3 v;
      if (!(ss >> v.x >> v.y >> v.z)) throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": bad vertex");
      mesh.vertices.push_back(v);
    } else if (tag == "f") {
      std::vector<std::int64_t> idx;
      std::string tok;
      while (ss >> tok) {
        // Accept "i", "i/t", "i/t/n", "i//n".
        const auto slash = tok.find('/');
        const std::string head = tok.substr(0, slash);
        std::int64_t value = 0;
        const auto [ptr, ec] = std::from_chars(head.data(), head.data() + head.size(), value);
        if (ec != std::errc{} || ptr != head.data() + head.size()) {
          throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": bad face index");
        }
        idx.push_back(value);
      }
      if (idx.size() != 3) {
        throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": non-triangular face");
      }
      Triangle t{};
      for (int k = 0; k < 3; ++k) {
        const std::int64_t i = idx[k] < 0 ? static_cast<std::int64_t>(mesh.vertices.size()) + idx[k] : idx[k] - 1;
        if (i < 0) throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": face index out of range");
        t[k] = static_cast<std::uint32_t>(i);
      }
      mesh.triangles.push_back(t);
    }
  }
  mesh.organ_id.assign(mesh.vertices.size(), 0);
  const auto labels = labels_path_for(path);
  if (std::filesystem::exists(labels)) {
    std::ifstream lin(labels);
    std::vector<int> ids;
    int id = 0;
    while (lin >> id) ids.push_back(id);
    if (ids.size() != mesh.vertices.size()) throw ValidationError("label sidecar length mismatch: " + labels.string());
    mesh.organ_id = std::move(ids);
  }
  mesh.validate();
  return mesh;
}

namespace {

void append_double(std::string& out, double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  out.append(buf, res.ptr);
}

}  // namespace

void save_obj(const Mesh& mesh, const std::filesystem::path& path) {
  std::string text;
  text.reserve(mesh.size() * 48 + mesh.triangles.size() * 24);
  for (const auto& v : mesh.vertices) {
    text += "v ";
    append_double(text, v.x);
    text += ' ';
    append_double(text, v.y);
    text += ' ';
    append_double(text, v.z);
    text += '\n';
  }
  for (const auto& t : mesh.triangles) {
    text += "f " + std::to_string(t[0] + 1) + ' ' + std::to_string(t[1] + 1) + ' ' + std::to_string(t[2] + 1) + '\n';
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write OBJ file " + path.string());
  out << text;
  const bool labelled = std::any_of(mesh.organ_id.begin(), mesh.organ_id.end(), [](int id) { return id != 0; });
  const auto labels = labels_path_for(path);
  if (labelled) {
    std::ofstream lout(labels, std::ios::binary);
    if (!lout) throw IoError("cannot write label sidecar " + labels.string());
    for (int id : mesh.organ_id) lout << id << '\n';
  } else if (std::filesystem::exists(labels)) {
    std::filesystem::remove(labels);
  }
}

}  // namespace dreg
