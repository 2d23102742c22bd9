#include "dreg/projection.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "coverage.hpp"
#include "dreg/error.hpp"

namespace dreg {

Camera Camera::orthographic(int width, int height, double pixel_mm, Vec3 eye, Vec3 forward, Vec3 up) {
  Camera c;
  c.mode = Mode::orthographic;
  c.width = width;
  c.height = height;
  c.pixel_mm = pixel_mm;
  c.eye = eye;
  c.forward = forward;
  c.up = up;
  c.validate();
  return c;
}

Camera Camera::perspective(int width, int height, double focal_px, Vec3 eye, Vec3 forward, Vec3 up) {
  Camera c;
  c.mode = Mode::perspective;
  c.width = width;
  c.height = height;
  c.focal_px = focal_px;
  c.eye = eye;
  c.forward = forward;
  c.up = up;
  c.validate();
  return c;
}

void Camera::validate() const {
  if (width < 16 || height < 16) throw ValidationError("camera image must be at least 16x16");
  if (mode == Mode::orthographic && !(pixel_mm > 0.0)) throw ValidationError("camera pixel_mm must be positive");
  if (mode == Mode::perspective && !(focal_px > 0.0)) throw ValidationError("camera focal_px must be positive");
  if (!(norm(forward) > 0.0) || !(norm(cross(up, forward)) > 1e-12 * norm(up) * norm(forward))) {
    throw ValidationError("camera forward/up must be nonzero and non-parallel");
  }
}

Vec3 Camera::forward_axis() const { return normalized(forward); }
Vec3 Camera::right_axis() const { return normalized(cross(up, forward)); }
Vec3 Camera::up_axis() const { return cross(forward_axis(), right_axis()); }

ProjectedPoint Camera::project(const Vec3& p) const {
  const Vec3 rel = p - eye;
  const double u = dot(rel, right_axis());
  const double v = dot(rel, up_axis());
  const double d = dot(rel, forward_axis());
  ProjectedPoint out;
  out.depth = d;
  if (mode == Mode::orthographic) {
    out.x = u / pixel_mm + 0.5 * width;
    out.y = v / pixel_mm + 0.5 * height;
  } else {
    out.valid = d > 0.0;
    const double inv = out.valid ? focal_px / d : 0.0;
    out.x = u * inv + 0.5 * width;
    out.y = v * inv + 0.5 * height;
  }
  return out;
}

std::vector<ProjectedPoint> project_vertices(const Camera& camera, std::span<const Vec3> positions) {
  camera.validate();
  std::vector<ProjectedPoint> out;
  out.reserve(positions.size());
  for (const auto& p : positions) out.push_back(camera.project(p));
  return out;
}

std::size_t DisplacementMap::covered() const {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

namespace {

using detail::P2;
using detail::TriangleCoverage;

struct DepthKey {
  double depth;
  Triangle sorted;
  bool operator<(const DepthKey& o) const {
    if (depth != o.depth) return depth < o.depth;
    return sorted < o.sorted;
  }
};

}  // namespace

VisibilityBuffer rasterize(const Camera& camera, std::span<const Vec3> positions, std::span<const Triangle> triangles) {
  camera.validate();
  VisibilityBuffer vb;
  vb.width = camera.width;
  vb.height = camera.height;
  const std::size_t npix = static_cast<std::size_t>(vb.width) * vb.height;
  vb.tri.assign(npix, -1);
  vb.bary.assign(npix, {0.0, 0.0, 0.0});
  vb.depth.assign(npix, std::numeric_limits<double>::infinity());
  std::vector<DepthKey> best(npix, DepthKey{std::numeric_limits<double>::infinity(), {}});

  const auto proj = project_vertices(camera, positions);
  const bool perspective = camera.mode == Camera::Mode::perspective;

  for (std::size_t t = 0; t < triangles.size(); ++t) {
    const auto& tri = triangles[t];
    const ProjectedPoint& q0 = proj[tri[0]];
    const ProjectedPoint& q1 = proj[tri[1]];
    const ProjectedPoint& q2 = proj[tri[2]];
    if (!q0.valid || !q1.valid || !q2.valid) continue;
    const TriangleCoverage cov(tri, P2{q0.x, q0.y}, P2{q1.x, q1.y}, P2{q2.x, q2.y});
    if (cov.degenerate()) continue;
    Triangle sorted = tri;
    std::sort(sorted.begin(), sorted.end());

    const int x_begin = std::max(0, static_cast<int>(std::ceil(cov.min_x())));
    const int x_end = std::min(vb.width - 1, static_cast<int>(std::floor(cov.max_x())));
    const int y_begin = std::max(0, static_cast<int>(std::ceil(cov.min_y())));
    const int y_end = std::min(vb.height - 1, static_cast<int>(std::floor(cov.max_y())));

    for (int y = y_begin; y <= y_end; ++y) {
      for (int x = x_begin; x <= x_end; ++x) {
        std::array<double, 3> b;
        if (!cov.covers(P2{static_cast<double>(x), static_cast<double>(y)}, b)) continue;
        double depth = 0.0;
        if (perspective) {
          const double inv = b[0] / q0.depth + b[1] / q1.depth + b[2] / q2.depth;
          depth = 1.0 / inv;
          b = {b[0] / q0.depth * depth, b[1] / q1.depth * depth, b[2] / q2.depth * depth};
        } else {
          depth = b[0] * q0.depth + b[1] * q1.depth + b[2] * q2.depth;
        }
        const std::size_t idx = static_cast<std::size_t>(y) * vb.width + x;
        const DepthKey key{depth, sorted};
        if (key < best[idx]) {
          best[idx] = key;
          vb.tri[idx] = static_cast<std::int32_t>(t);
          vb.bary[idx] = b;
          vb.depth[idx] = depth;
        }
      }
    }
  }
  return vb;
}

DisplacementMap render_displacement_map(const Camera& camera, const Mesh& mesh, std::span<const Vec3> displacements) {
  if (displacements.size() != mesh.size()) {
    throw ValidationError("displacement count " + std::to_string(displacements.size()) + " != vertex count " +
                          std::to_string(mesh.size()));
  }
  const auto vb = rasterize(camera, mesh.vertices, mesh.triangles);
  DisplacementMap map(camera.width, camera.height);
  for (int y = 0; y < map.height; ++y) {
    for (int x = 0; x < map.width; ++x) {
      const std::size_t idx = static_cast<std::size_t>(y) * map.width + x;
      const int t = vb.tri[idx];
      if (t < 0) continue;
      const auto& tri = mesh.triangles[static_cast<std::size_t>(t)];
      const auto& b = vb.bary[idx];
      const Vec3& d0 = displacements[tri[0]];
      // d0 + b1 (d1 - d0) + b2 (d2 - d0) reproduces constant fields exactly.
      const Vec3 d = d0 + (displacements[tri[1]] - d0) * b[1] + (displacements[tri[2]] - d0) * b[2];
      for (int c = 0; c < 3; ++c) map.at(c, x, y) = static_cast<float>(d[c]);
      map.mask[idx] = 1;
    }
  }
  return map;
}

SemanticLabel render_semantic_label(const Camera& camera, const Mesh& mesh) {
  const auto vb = rasterize(camera, mesh.vertices, mesh.triangles);
  SemanticLabel label(camera.width, camera.height);
  for (std::size_t idx = 0; idx < vb.tri.size(); ++idx) {
    const int t = vb.tri[idx];
    if (t < 0) continue;
    const auto v = mesh.triangles[static_cast<std::size_t>(t)][0];
    label.labels[idx] = (mesh.organ_id.empty() ? 0 : mesh.organ_id[v]) + 1;
  }
  return label;
}

double Volume::sample_trilinear(const Vec3& p) const {
  double f[3];
  int i0[3];
  int i1[3];
  const int n[3] = {nx, ny, nz};
  for (int a = 0; a < 3; ++a) {
    double g = (p[a] - origin[a]) / spacing[a];
    g = std::clamp(g, 0.0, static_cast<double>(n[a] - 1));
    i0[a] = static_cast<int>(std::floor(g));
    i1[a] = std::min(i0[a] + 1, n[a] - 1);
    f[a] = g - i0[a];
  }
  auto lerp = [](double a, double b, double t) { return a + (b - a) * t; };
  const double c00 = lerp(at(i0[0], i0[1], i0[2]), at(i1[0], i0[1], i0[2]), f[0]);
  const double c10 = lerp(at(i0[0], i1[1], i0[2]), at(i1[0], i1[1], i0[2]), f[0]);
  const double c01 = lerp(at(i0[0], i0[1], i1[2]), at(i1[0], i0[1], i1[2]), f[0]);
  const double c11 = lerp(at(i0[0], i1[1], i1[2]), at(i1[0], i1[1], i1[2]), f[0]);
  return lerp(lerp(c00, c10, f[1]), lerp(c01, c11, f[1]), f[2]);
}

Image render_drr(const Camera& camera, const Volume& volume) {
  camera.validate();
  if (volume.nx < 1 || volume.ny < 1 || volume.nz < 1 || !(volume.spacing.x > 0.0) || !(volume.spacing.y > 0.0) ||
      !(volume.spacing.z > 0.0)) {
    throw ValidationError("DRR volume has zero extent");
  }
  if (volume.density.size() != static_cast<std::size_t>(volume.nx) * volume.ny * volume.nz) {
    throw ValidationError("DRR volume density size mismatch");
  }
  const Vec3 lo = volume.origin - volume.spacing * 0.5;
  const Vec3 hi = volume.origin + Vec3{(volume.nx - 0.5) * volume.spacing.x, (volume.ny - 0.5) * volume.spacing.y,
                                       (volume.nz - 0.5) * volume.spacing.z};
  const double step = std::min({volume.spacing.x, volume.spacing.y, volume.spacing.z});
  const Vec3 right = camera.right_axis();
  const Vec3 up = camera.up_axis();
  const Vec3 fwd = camera.forward_axis();

  Image img(camera.width, camera.height);
  for (int y = 0; y < camera.height; ++y) {
    for (int x = 0; x < camera.width; ++x) {
      Vec3 origin;
      Vec3 dir;
      const double u = x - 0.5 * camera.width;
      const double v = y - 0.5 * camera.height;
      if (camera.mode == Camera::Mode::orthographic) {
        origin = camera.eye + right * (u * camera.pixel_mm) + up * (v * camera.pixel_mm);
        dir = fwd;
      } else {
        origin = camera.eye;
        dir = normalized(right * (u / camera.focal_px) + up * (v / camera.focal_px) + fwd);
      }
      // Slab intersection with the volume bounds.
      double t0 = -std::numeric_limits<double>::infinity();
      double t1 = std::numeric_limits<double>::infinity();
      bool hit = true;
      for (int a = 0; a < 3 && hit; ++a) {
        if (dir[a] == 0.0) {
          hit = origin[a] >= lo[a] && origin[a] <= hi[a];
          continue;
        }
        double ta = (lo[a] - origin[a]) / dir[a];
        double tb = (hi[a] - origin[a]) / dir[a];
        if (ta > tb) std::swap(ta, tb);
        t0 = std::max(t0, ta);
        t1 = std::min(t1, tb);
      }
      if (camera.mode == Camera::Mode::perspective) t0 = std::max(t0, 0.0);
      if (!hit || !(t1 > t0)) continue;
      const double length = t1 - t0;
      const auto count = std::max<long>(1, static_cast<long>(std::ceil(length / step - 1e-9)));
      const double ds = length / static_cast<double>(count);
      double acc = 0.0;
      for (long k = 0; k < count; ++k) {
        acc += volume.sample_trilinear(origin + dir * (t0 + (k + 0.5) * ds));
      }
      img.at(x, y) = static_cast<float>(acc * ds);
    }
  }
  return img;
}

Image normalize_image(const Image& image, double max_value) {
  Image out(image.width, image.height);
  if (!(max_value > 0.0)) return out;
  for (std::size_t i = 0; i < image.pixels.size(); ++i) {
    out.pixels[i] = static_cast<float>(std::clamp(image.pixels[i] / max_value, 0.0, 1.0));
  }
  return out;
}

BilinearTap bilinear_tap(int width, int height, double x, double y) {
  BilinearTap tap;
  const double cx = std::clamp(x, 0.0, static_cast<double>(width - 1));
  const double cy = std::clamp(y, 0.0, static_cast<double>(height - 1));
  tap.x0 = static_cast<int>(std::floor(cx));
  tap.y0 = static_cast<int>(std::floor(cy));
  tap.x1 = std::min(tap.x0 + 1, width - 1);
  tap.y1 = std::min(tap.y0 + 1, height - 1);
  const double fx = cx - tap.x0;
  const double fy = cy - tap.y0;
  tap.w00 = (1.0 - fx) * (1.0 - fy);
  tap.w10 = fx * (1.0 - fy);
  tap.w01 = (1.0 - fx) * fy;
  tap.w11 = fx * fy;
  return tap;
}

Vec3 sample_bilinear(const DisplacementMap& map, double x, double y) {
  const auto tap = bilinear_tap(map.width, map.height, x, y);
  Vec3 out;
  for (int c = 0; c < 3; ++c) {
    out[c] = tap.w00 * map.at(c, tap.x0, tap.y0) + tap.w10 * map.at(c, tap.x1, tap.y0) +
             tap.w01 * map.at(c, tap.x0, tap.y1) + tap.w11 * map.at(c, tap.x1, tap.y1);
  }
  return out;
}

StoredTensor to_stored(const Image& image) {
  return {{static_cast<std::uint32_t>(image.height), static_cast<std::uint32_t>(image.width)}, image.pixels};
}

StoredTensor to_stored(const SemanticLabel& label) {
  StoredTensor t{{static_cast<std::uint32_t>(label.height), static_cast<std::uint32_t>(label.width)}, {}};
  t.data.assign(label.labels.begin(), label.labels.end());
  return t;
}

StoredTensor to_stored(const DisplacementMap& map) {
  StoredTensor t{{4u, static_cast<std::uint32_t>(map.height), static_cast<std::uint32_t>(map.width)}, map.data};
  t.data.insert(t.data.end(), map.mask.begin(), map.mask.end());
  return t;
}

StoredTensor to_stored(std::span<const Vec3> points) {
  StoredTensor t{{static_cast<std::uint32_t>(points.size()), 3u}, {}};
  t.data.reserve(points.size() * 3);
  for (const auto& p : points) {
    t.data.push_back(static_cast<float>(p.x));
    t.data.push_back(static_cast<float>(p.y));
    t.data.push_back(static_cast<float>(p.z));
  }
  return t;
}

Image image_from_stored(const StoredTensor& t) {
  if (t.dims.size() != 2) throw ValidationError("image tensor must be rank 2");
  Image img(static_cast<int>(t.dims[1]), static_cast<int>(t.dims[0]));
  img.pixels = t.data;
  return img;
}

SemanticLabel label_from_stored(const StoredTensor& t) {
  if (t.dims.size() != 2) throw ValidationError("label tensor must be rank 2");
  SemanticLabel label(static_cast<int>(t.dims[1]), static_cast<int>(t.dims[0]));
  for (std::size_t i = 0; i < t.data.size(); ++i) label.labels[i] = static_cast<std::int32_t>(t.data[i]);
  return label;
}

DisplacementMap map_from_stored(const StoredTensor& t) {
  if (t.dims.size() != 3 || t.dims[0] != 4) throw ValidationError("displacement map tensor must be [4, H, W]");
  DisplacementMap map(static_cast<int>(t.dims[2]), static_cast<int>(t.dims[1]));
  const std::size_t n = map.pixel_count();
  std::copy(t.data.begin(), t.data.begin() + static_cast<std::ptrdiff_t>(3 * n), map.data.begin());
  for (std::size_t i = 0; i < n; ++i) map.mask[i] = t.data[3 * n + i] != 0.0f ? 1 : 0;
  return map;
}

std::vector<Vec3> points_from_stored(const StoredTensor& t) {
  if (t.dims.size() != 2 || t.dims[1] != 3) throw ValidationError("point tensor must be [n, 3]");
  std::vector<Vec3> out(t.dims[0]);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = {t.data[3 * i], t.data[3 * i + 1], t.data[3 * i + 2]};
  return out;
}

}  // namespace dreg
