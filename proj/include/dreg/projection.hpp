#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dreg/geometry.hpp"
#include "dreg/mesh.hpp"
#include "dreg/tensor_io.hpp"

namespace dreg {

// Continuous pixel coordinates place pixel (i, j)'s center at (i, j).
struct ProjectedPoint {
  double x = 0.0;
  double y = 0.0;
  double depth = 0.0;
  bool valid = true;
};

struct Camera {
  enum class Mode { orthographic, perspective };

  Mode mode = Mode::orthographic;
  int width = 64;
  int height = 64;
  Vec3 eye{0.0, 0.0, 0.0};      // image-plane center (orthographic) or center of projection
  Vec3 forward{0.0, 0.0, 1.0};  // view direction; depth grows along it
  Vec3 up{0.0, 1.0, 0.0};
  double pixel_mm = 1.0;        // orthographic: world millimeters per pixel
  double focal_px = 64.0;       // perspective: focal length in pixels

  static Camera orthographic(int width, int height, double pixel_mm, Vec3 eye = {}, Vec3 forward = {0, 0, 1},
                             Vec3 up = {0, 1, 0});
  static Camera perspective(int width, int height, double focal_px, Vec3 eye, Vec3 forward = {0, 0, 1},
                            Vec3 up = {0, 1, 0});

  void validate() const;

  Vec3 right_axis() const;
  Vec3 up_axis() const;
  Vec3 forward_axis() const;

  ProjectedPoint project(const Vec3& p) const;

  friend bool operator==(const Camera&, const Camera&) = default;
};

std::vector<ProjectedPoint> project_vertices(const Camera& camera, std::span<const Vec3> positions);

struct DisplacementMap {
  int width = 0;
  int height = 0;
  std::vector<float> data;  // channel-major: [c][y][x], c in {0,1,2}
  std::vector<std::uint8_t> mask;

  DisplacementMap() = default;
  DisplacementMap(int w, int h) : width(w), height(h), data(3u * w * h, 0.0f), mask(static_cast<std::size_t>(w) * h, 0) {}

  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
  float& at(int c, int x, int y) { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  float at(int c, int x, int y) const { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  std::size_t covered() const;

  friend bool operator==(const DisplacementMap&, const DisplacementMap&) = default;
};

struct SemanticLabel {
  int width = 0;
  int height = 0;
  std::vector<std::int32_t> labels;  // row-major, 0 = background, organ_id + 1 otherwise

  SemanticLabel() = default;
  SemanticLabel(int w, int h) : width(w), height(h), labels(static_cast<std::size_t>(w) * h, 0) {}
  std::int32_t at(int x, int y) const { return labels[static_cast<std::size_t>(y) * width + x]; }

  friend bool operator==(const SemanticLabel&, const SemanticLabel&) = default;
};

struct Image {
  int width = 0;
  int height = 0;
  std::vector<float> pixels;  // row-major

  Image() = default;
  Image(int w, int h) : width(w), height(h), pixels(static_cast<std::size_t>(w) * h, 0.0f) {}
  float& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  float at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }

  friend bool operator==(const Image&, const Image&) = default;
};

// Per-pixel front-most triangle with barycentric weights. tri = -1 marks background.
struct VisibilityBuffer {
  int width = 0;
  int height = 0;
  std::vector<std::int32_t> tri;
  std::vector<std::array<double, 3>> bary;
  std::vector<double> depth;
};

// Pixel centers strictly inside a triangle, or on an edge owned under the
// top-left rule, are covered. Equal depths resolve by the triangle's sorted
// vertex indices, so the result is independent of submission order.
VisibilityBuffer rasterize(const Camera& camera, std::span<const Vec3> positions, std::span<const Triangle> triangles);

DisplacementMap render_displacement_map(const Camera& camera, const Mesh& mesh, std::span<const Vec3> displacements);
SemanticLabel render_semantic_label(const Camera& camera, const Mesh& mesh);

// Density grid; voxel (i, j, k) center at origin + (i, j, k) * spacing.
struct Volume {
  int nx = 0;
  int ny = 0;
  int nz = 0;
  Vec3 origin;
  Vec3 spacing{1.0, 1.0, 1.0};
  std::vector<float> density;

  Volume() = default;
  Volume(int x, int y, int z, Vec3 o, Vec3 s)
      : nx(x), ny(y), nz(z), origin(o), spacing(s), density(static_cast<std::size_t>(x) * y * z, 0.0f) {}

  std::size_t index(int i, int j, int k) const { return (static_cast<std::size_t>(k) * ny + j) * nx + i; }
  float& at(int i, int j, int k) { return density[index(i, j, k)]; }
  float at(int i, int j, int k) const { return density[index(i, j, k)]; }
  Vec3 voxel_center(int i, int j, int k) const {
    return origin + Vec3{i * spacing.x, j * spacing.y, k * spacing.z};
  }
  double sample_trilinear(const Vec3& p) const;
};

// Additive line integral of density along each pixel ray (unnormalized).
Image render_drr(const Camera& camera, const Volume& volume);
// Divides by `max_value` and clamps to [0, 1]; max_value <= 0 leaves the image zero.
Image normalize_image(const Image& image, double max_value);

// Bilinear interpolation of the four surrounding pixel centers, clamped to the border.
struct BilinearTap {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  double w00 = 0, w10 = 0, w01 = 0, w11 = 0;
};
BilinearTap bilinear_tap(int width, int height, double x, double y);
Vec3 sample_bilinear(const DisplacementMap& map, double x, double y);

// Single-tensor conversions for the `.tns` formats.
StoredTensor to_stored(const Image& image);                // dims [H, W]
StoredTensor to_stored(const SemanticLabel& label);        // dims [H, W], labels as float
StoredTensor to_stored(const DisplacementMap& map);        // dims [4, H, W]: 3 channels + mask
StoredTensor to_stored(std::span<const Vec3> points);      // dims [n, 3]
Image image_from_stored(const StoredTensor& t);
SemanticLabel label_from_stored(const StoredTensor& t);
DisplacementMap map_from_stored(const StoredTensor& t);
std::vector<Vec3> points_from_stored(const StoredTensor& t);

}  // namespace dreg
