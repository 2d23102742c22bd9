#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dreg/geometry.hpp"
#include "dreg/losses.hpp"
#include "dreg/mesh.hpp"
#include "dreg/projection.hpp"

namespace dreg {

enum class PhantomKind { sphere, ellipsoid, superellipsoid, icosahedron };

PhantomKind phantom_kind_from_string(const std::string& s);
std::string to_string(PhantomKind kind);

// Vertex count of a latitude/longitude phantom at `resolution`: 2r(r+1)+2.
std::size_t phantom_vertex_count(int resolution);

// Closed genus-0 triangle mesh of roughly unit size. Ellipsoid radii and the
// superellipsoid exponent vary with `seed`; the sphere does not. Resolution
// must give 100-2000 vertices (7..31). The icosahedron kind ignores both.
Mesh generate_phantom_mesh(PhantomKind kind, int resolution, std::uint64_t seed);

// Regular icosahedron with unit circumradius (12 vertices, 20 faces).
Mesh icosahedron();

struct DeformationParams {
  Vec3 translation;                // mm
  Vec3 scale{1.0, 1.0, 1.0};       // per axis, about the centroid
  double bend_amplitude = 0.0;     // mm, low-frequency sinusoid
};

inline constexpr double kDefaultMaxDisplacementMm = 20.0;

// Smooth field t + (s - 1) * (v - c) + sinusoidal bend with a seed-chosen phase.
// Throws ValidationError if any displacement exceeds max_displacement_mm.
std::vector<Vec3> apply_synthetic_deformation(const Mesh& mesh, const DeformationParams& params, std::uint64_t seed,
                                              double max_displacement_mm = kDefaultMaxDisplacementMm);

struct OrganSpec {
  PhantomKind kind = PhantomKind::ellipsoid;
  int resolution = 8;
  Vec3 radii_mm{18.0, 14.0, 12.0};
  Vec3 center_mm;
  double density = 1.0;  // added to background inside the organ; 0 = no image contrast
  Vec3 placement_mm;     // per-organ uniform placement range, independent of the other organs
};

struct SampleConfig {
  int image_size = 64;
  double pixel_mm = 1.5;
  double depth_extent_mm = 40.0;  // volume spans z in [-extent, +extent]
  std::vector<OrganSpec> organs{OrganSpec{}};
  Vec3 anatomy_offset_mm{4.0, 4.0, 1.0};  // per-sample uniform placement range
  double shape_variation = 0.1;           // relative radius range
  Vec3 translation_range_mm{3.0, 8.0, 1.5};
  double scale_range = 0.08;
  double bend_range_mm = 2.5;
  double max_displacement_mm = kDefaultMaxDisplacementMm;
  double background_density = 0.25;
  double jitter_max_mm = 0.0;  // 0 disables template jitter
  double drr_max = 0.0;        // image normalization; <= 0 uses the sample's own maximum

  static SampleConfig single_organ();
  // 16x16 images of a 12-vertex icosahedron, for gradient checks and smoke runs.
  static SampleConfig smoke();
  // One contrasted organ plus an adjacent organ without contrast, moving together.
  static SampleConfig coupled_two_organ();

  Camera camera() const;
  void validate() const;
  nlohmann::json to_json() const;
  static SampleConfig from_json(const nlohmann::json& j);
};

struct Sample {
  std::uint64_t seed = 0;
  Image image;
  SemanticLabel label;
  Mesh template_mesh;
  std::vector<Vec3> target;
  DisplacementMap target_map;
  Vec3 jitter;

  std::vector<Vec3> displacements() const;
  Mesh target_mesh() const { return template_mesh.with_positions(target); }
};

// Replaces the template (same connectivity) and re-renders label and map.
Sample with_template(const Sample& sample, const Camera& camera, std::vector<Vec3> positions);
// Rigid template translation modelling setup error.
Sample apply_jitter(const Sample& sample, const Camera& camera, const Vec3& jitter);

Sample generate_sample(const SampleConfig& config, std::uint64_t seed);

struct Dataset {
  std::filesystem::path root;
  nlohmann::json manifest;
  SampleConfig config;
  Camera camera;
  Box normalization_box;
  double mean_displacement_mm = 0.0;
  std::vector<Sample> samples;  // training split first
  int train_count = 0;

  int organ_count() const { return static_cast<int>(config.organs.size()); }
  std::span<const Sample> train() const { return std::span<const Sample>(samples).first(train_count); }
  std::span<const Sample> test() const { return std::span<const Sample>(samples).subspan(train_count); }
};

// Image normalization, the coordinate box and the mean displacement come from
// the training split. With a non-empty `dir`, writes `dir/manifest.json` plus
// img/lbl/map/target `.tns` and mesh `.obj` per sample.
Dataset generate_dataset(const SampleConfig& config, int n_train, int n_test, std::uint64_t seed,
                         const std::filesystem::path& dir = {});
Dataset load_dataset(const std::filesystem::path& dir);

// Initial-model loss maxima over a set of samples: zero map prediction and
// unmoved template.
LossCalibration identity_calibration(std::span<const Sample> samples);

}  // namespace dreg
