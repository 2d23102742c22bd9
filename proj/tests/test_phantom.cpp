#include <algorithm>
#include <fstream>
#include <map>
#include <set>

#include <gtest/gtest.h>

#include "dreg/error.hpp"
#include "dreg/metrics.hpp"
#include "dreg/phantom.hpp"
#include "dreg/rng.hpp"
#include "dreg/voxelize.hpp"
#include "test_util.hpp"

using namespace dreg;

TEST(PhantomMesh, SphereVertexCountInClinicalBand) {
  const Mesh m = generate_phantom_mesh(PhantomKind::sphere, 15, 0);
  EXPECT_EQ(m.size(), 482u);
  EXPECT_GE(m.size(), 400u);
  EXPECT_LE(m.size(), 500u);
  EXPECT_EQ(phantom_vertex_count(15), 482u);
}

TEST(PhantomMesh, EulerCharacteristicAndWatertight) {
  for (auto kind : {PhantomKind::sphere, PhantomKind::ellipsoid, PhantomKind::superellipsoid}) {
    for (int r : {7, 12, 31}) {
      const Mesh m = generate_phantom_mesh(kind, r, 4);
      const long v = static_cast<long>(m.size());
      const long e = static_cast<long>(m.surface_edges().size());
      const long f = static_cast<long>(m.triangles.size());
      EXPECT_EQ(v - e + f, 2) << to_string(kind) << " r=" << r;
      EXPECT_NO_THROW(require_watertight(m));
      EXPECT_EQ(m.size(), phantom_vertex_count(r));
    }
  }
  const Mesh ico = icosahedron();
  EXPECT_EQ(ico.size(), 12u);
  EXPECT_EQ(ico.triangles.size(), 20u);
  EXPECT_NO_THROW(require_watertight(ico));
}

TEST(PhantomMesh, OutwardWindingEnclosesPositiveVolume) {
  const Mesh m = generate_phantom_mesh(PhantomKind::superellipsoid, 10, 3);
  double vol = 0.0;
  for (const auto& t : m.triangles) {
    vol += dot(m.vertices[t[0]], cross(m.vertices[t[1]], m.vertices[t[2]])) / 6.0;
  }
  EXPECT_GT(vol, 0.0);
}

TEST(PhantomMesh, Deterministic) {
  const Mesh a = generate_phantom_mesh(PhantomKind::superellipsoid, 11, 77);
  const Mesh b = generate_phantom_mesh(PhantomKind::superellipsoid, 11, 77);
  EXPECT_EQ(a.vertices, b.vertices);
  EXPECT_EQ(a.triangles, b.triangles);
  const Mesh c = generate_phantom_mesh(PhantomKind::superellipsoid, 11, 78);
  EXPECT_NE(a.vertices, c.vertices);
}

TEST(PhantomMesh, ResolutionOutOfRangeThrows) {
  EXPECT_THROW(generate_phantom_mesh(PhantomKind::sphere, 6, 0), ValidationError);
  EXPECT_THROW(generate_phantom_mesh(PhantomKind::sphere, 32, 0), ValidationError);
  EXPECT_THROW(phantom_kind_from_string("cube"), ValidationError);
  EXPECT_EQ(phantom_kind_from_string("ellipsoid"), PhantomKind::ellipsoid);
}

TEST(Deformation, ZeroParamsGiveZeroField) {
  const Mesh m = generate_phantom_mesh(PhantomKind::ellipsoid, 8, 1);
  for (const auto& d : apply_synthetic_deformation(m, DeformationParams{}, 5)) EXPECT_EQ(d, (Vec3{0, 0, 0}));
}

TEST(Deformation, PureTranslation) {
  const Mesh m = generate_phantom_mesh(PhantomKind::ellipsoid, 8, 1);
  DeformationParams p;
  p.translation = {1.5, -2.0, 0.25};
  for (const auto& d : apply_synthetic_deformation(m, p, 5)) EXPECT_EQ(d, p.translation);
}

TEST(Deformation, ScaleAboutCentroid) {
  const Mesh m = generate_phantom_mesh(PhantomKind::superellipsoid, 8, 1);
  DeformationParams p;
  p.scale = {1.1, 1.1, 1.1};
  const auto d = apply_synthetic_deformation(m, p, 5);
  const Vec3 c = centroid(m.vertices);
  for (std::size_t i = 0; i < m.size(); ++i) {
    const Vec3 expected = (m.vertices[i] - c) * 0.1;
    EXPECT_LT(norm(d[i] - expected), 1e-12);
  }
}

TEST(Deformation, BoundEnforced) {
  const Mesh m = generate_phantom_mesh(PhantomKind::ellipsoid, 8, 1);
  DeformationParams p;
  p.translation = {25, 0, 0};
  EXPECT_THROW(apply_synthetic_deformation(m, p, 1), ValidationError);
  EXPECT_NO_THROW(apply_synthetic_deformation(m, p, 1, 30.0));
}

TEST(Sample, DisplacementsWithinConfiguredBound) {
  const SampleConfig cfg = SampleConfig::single_organ();
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Sample s = generate_sample(cfg, seed);
    for (const auto& d : s.displacements()) EXPECT_LE(norm(d), cfg.max_displacement_mm);
  }
}

TEST(Sample, TemplateAndTargetDiffer) {
  const SampleConfig cfg = SampleConfig::single_organ();
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Sample s = generate_sample(cfg, seed);
    EXPECT_GT(metric_md_hd(s.template_mesh.vertices, s.target).md_mm, 0.0);
  }
  SampleConfig still = cfg;
  still.translation_range_mm = {0, 0, 0};
  still.scale_range = 0.0;
  still.bend_range_mm = 0.0;
  const Sample s = generate_sample(still, 3);
  EXPECT_EQ(metric_md_hd(s.template_mesh.vertices, s.target).md_mm, 0.0);
}

TEST(Sample, StoredMapMatchesRerender) {
  const SampleConfig cfg = SampleConfig::coupled_two_organ();
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const Sample s = generate_sample(cfg, seed);
    EXPECT_EQ(render_displacement_map(cfg.camera(), s.template_mesh, s.displacements()), s.target_map);
    EXPECT_EQ(render_semantic_label(cfg.camera(), s.template_mesh), s.label);
  }
}

TEST(Sample, OrganPlacementShiftsEachOrganRigidly) {
  SampleConfig fixed = SampleConfig::coupled_two_organ();
  for (auto& o : fixed.organs) o.placement_mm = {};
  const SampleConfig placed = SampleConfig::coupled_two_organ();
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const Sample a = generate_sample(fixed, seed);
    const Sample b = generate_sample(placed, seed);
    ASSERT_EQ(a.template_mesh.size(), b.template_mesh.size());
    std::vector<Vec3> shift;
    for (int o = 0; o < 2; ++o) {
      const auto idx = a.template_mesh.organ_vertices(o);
      const Vec3 d = b.template_mesh.vertices[idx.front()] - a.template_mesh.vertices[idx.front()];
      for (auto i : idx) EXPECT_LT(norm(b.template_mesh.vertices[i] - a.template_mesh.vertices[i] - d), 1e-5);
      for (int k = 0; k < 3; ++k) EXPECT_LE(std::abs(d[k]), placed.organs[o].placement_mm[k] + 1e-5);
      shift.push_back(d);
    }
    EXPECT_GT(norm(shift[0] - shift[1]), 1e-3);
  }
}

TEST(Sample, JitterDisabledIsZero) {
  const SampleConfig cfg = SampleConfig::smoke();
  EXPECT_EQ(generate_sample(cfg, 4).jitter, (Vec3{0, 0, 0}));
}

TEST(Sample, JitterBoundOverManyDraws) {
  const double bound = 3.7;
  Rng rng(12);
  double largest = 0.0;
  for (int i = 0; i < 1000; ++i) largest = std::max(largest, norm(random_translation(rng, bound)));
  EXPECT_LE(largest, bound);
  EXPECT_GT(largest, 0.9 * bound);

  SampleConfig cfg = SampleConfig::smoke();
  cfg.jitter_max_mm = bound;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const Sample s = generate_sample(cfg, seed);
    EXPECT_LE(norm(s.jitter), bound + 1e-5);
    EXPECT_EQ(render_displacement_map(cfg.camera(), s.template_mesh, s.displacements()), s.target_map);
  }
}

TEST(Sample, FourOrgansHaveFourIds) {
  SampleConfig cfg = SampleConfig::single_organ();
  cfg.organs.clear();
  const Vec3 centers[4] = {{-14, -14, 0}, {14, -14, 0}, {-14, 14, 0}, {14, 14, 0}};
  for (int k = 0; k < 4; ++k) {
    OrganSpec o;
    o.kind = k % 2 ? PhantomKind::superellipsoid : PhantomKind::ellipsoid;
    o.resolution = 7;
    o.radii_mm = {8, 7, 7};
    o.center_mm = centers[k];
    cfg.organs.push_back(o);
  }
  const Sample s = generate_sample(cfg, 2);
  EXPECT_EQ(std::set<int>(s.template_mesh.organ_id.begin(), s.template_mesh.organ_id.end()),
            (std::set<int>{0, 1, 2, 3}));
  EXPECT_EQ(s.template_mesh.organ_count(), 4);
}

TEST(Sample, ImageInUnitRangeAndDeterministic) {
  const SampleConfig cfg = SampleConfig::single_organ();
  const Sample a = generate_sample(cfg, 9);
  const Sample b = generate_sample(cfg, 9);
  EXPECT_EQ(a.image, b.image);
  EXPECT_EQ(a.target, b.target);
  for (float v : a.image.pixels) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(Dataset, ManifestAndBoxAndReload) {
  test::TempDir dir("ds");
  const SampleConfig cfg = SampleConfig::smoke();
  const Dataset ds = generate_dataset(cfg, 7, 3, 42, dir.path());
  ASSERT_EQ(ds.manifest.at("samples").size(), 10u);
  EXPECT_EQ(ds.manifest.at("train_count").get<int>(), 7);
  EXPECT_EQ(ds.train().size(), 7u);
  EXPECT_EQ(ds.test().size(), 3u);

  for (const auto& s : ds.train()) {
    for (std::size_t i = 0; i < s.target.size(); ++i) {
      EXPECT_TRUE(ds.normalization_box.contains(s.target[i]));
      EXPECT_TRUE(ds.normalization_box.contains(s.template_mesh.vertices[i]));
    }
  }

  const Dataset back = load_dataset(dir.path());
  ASSERT_EQ(back.samples.size(), ds.samples.size());
  EXPECT_EQ(back.train_count, 7);
  EXPECT_EQ(back.camera, ds.camera);
  EXPECT_EQ(back.normalization_box.lo, ds.normalization_box.lo);
  EXPECT_EQ(back.normalization_box.hi, ds.normalization_box.hi);
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    EXPECT_EQ(back.samples[i].image, ds.samples[i].image);
    EXPECT_EQ(back.samples[i].label, ds.samples[i].label);
    EXPECT_EQ(back.samples[i].target_map, ds.samples[i].target_map);
    EXPECT_EQ(back.samples[i].target, ds.samples[i].target);
    EXPECT_EQ(back.samples[i].template_mesh.vertices, ds.samples[i].template_mesh.vertices);
    EXPECT_EQ(back.samples[i].template_mesh.triangles, ds.samples[i].template_mesh.triangles);
    // Reloaded ground truth re-renders to the stored map bit-exactly.
    EXPECT_EQ(render_displacement_map(back.camera, back.samples[i].template_mesh, back.samples[i].displacements()),
              back.samples[i].target_map);
  }
}

TEST(Dataset, RegenerationIsHashStable) {
  test::TempDir a("dsa");
  test::TempDir b("dsb");
  const SampleConfig cfg = SampleConfig::smoke();
  generate_dataset(cfg, 4, 2, 5, a.path());
  generate_dataset(cfg, 4, 2, 5, b.path());
  std::size_t files = 0;
  for (const auto& entry : std::filesystem::directory_iterator(a.path())) {
    const auto name = entry.path().filename();
    EXPECT_EQ(file_hash(entry.path()), file_hash(b.path() / name)) << name;
    ++files;
  }
  EXPECT_GE(files, 6u * 5u);
}

TEST(Dataset, StatisticsComeFromTrainingSplit) {
  const SampleConfig cfg = SampleConfig::smoke();
  const Dataset big = generate_dataset(cfg, 5, 6, 11);
  const Dataset small = generate_dataset(cfg, 5, 1, 11);
  EXPECT_EQ(big.config.drr_max, small.config.drr_max);
  EXPECT_EQ(big.normalization_box.lo, small.normalization_box.lo);
  EXPECT_EQ(big.mean_displacement_mm, small.mean_displacement_mm);
  EXPECT_EQ(big.samples[5].image, small.samples[5].image);
}

TEST(Dataset, MissingManifestThrows) {
  test::TempDir dir("dsmissing");
  EXPECT_THROW(load_dataset(dir.path()), ValidationError);
}

TEST(Dataset, CorruptManifestIsValidationError) {
  test::TempDir dir("dscorrupt");
  {
    std::ofstream out(dir / "manifest.json");
    out << "{\"format\": \"dreg-dataset-1\", \"samples\": 3";
  }
  EXPECT_THROW(load_dataset(dir.path()), ValidationError);
}
