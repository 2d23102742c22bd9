#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "dreg/error.hpp"
#include "dreg/phantom.hpp"
#include "dreg/projection.hpp"
#include "dreg/tensor_io.hpp"
#include "test_util.hpp"

using namespace dreg;

namespace {

Camera ortho16() { return Camera::orthographic(16, 16, 1.0); }

Mesh flat_triangle(Vec3 a, Vec3 b, Vec3 c, int organ = 0) {
  Mesh m;
  m.vertices = {a, b, c};
  m.triangles = {{0, 1, 2}};
  m.organ_id.assign(3, organ);
  return m;
}

Mesh concat(const Mesh& a, const Mesh& b) {
  Mesh m = a;
  const auto off = static_cast<std::uint32_t>(a.size());
  m.vertices.insert(m.vertices.end(), b.vertices.begin(), b.vertices.end());
  m.organ_id.insert(m.organ_id.end(), b.organ_id.begin(), b.organ_id.end());
  for (auto t : b.triangles) m.triangles.push_back({t[0] + off, t[1] + off, t[2] + off});
  return m;
}

// Strict containment of (px, py) in a 2D triangle, either winding.
bool strictly_inside(double px, double py, const ProjectedPoint& a, const ProjectedPoint& b, const ProjectedPoint& c) {
  auto edge = [&](const ProjectedPoint& p, const ProjectedPoint& q) {
    return (q.x - p.x) * (py - p.y) - (q.y - p.y) * (px - p.x);
  };
  const double e0 = edge(a, b);
  const double e1 = edge(b, c);
  const double e2 = edge(c, a);
  return (e0 > 0 && e1 > 0 && e2 > 0) || (e0 < 0 && e1 < 0 && e2 < 0);
}

}  // namespace

TEST(Camera, OrthographicCenter) {
  const auto p = ortho16().project({0, 0, 5});
  EXPECT_DOUBLE_EQ(p.x, 8.0);
  EXPECT_DOUBLE_EQ(p.y, 8.0);
  EXPECT_DOUBLE_EQ(p.depth, 5.0);
  EXPECT_TRUE(p.valid);
}

TEST(Camera, OrthographicIgnoresDepthLaterally) {
  const Camera cam = Camera::orthographic(32, 32, 1.5);
  const std::vector<Vec3> pts{{3, -4, -7}, {3, -4, 11}};
  const auto pr = project_vertices(cam, pts);
  EXPECT_EQ(pr[0].x, pr[1].x);
  EXPECT_EQ(pr[0].y, pr[1].y);
  EXPECT_LT(pr[0].depth, pr[1].depth);
  EXPECT_DOUBLE_EQ(pr[0].x, 16.0 + 2.0);
  EXPECT_DOUBLE_EQ(pr[0].y, 16.0 - 4.0 / 1.5);
}

TEST(Camera, PerspectiveSimilarTriangles) {
  const Camera cam = Camera::perspective(64, 64, 50.0, {0, 0, 0});
  const auto near = cam.project({10, 4, 50});
  const auto far = cam.project({10, 4, 100});
  EXPECT_NEAR(far.x - 32.0, 0.5 * (near.x - 32.0), 1e-12);
  EXPECT_NEAR(far.y - 32.0, 0.5 * (near.y - 32.0), 1e-12);
}

TEST(Camera, PerspectiveBehindIsFlagged) {
  const Camera cam = Camera::perspective(64, 64, 50.0, {0, 0, 0});
  EXPECT_FALSE(cam.project({1, 1, -3}).valid);
}

TEST(Camera, InvalidCameraThrows) {
  Camera cam = ortho16();
  cam.up = {0, 0, 1};
  EXPECT_THROW(cam.validate(), ValidationError);
  cam = ortho16();
  cam.pixel_mm = 0.0;
  EXPECT_THROW(cam.validate(), ValidationError);
}

TEST(DisplacementMapRender, ConstantDisplacementEverywhereCovered) {
  const Mesh m = flat_triangle({-6.3, -5.1, 0}, {6.7, -4.2, 0}, {0.4, 6.9, 0});
  const std::vector<Vec3> d(3, Vec3{1, 2, 3});
  const auto map = render_displacement_map(ortho16(), m, d);
  ASSERT_GT(map.covered(), 20u);
  for (int y = 0; y < 16; ++y) {
    for (int x = 0; x < 16; ++x) {
      if (map.mask[y * 16 + x]) {
        EXPECT_EQ(map.at(0, x, y), 1.0f);
        EXPECT_EQ(map.at(1, x, y), 2.0f);
        EXPECT_EQ(map.at(2, x, y), 3.0f);
      } else {
        EXPECT_EQ(map.at(0, x, y), 0.0f);
        EXPECT_EQ(map.at(1, x, y), 0.0f);
        EXPECT_EQ(map.at(2, x, y), 0.0f);
      }
    }
  }
}

TEST(DisplacementMapRender, ConstantOnPhantomSurface) {
  const SampleConfig cfg = SampleConfig::single_organ();
  const Sample s = generate_sample(cfg, 5);
  const std::vector<Vec3> d(s.template_mesh.size(), Vec3{-0.5, 0.25, 4.0});
  const auto map = render_displacement_map(cfg.camera(), s.template_mesh, d);
  ASSERT_GT(map.covered(), 100u);
  for (std::size_t p = 0; p < map.pixel_count(); ++p) {
    if (!map.mask[p]) continue;
    EXPECT_EQ(map.data[p], -0.5f);
    EXPECT_EQ(map.data[map.pixel_count() + p], 0.25f);
    EXPECT_EQ(map.data[2 * map.pixel_count() + p], 4.0f);
  }
}

TEST(DisplacementMapRender, NearerTriangleWins) {
  const Mesh nearer = flat_triangle({-7.3, -7.1, 1}, {7.2, -6.6, 1}, {-6.9, 7.4, 1});
  const Mesh farther = flat_triangle({-3.3, -5.2, 4}, {7.6, 6.8, 4}, {-7.7, 7.1, 4});
  const Mesh m = concat(farther, nearer);
  std::vector<Vec3> d{{2, 2, 2}, {2, 2, 2}, {2, 2, 2}, {1, 1, 1}, {1, 1, 1}, {1, 1, 1}};
  const Camera cam = ortho16();
  const auto map = render_displacement_map(cam, m, d);
  const auto pn = project_vertices(cam, nearer.vertices);
  const auto pf = project_vertices(cam, farther.vertices);
  int overlap = 0;
  for (int y = 0; y < 16; ++y) {
    for (int x = 0; x < 16; ++x) {
      const bool in_near = strictly_inside(x, y, pn[0], pn[1], pn[2]);
      const bool in_far = strictly_inside(x, y, pf[0], pf[1], pf[2]);
      if (in_near) {
        EXPECT_EQ(map.at(0, x, y), 1.0f);
        overlap += in_far;
      } else if (in_far) {
        EXPECT_EQ(map.at(0, x, y), 2.0f);
      } else {
        EXPECT_EQ(map.mask[y * 16 + x], 0);
      }
    }
  }
  EXPECT_GT(overlap, 5);
}

TEST(DisplacementMapRender, LengthMismatchThrows) {
  const Mesh m = flat_triangle({0, 0, 0}, {1, 0, 0}, {0, 1, 0});
  const std::vector<Vec3> d(2);
  EXPECT_THROW(render_displacement_map(ortho16(), m, d), ValidationError);
}

TEST(Rasterize, PainterOracleOnRandomTriangles) {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> lateral(-9.0, 9.0);
  const Camera cam = ortho16();
  Mesh m;
  for (int t = 0; t < 12; ++t) {
    const double z = 1.0 + t * 0.731;
    m = concat(m, flat_triangle({lateral(rng), lateral(rng), z}, {lateral(rng), lateral(rng), z},
                                {lateral(rng), lateral(rng), z}));
  }
  const auto vb = rasterize(cam, m.vertices, m.triangles);
  const auto pr = project_vertices(cam, m.vertices);
  for (int y = 0; y < 16; ++y) {
    for (int x = 0; x < 16; ++x) {
      int best = -1;
      double best_depth = 1e300;
      for (std::size_t t = 0; t < m.triangles.size(); ++t) {
        const auto& tri = m.triangles[t];
        if (!strictly_inside(x, y, pr[tri[0]], pr[tri[1]], pr[tri[2]])) continue;
        if (pr[tri[0]].depth < best_depth) {
          best_depth = pr[tri[0]].depth;
          best = static_cast<int>(t);
        }
      }
      EXPECT_EQ(vb.tri[y * 16 + x], best) << x << "," << y;
    }
  }
}

TEST(Rasterize, SubmissionOrderInvariant) {
  const SampleConfig cfg = SampleConfig::coupled_two_organ();
  const Sample s = generate_sample(cfg, 3);
  const Mesh& m = s.template_mesh;
  const Camera cam = cfg.camera();
  const auto ref = render_semantic_label(cam, m);
  const auto ref_map = render_displacement_map(cam, m, s.displacements());

  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 5; ++trial) {
    Mesh shuffled = m;
    std::shuffle(shuffled.triangles.begin(), shuffled.triangles.end(), rng);
    EXPECT_EQ(render_semantic_label(cam, shuffled), ref);
    EXPECT_EQ(render_displacement_map(cam, shuffled, s.displacements()), ref_map);
  }
}

TEST(Rasterize, SharedEdgeCoveredExactlyOnce) {
  // Two triangles sharing a diagonal through pixel centers; each pixel is owned once.
  const Camera cam = ortho16();
  Mesh m;
  m.vertices = {{-6, -6, 1}, {6, -6, 1}, {6, 6, 1}, {-6, 6, 1}};
  m.triangles = {{0, 1, 2}, {0, 2, 3}};
  m.organ_id.assign(4, 0);
  const auto vb = rasterize(cam, m.vertices, m.triangles);
  Mesh a = m;
  a.triangles = {{0, 1, 2}};
  Mesh b = m;
  b.triangles = {{0, 2, 3}};
  const auto va = rasterize(cam, a.vertices, a.triangles);
  const auto vbb = rasterize(cam, b.vertices, b.triangles);
  for (std::size_t p = 0; p < vb.tri.size(); ++p) {
    const int count = (va.tri[p] >= 0) + (vbb.tri[p] >= 0);
    EXPECT_LE(count, 1) << p;
    EXPECT_EQ(vb.tri[p] >= 0, count == 1);
  }
}

TEST(SemanticLabel, HalfImageCoverage) {
  const Camera cam = ortho16();
  // Projected x in [-0.5, 7.5): columns 0..7.
  Mesh m;
  m.vertices = {{-8.5, -8.5, 2}, {-0.5, -8.5, 2}, {-0.5, 8.5, 2}, {-8.5, 8.5, 2}};
  m.triangles = {{0, 1, 2}, {0, 2, 3}};
  m.organ_id.assign(4, 0);
  const auto label = render_semantic_label(cam, m);
  int ones = 0;
  for (int y = 0; y < 16; ++y) {
    for (int x = 0; x < 16; ++x) {
      EXPECT_EQ(label.at(x, y), x < 8 ? 1 : 0) << x << "," << y;
      ones += label.at(x, y) == 1;
    }
  }
  EXPECT_EQ(ones, 128);
}

TEST(SemanticLabel, EmptyMeshIsBackground) {
  const auto label = render_semantic_label(ortho16(), Mesh{});
  EXPECT_TRUE(std::all_of(label.labels.begin(), label.labels.end(), [](int v) { return v == 0; }));
}

TEST(SemanticLabel, NearerOrganWins) {
  const Mesh far = flat_triangle({-7.3, -7.1, 5}, {7.2, -6.6, 5}, {-6.9, 7.4, 5}, 0);
  const Mesh near = flat_triangle({-3.3, -5.2, 2}, {7.6, 6.8, 2}, {-7.7, 7.1, 2}, 1);
  const Camera cam = ortho16();
  const auto label = render_semantic_label(cam, concat(far, near));
  const auto pn = project_vertices(cam, near.vertices);
  const auto pf = project_vertices(cam, far.vertices);
  for (int y = 0; y < 16; ++y) {
    for (int x = 0; x < 16; ++x) {
      if (strictly_inside(x, y, pn[0], pn[1], pn[2])) {
        EXPECT_EQ(label.at(x, y), 2);
      } else if (strictly_inside(x, y, pf[0], pf[1], pf[2])) {
        EXPECT_EQ(label.at(x, y), 1);
      }
    }
  }
}

TEST(SemanticLabel, InteriorCentroidsCarryOrganLabel) {
  const SampleConfig cfg = SampleConfig::coupled_two_organ();
  const Sample s = generate_sample(cfg, 8);
  const Camera cam = cfg.camera();
  const Mesh& m = s.template_mesh;
  const auto label = render_semantic_label(cam, m);
  const auto vb = rasterize(cam, m.vertices, m.triangles);
  const auto pr = project_vertices(cam, m.vertices);
  int checked = 0;
  for (std::size_t t = 0; t < m.triangles.size(); ++t) {
    const auto& tri = m.triangles[t];
    const double cx = (pr[tri[0]].x + pr[tri[1]].x + pr[tri[2]].x) / 3.0;
    const double cy = (pr[tri[0]].y + pr[tri[1]].y + pr[tri[2]].y) / 3.0;
    const int px = static_cast<int>(std::lround(cx));
    const int py = static_cast<int>(std::lround(cy));
    if (px < 0 || py < 0 || px >= cam.width || py >= cam.height) continue;
    // Only pixels this triangle actually owns in the visibility buffer.
    if (vb.tri[static_cast<std::size_t>(py) * cam.width + px] != static_cast<int>(t)) continue;
    EXPECT_EQ(label.at(px, py), m.organ_id[tri[0]] + 1);
    ++checked;
  }
  EXPECT_GT(checked, 20);
}

TEST(Drr, EmptyVolumeIsZero) {
  const Volume vol(16, 16, 8, {-8, -8, -4}, {1, 1, 1});
  const Image img = render_drr(ortho16(), vol);
  EXPECT_TRUE(std::all_of(img.pixels.begin(), img.pixels.end(), [](float v) { return v == 0.0f; }));
}

TEST(Drr, UniformSlabIntegratesDensityTimesThickness) {
  const double rho = 0.7;
  const int nz = 10;
  const double sz = 1.5;
  Volume vol(16, 16, nz, {-7.5, -7.5, -6.0}, {1, 1, sz});
  std::fill(vol.density.begin(), vol.density.end(), static_cast<float>(rho));
  const Image img = render_drr(ortho16(), vol);
  const double t = nz * sz;
  for (int y = 2; y < 14; ++y)
    for (int x = 2; x < 14; ++x) EXPECT_NEAR(img.at(x, y), rho * t, 1e-5 * rho * t);
}

TEST(Drr, StackedBoxesAdd) {
  Volume a(16, 16, 12, {-7.5, -7.5, -6}, {1, 1, 1});
  Volume b = a;
  Volume sum = a;
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (int k = 0; k < 12; ++k) {
    for (int j = 0; j < 16; ++j) {
      for (int i = 0; i < 16; ++i) {
        if (k < 6) a.at(i, j, k) = u(rng);
        else b.at(i, j, k) = u(rng);
        sum.at(i, j, k) = a.at(i, j, k) + b.at(i, j, k);
      }
    }
  }
  const Camera cam = ortho16();
  const Image ia = render_drr(cam, a);
  const Image ib = render_drr(cam, b);
  const Image is = render_drr(cam, sum);
  for (std::size_t p = 0; p < is.pixels.size(); ++p) EXPECT_NEAR(is.pixels[p], ia.pixels[p] + ib.pixels[p], 1e-5);
}

TEST(Drr, ZeroExtentThrows) {
  Volume vol(16, 16, 0, {}, {1, 1, 1});
  EXPECT_THROW(render_drr(ortho16(), vol), ValidationError);
}

TEST(Drr, NormalizeClampsToUnitRange) {
  Image img(16, 16);
  img.at(0, 0) = 4.0f;
  img.at(1, 0) = 2.0f;
  const Image n = normalize_image(img, 2.0);
  EXPECT_EQ(n.at(0, 0), 1.0f);
  EXPECT_EQ(n.at(1, 0), 1.0f);
  EXPECT_EQ(n.at(2, 0), 0.0f);
  EXPECT_EQ(normalize_image(img, 4.0).at(1, 0), 0.5f);
}

TEST(Bilinear, PixelCenterAndMidpoint) {
  DisplacementMap map(16, 16);
  map.at(0, 3, 4) = 2.0f;
  map.at(0, 4, 4) = 6.0f;
  map.at(1, 3, 4) = -1.0f;
  EXPECT_EQ(sample_bilinear(map, 3, 4), (Vec3{2, -1, 0}));
  EXPECT_DOUBLE_EQ(sample_bilinear(map, 3.5, 4).x, 4.0);
  EXPECT_DOUBLE_EQ(sample_bilinear(map, 3.5, 4).y, -0.5);
}

TEST(Bilinear, ClampsOutsideBorder) {
  DisplacementMap map(16, 16);
  for (int y = 0; y < 16; ++y) map.at(2, 15, y) = static_cast<float>(y);
  EXPECT_DOUBLE_EQ(sample_bilinear(map, 25.0, 7.0).z, 7.0);
  EXPECT_DOUBLE_EQ(sample_bilinear(map, 25.0, -10.0).z, 0.0);
}

TEST(Bilinear, ExactOnLinearMaps) {
  const double alpha = 0.37;
  const double beta = -1.21;
  DisplacementMap map(32, 24);
  for (int y = 0; y < 24; ++y)
    for (int x = 0; x < 32; ++x)
      for (int c = 0; c < 3; ++c) map.at(c, x, y) = static_cast<float>((c + 1) * (alpha * x + beta * y));
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> ux(0.0, 31.0);
  std::uniform_real_distribution<double> uy(0.0, 23.0);
  for (int i = 0; i < 500; ++i) {
    const double x = ux(rng);
    const double y = uy(rng);
    const Vec3 v = sample_bilinear(map, x, y);
    for (int c = 0; c < 3; ++c) EXPECT_NEAR(v[c], (c + 1) * (alpha * x + beta * y), 1e-5 * (c + 1) * 40);
  }
}

TEST(Bilinear, WeightsSumToOne) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(-5.0, 25.0);
  for (int i = 0; i < 200; ++i) {
    const auto tap = bilinear_tap(16, 16, u(rng), u(rng));
    EXPECT_NEAR(tap.w00 + tap.w01 + tap.w10 + tap.w11, 1.0, 1e-12);
    EXPECT_GE(std::min({tap.w00, tap.w01, tap.w10, tap.w11}), 0.0);
  }
}

TEST(TensorIo, TnsRoundTrip) {
  StoredTensor t{{2, 3, 4}, {}};
  t.data.resize(24);
  std::iota(t.data.begin(), t.data.end(), -3.5f);
  std::stringstream ss;
  write_tns(ss, t);
  EXPECT_EQ(ss.str().substr(0, 4), "TNS1");
  EXPECT_EQ(ss.str().size(), 4u + 4u + 12u + 96u);
  EXPECT_EQ(read_tns(ss), t);
}

TEST(TensorIo, TruncatedTnsThrows) {
  StoredTensor t{{5}, {1, 2, 3, 4, 5}};
  std::stringstream ss;
  write_tns(ss, t);
  std::string bytes = ss.str();
  bytes.resize(bytes.size() - 3);
  std::stringstream cut(bytes);
  EXPECT_ANY_THROW(read_tns(cut));
  std::stringstream bad("XXXX");
  EXPECT_ANY_THROW(read_tns(bad));
}

TEST(TensorIo, BundleRoundTrip) {
  test::TempDir dir("bundle");
  TensorBundle b;
  b.header = {{"kind", "test"}, {"n", 3}};
  b.tensors.push_back({"a", StoredTensor{{2}, {1.5f, -2.0f}}});
  b.tensors.push_back({"b.c", StoredTensor{{1, 1}, {7.0f}}});
  save_bundle(b, dir / "x.tns");
  const TensorBundle back = load_bundle(dir / "x.tns");
  EXPECT_EQ(back.header, b.header);
  EXPECT_EQ(back.at("a"), b.tensors[0].tensor);
  EXPECT_EQ(back.at("b.c"), b.tensors[1].tensor);
  EXPECT_FALSE(back.contains("zzz"));
}

TEST(TensorIo, ImageLabelMapConversions) {
  const SampleConfig cfg = SampleConfig::smoke();
  const Sample s = generate_sample(cfg, 2);
  EXPECT_EQ(image_from_stored(to_stored(s.image)), s.image);
  EXPECT_EQ(label_from_stored(to_stored(s.label)), s.label);
  EXPECT_EQ(map_from_stored(to_stored(s.target_map)), s.target_map);
  const auto pts = points_from_stored(to_stored(s.target));
  ASSERT_EQ(pts.size(), s.target.size());
  for (std::size_t i = 0; i < pts.size(); ++i) EXPECT_EQ(pts[i], s.target[i]);
}
