#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "dreg/error.hpp"
#include "dreg/losses.hpp"
#include "dreg/network.hpp"
#include "dreg/phantom.hpp"
#include "dreg/trainer.hpp"
#include "test_util.hpp"

using namespace dreg;
using nn::Mat;

namespace {

Mat<double> random_mat(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Mat<double> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

double central(double& x, double h, const std::function<double()>& f) {
  const double saved = x;
  x = saved + h;
  const double fp = f();
  x = saved - h;
  const double fm = f();
  x = saved;
  return (fp - fm) / (2.0 * h);
}

double rel(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8}); }

struct SmokeSetup {
  SampleConfig config = SampleConfig::smoke();
  Sample sample;
  ModelInput input;
  ArchConfig arch;

  explicit SmokeSetup(bool zero_heads, bool map_skip = true) {
    sample = generate_sample(config, 3);
    const Camera cam = config.camera();
    Box box = bounding_box(sample.template_mesh.vertices);
    for (const auto& v : sample.target) box.expand(v);
    box.lo -= Vec3{2, 2, 2};
    box.hi += Vec3{2, 2, 2};
    input = prepare_input(cam, sample.image, sample.label, 1, sample.template_mesh, CoordinateNormalizer(box));
    arch.image_width = cam.width;
    arch.image_height = cam.height;
    arch.widths = {4, 8};
    arch.gcn_hidden = 16;
    arch.zero_init_heads = zero_heads;
    arch.map_skip = map_skip;
    arch.init_seed = 5;
  }
};

}  // namespace

TEST(Conv2d, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(1);
  nn::Conv2d<double> conv("c", 3, 4, 3);
  conv.weight.value = random_mat(4, 27, rng);
  conv.bias.value = random_mat(4, 1, rng);
  nn::FeatureMap<double> x(3, 6, 5);
  x.v = random_mat(3, 30, rng);
  const Mat<double> probe = random_mat(4, 30, rng);
  auto f = [&] {
    nn::Conv2d<double>::Cache cache;
    return conv.forward(x, cache).v.cwiseProduct(probe).sum();
  };
  nn::Conv2d<double>::Cache cache;
  conv.forward(x, cache);
  conv.weight.zero_grad();
  conv.bias.zero_grad();
  const auto dx = conv.backward(cache, probe);
  for (Eigen::Index i = 0; i < conv.weight.value.size(); ++i)
    EXPECT_LT(rel(conv.weight.grad.data()[i], central(conv.weight.value.data()[i], 1e-5, f)), 1e-6);
  for (Eigen::Index i = 0; i < conv.bias.value.size(); ++i)
    EXPECT_LT(rel(conv.bias.grad.data()[i], central(conv.bias.value.data()[i], 1e-5, f)), 1e-6);
  for (Eigen::Index i = 0; i < x.v.size(); ++i) EXPECT_LT(rel(dx.v.data()[i], central(x.v.data()[i], 1e-5, f)), 1e-6);
}

TEST(Conv2d, MatchesDirectConvolution) {
  std::mt19937_64 rng(2);
  nn::Conv2d<double> conv("c", 2, 3, 3);
  conv.weight.value = random_mat(3, 18, rng);
  conv.bias.value = random_mat(3, 1, rng);
  nn::FeatureMap<double> x(2, 5, 7);
  x.v = random_mat(2, 35, rng);
  nn::Conv2d<double>::Cache cache;
  const auto y = conv.forward(x, cache);
  for (int o = 0; o < 3; ++o) {
    for (int r = 0; r < 5; ++r) {
      for (int c = 0; c < 7; ++c) {
        double s = conv.bias.value(o, 0);
        for (int i = 0; i < 2; ++i)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              const int rr = r + ky - 1;
              const int cc = c + kx - 1;
              if (rr < 0 || rr >= 5 || cc < 0 || cc >= 7) continue;
              s += conv.weight.value(o, (i * 3 + ky) * 3 + kx) * x.v(i, rr * 7 + cc);
            }
        EXPECT_NEAR(y.v(o, r * 7 + c), s, 1e-12);
      }
    }
  }
}

TEST(PoolUpsample, AdjointPairs) {
  std::mt19937_64 rng(3);
  nn::FeatureMap<double> x(2, 4, 6);
  x.v = random_mat(2, 24, rng);
  const auto pooled = nn::avg_pool2(x);
  const Mat<double> gp = random_mat(2, 6, rng);
  const auto dxp = nn::avg_pool2_backward<double>(gp, 2, 4, 6);
  EXPECT_NEAR(pooled.v.cwiseProduct(gp).sum(), x.v.cwiseProduct(dxp.v).sum(), 1e-12);

  const auto up = nn::upsample2(x);
  const Mat<double> gu = random_mat(2, 96, rng);
  const auto dxu = nn::upsample2_backward<double>(gu, 2, 4, 6);
  EXPECT_NEAR(up.v.cwiseProduct(gu).sum(), x.v.cwiseProduct(dxu).sum(), 1e-12);
}

TEST(GraphConvLayer, SingleVertexIdentity) {
  Mesh m;
  m.vertices = {{0, 0, 0}};
  m.organ_id = {0};
  const auto op = build_graph_operator(m);
  nn::GraphConv<double> layer("g", 3, 3, false);
  layer.weight.value = Mat<double>::Identity(3, 3);
  Mat<double> x(1, 3);
  x << 1.5, -2.0, 0.25;
  nn::GraphConv<double>::Cache cache;
  EXPECT_EQ(layer.forward(op.propagation, x, cache), x);
}

TEST(GraphConvLayer, TwoVertexAverage) {
  Mesh m;
  m.vertices = {{0, 0, 0}, {1, 0, 0}};
  m.organ_id = {0, 0};
  m.bridges = {{0, 1}};
  const auto op = build_graph_operator(m);
  nn::GraphConv<double> layer("g", 1, 1, false);
  layer.weight.value(0, 0) = 1.0;
  Mat<double> x(2, 1);
  x << 1.0, 0.0;
  nn::GraphConv<double>::Cache cache;
  const auto y = layer.forward(op.propagation, x, cache);
  EXPECT_NEAR(y(0, 0), 0.5, 1e-15);
  EXPECT_NEAR(y(1, 0), 0.5, 1e-15);
}

TEST(GraphConvLayer, ReluOfNegativeIsZero) {
  const auto op = build_graph_operator(test::tetrahedron());
  nn::GraphConv<double> layer("g", 2, 3, true);
  layer.weight.value.setConstant(1.0);
  layer.bias.value.setConstant(-0.5);
  const Mat<double> x = -Mat<double>::Ones(4, 2);
  nn::GraphConv<double>::Cache cache;
  EXPECT_TRUE(layer.forward(op.propagation, x, cache).isZero(0.0));
}

TEST(GraphConvLayer, DisconnectedVertexSeesOnlyItself) {
  Mesh m = test::tetrahedron();
  m.vertices.push_back({9, 9, 9});
  m.organ_id.push_back(0);
  const auto op = build_graph_operator(m);
  std::mt19937_64 rng(4);
  nn::GraphConv<double> layer("g", 5, 4, true);
  layer.weight.value = random_mat(5, 4, rng);
  layer.bias.value = random_mat(1, 4, rng);
  Mat<double> x = random_mat(5, 5, rng);
  nn::GraphConv<double>::Cache cache;
  const Mat<double> before = layer.forward(op.propagation, x, cache);
  x.topRows(4) = random_mat(4, 5, rng);
  const Mat<double> after = layer.forward(op.propagation, x, cache);
  EXPECT_EQ(before.row(4), after.row(4));
  Mat<double> expected = x.row(4) * layer.weight.value + layer.bias.value;
  expected = expected.cwiseMax(0.0);
  EXPECT_EQ(after.row(4), expected);
}

TEST(GraphConvLayer, GradientsMatchFiniteDifferences) {
  const Mesh mesh = generate_phantom_mesh(PhantomKind::ellipsoid, 7, 2);
  const auto op = build_graph_operator(mesh);
  std::mt19937_64 rng(5);
  const auto n = static_cast<Eigen::Index>(mesh.size());
  nn::GraphConv<double> layer("g", 6, 5, false);
  layer.weight.value = random_mat(6, 5, rng);
  layer.bias.value = random_mat(1, 5, rng);
  Mat<double> x = random_mat(n, 6, rng);
  const Mat<double> probe = random_mat(n, 5, rng);
  auto f = [&] {
    nn::GraphConv<double>::Cache c;
    return layer.forward(op.propagation, x, c).cwiseProduct(probe).sum();
  };
  nn::GraphConv<double>::Cache cache;
  layer.forward(op.propagation, x, cache);
  const Mat<double> dx = layer.backward(op.propagation, cache, probe);
  for (Eigen::Index i = 0; i < layer.weight.value.size(); ++i)
    EXPECT_LT(rel(layer.weight.grad.data()[i], central(layer.weight.value.data()[i], 1e-5, f)), 1e-6);
  for (Eigen::Index i = 0; i < layer.bias.value.size(); ++i)
    EXPECT_LT(rel(layer.bias.grad.data()[i], central(layer.bias.value.data()[i], 1e-5, f)), 1e-6);
  for (Eigen::Index i = 0; i < 40; ++i) EXPECT_LT(rel(dx.data()[i], central(x.data()[i], 1e-5, f)), 1e-6);
}

TEST(Sampler, ConstantMapAndSharedPixel) {
  const int w = 16;
  Mat<double> map(3, w * w);
  map.row(0).setConstant(1.25);
  map.row(1).setConstant(-3.0);
  map.row(2).setConstant(0.5);
  std::vector<BilinearTap> taps{bilinear_tap(w, w, 3.3, 7.9), bilinear_tap(w, w, -4, 30), bilinear_tap(w, w, 3.3, 7.9)};
  const auto s = nn::sample_vertices<double>(map, w, taps);
  for (int i = 0; i < 3; ++i) {
    EXPECT_NEAR(s(i, 0), 1.25, 1e-15);
    EXPECT_NEAR(s(i, 1), -3.0, 1e-15);
    EXPECT_NEAR(s(i, 2), 0.5, 1e-15);
  }
  std::mt19937_64 rng(6);
  const Mat<double> rmap = random_mat(3, w * w, rng);
  const auto rs = nn::sample_vertices<double>(rmap, w, taps);
  EXPECT_EQ(rs.row(0), rs.row(2));
}

TEST(Sampler, GradientIsSumOfBilinearWeights) {
  const int w = 16;
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.0, 15.0);
  std::vector<BilinearTap> taps;
  for (int i = 0; i < 30; ++i) taps.push_back(bilinear_tap(w, w, u(rng), u(rng)));
  Mat<double> map = random_mat(3, w * w, rng);
  Mat<double> d_map = Mat<double>::Zero(3, w * w);
  nn::sample_vertices_backward<double>(Mat<double>::Ones(30, 3), w, taps, d_map);
  auto f = [&] { return nn::sample_vertices<double>(map, w, taps).sum(); };
  for (int p = 0; p < w * w; ++p) {
    double weight_sum = 0.0;
    for (const auto& t : taps) {
      if (t.y0 * w + t.x0 == p) weight_sum += t.w00;
      if (t.y0 * w + t.x1 == p) weight_sum += t.w10;
      if (t.y1 * w + t.x0 == p) weight_sum += t.w01;
      if (t.y1 * w + t.x1 == p) weight_sum += t.w11;
    }
    EXPECT_NEAR(d_map(1, p), weight_sum, 1e-12);
    if (p % 17 == 0) EXPECT_NEAR(central(map(1, p), 1e-4, f), weight_sum, 1e-8);
  }
}

TEST(Generator, ZeroHeadOutputsZeroWithRightShape) {
  SmokeSetup s(true);
  nn::Generator<double> gen(s.arch);
  nn::Generator<double>::Cache cache;
  const auto out = gen.forward(s.input.image, cache);
  EXPECT_EQ(out.channels, 3);
  EXPECT_EQ(out.height, 16);
  EXPECT_EQ(out.width, 16);
  EXPECT_TRUE(out.v.isZero(0.0));
}

TEST(Generator, KernelGradientMatchesFiniteDifferences) {
  SmokeSetup s(false);
  nn::Generator<double> gen(s.arch);
  std::mt19937_64 rng(8);
  // Zero biases put all-zero patches exactly on the ReLU hinge.
  for (auto* p : gen.params()) {
    if (p->value.cols() == 1) p->value = random_mat(p->value.rows(), 1, rng) * 0.1;
  }
  const Mat<double> probe = random_mat(3, 256, rng);
  auto f = [&] {
    nn::Generator<double>::Cache c;
    return gen.forward(s.input.image, c).v.cwiseProduct(probe).sum();
  };
  nn::Generator<double>::Cache cache;
  gen.forward(s.input.image, cache);
  for (auto* p : gen.params()) p->zero_grad();
  gen.backward(cache, probe);
  int checked = 0;
  for (auto* p : gen.params()) {
    for (int k = 0; k < 3; ++k) {
      const auto i = static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(p->value.size()));
      const double numeric = central(p->value.data()[i], 1e-6, f);
      EXPECT_LT(rel(p->grad.data()[i], numeric), 1e-3) << p->name << "[" << i << "]";
      ++checked;
    }
  }
  EXPECT_GT(checked, 10);
}

TEST(Generator, RejectsIndivisibleSize) {
  ArchConfig arch;
  arch.image_width = 20;
  arch.image_height = 20;
  EXPECT_THROW(nn::Generator<double>{arch}, ValidationError);
}

TEST(ModelForward, ZeroInitIsIdentityOnPositions) {
  for (bool skip : {false, true}) {
    SmokeSetup s(true, skip);
    nn::Model<double> model(s.arch);
    nn::Model<double>::Cache cache;
    const auto out = model.forward(s.input, cache);
    ASSERT_EQ(out.positions.rows(), static_cast<Eigen::Index>(s.sample.template_mesh.size()));
    EXPECT_EQ(to_points(out.positions), s.sample.template_mesh.vertices);
    nn::Model<float> fmodel(s.arch);
    nn::Model<float>::Cache fcache;
    const auto fout = fmodel.forward(s.input, fcache);
    for (Eigen::Index i = 0; i < fout.positions.rows(); ++i)
      for (int a = 0; a < 3; ++a)
        EXPECT_EQ(fout.positions(i, a), static_cast<float>(s.sample.template_mesh.vertices[i][a]));
  }
}

TEST(ModelForward, MultiOrganOutputCount) {
  const SampleConfig cfg = SampleConfig::coupled_two_organ();
  const Sample sample = generate_sample(cfg, 1);
  const Mesh graph = compose_organs(sample.template_mesh);
  ArchConfig arch;
  arch.image_width = cfg.image_size;
  arch.image_height = cfg.image_size;
  arch.zero_init_heads = false;
  const auto in = prepare_input(cfg.camera(), sample.image, sample.label, 2, graph,
                                CoordinateNormalizer(Box{{-60, -60, -60}, {60, 60, 60}}));
  nn::Model<float> model(arch);
  nn::Model<float>::Cache cache;
  EXPECT_EQ(model.forward(in, cache).positions.rows(), static_cast<Eigen::Index>(graph.size()));
}

TEST(ModelForward, VertexPermutationEquivariance) {
  SmokeSetup s(false);
  const Mesh& mesh = s.sample.template_mesh;
  const std::size_t n = mesh.size();
  std::vector<std::uint32_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0u);
  std::mt19937_64 rng(9);
  std::shuffle(perm.begin(), perm.end(), rng);
  // New vertex k is old vertex perm[k].
  std::vector<std::uint32_t> inverse(n);
  for (std::size_t k = 0; k < n; ++k) inverse[perm[k]] = static_cast<std::uint32_t>(k);
  Mesh permuted;
  for (std::size_t k = 0; k < n; ++k) permuted.vertices.push_back(mesh.vertices[perm[k]]);
  permuted.organ_id.assign(n, 0);
  for (auto t : mesh.triangles) permuted.triangles.push_back({inverse[t[0]], inverse[t[1]], inverse[t[2]]});

  const Camera cam = s.config.camera();
  const auto in2 = prepare_input(cam, s.sample.image, s.sample.label, 1, permuted, s.input.normalizer);
  nn::Model<double> model(s.arch);
  nn::Model<double>::Cache c1;
  nn::Model<double>::Cache c2;
  const auto a = model.forward(s.input, c1);
  const auto b = model.forward(in2, c2);
  for (std::size_t k = 0; k < n; ++k)
    for (int ax = 0; ax < 3; ++ax) EXPECT_NEAR(b.positions(k, ax), a.positions(perm[k], ax), 1e-12);
}

TEST(ModelForward, EndToEndGeneratorGradient) {
  SmokeSetup s(false);
  nn::Model<double> model(s.arch);
  for (auto* p : model.generator().params()) {
    if (p->name.rfind("gen.head.", 0) == 0) p->value *= 4.0;
  }
  const Mat<double> target = to_matrix(s.sample.target);
  auto f = [&] {
    nn::Model<double>::Cache c;
    return loss_pos<double>(model.forward(s.input, c).positions, target).value;
  };
  model.zero_grad();
  nn::Model<double>::Cache cache;
  const auto out = model.forward(s.input, cache);
  model.backward(cache, Mat<double>(), loss_pos<double>(out.positions, target).grad);
  auto& kernel = model.generator().params().front()->value;
  const auto& grad = model.generator().params().front()->grad;
  int good = 0;
  for (Eigen::Index i = 0; i < 6; ++i) good += rel(grad.data()[i], central(kernel.data()[i], 1e-6, f)) < 1e-3;
  // A probe can straddle a ReLU kink; the full gradcheck redraws those.
  EXPECT_GE(good, 5);
}

TEST(Gradcheck, SmokeReportPasses) {
  const auto report = run_gradcheck();
  for (const auto& e : report.entries) {
    EXPECT_TRUE(e.passed) << e.name << " rel " << e.max_rel_error;
    EXPECT_GT(e.checked, 0u) << e.name;
  }
  EXPECT_LT(report.max_rel_error(), 1e-3);
  EXPECT_LT(report.seconds, 60.0);
}

TEST(Adam, FirstStepIsSignedLearningRate) {
  nn::Param<double> p("p", {4}, 4, 1);
  p.value << 1.0, -2.0, 0.5, 3.0;
  p.grad << 0.3, -7.0, 1e-2, -2e-3;
  const Mat<double> before = p.value;
  nn::AdamState<double> state;
  nn::AdamOptions opt;
  EXPECT_EQ(opt.lr, 1e-4);
  EXPECT_EQ(opt.beta1, 0.9);
  EXPECT_EQ(opt.beta2, 0.999);
  nn::adam_step<double>({&p}, state, opt);
  for (int i = 0; i < 4; ++i) {
    const double g = p.grad(i, 0);
    const double expected = -opt.lr * g / (std::abs(g) + opt.eps);
    EXPECT_NEAR(p.value(i, 0) - before(i, 0), expected, 1e-15);
    EXPECT_NEAR(p.value(i, 0) - before(i, 0), -opt.lr * (g > 0 ? 1 : -1), 1e-6 * opt.lr / std::abs(g) + 1e-12);
  }
  EXPECT_EQ(state.step, 1);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  nn::Param<float> p("p", {3}, 3, 1);
  p.value << 1.0f, 2.0f, 3.0f;
  const Mat<float> before = p.value;
  nn::AdamState<float> state;
  for (int i = 0; i < 3; ++i) nn::adam_step<float>({&p}, state, nn::AdamOptions{});
  EXPECT_EQ(p.value, before);
}

TEST(Adam, NonFiniteGradientThrowsBeforeUpdating) {
  nn::Param<float> a("a", {2}, 2, 1);
  nn::Param<float> b("b", {2}, 2, 1);
  a.grad << 1.0f, 1.0f;
  b.grad << 1.0f, std::nanf("");
  nn::AdamState<float> state;
  EXPECT_THROW(nn::adam_step<float>({&a, &b}, state, nn::AdamOptions{}), NumericError);
  EXPECT_TRUE(a.value.isZero(0.0f));
  b.grad(1, 0) = std::numeric_limits<float>::infinity();
  EXPECT_THROW(nn::adam_step<float>({&a, &b}, state, nn::AdamOptions{}), NumericError);
}

TEST(ModelIo, BundleRoundTripIsExact) {
  test::TempDir dir("model");
  ArchConfig arch;
  arch.zero_init_heads = false;
  arch.init_seed = 44;
  nn::Model<float> model(arch);
  save_bundle(model_to_bundle(model, {{"kind", "checkpoint"}}), dir / "m.tns");
  const nn::Model<float> back = model_from_bundle(load_bundle(dir / "m.tns"));
  EXPECT_EQ(back.config(), model.config());
  const auto pa = model.params();
  const auto pb = back.params();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i]->name, pb[i]->name);
    EXPECT_EQ(pa[i]->value, pb[i]->value);
  }
}

TEST(ModelInit, SeededAndArchitectureShape) {
  ArchConfig arch;
  arch.zero_init_heads = false;
  const nn::Model<float> a(arch);
  const nn::Model<float> b(arch);
  EXPECT_EQ(a.params().front()->value, b.params().front()->value);
  arch.init_seed = 2;
  const nn::Model<float> c(arch);
  EXPECT_NE(a.params().front()->value, c.params().front()->value);

  nn::Model<float> m(ArchConfig{});
  EXPECT_EQ(m.deformer().layer_count(), 8u);
  const auto params = m.deformer().params();
  EXPECT_EQ(params.front()->value.rows(), 6);
  EXPECT_EQ(params[params.size() - 2]->value.cols(), 3);
  EXPECT_TRUE(params[params.size() - 2]->value.isZero(0.0f));
}
