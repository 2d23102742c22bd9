#include "dreg/phantom.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include "dreg/error.hpp"
#include "dreg/rng.hpp"
#include "dreg/voxelize.hpp"

namespace dreg {

namespace {

constexpr double kPi = std::numbers::pi;

double signed_pow(double t, double e) { return std::copysign(std::pow(std::abs(t), e), t); }

nlohmann::json vec_json(const Vec3& v) { return nlohmann::json::array({v.x, v.y, v.z}); }
Vec3 vec_from_json(const nlohmann::json& j) { return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()}; }

// volatile keeps GCC 11 -O3 from vectorizing the narrowing away
double to_float(double v) {
  volatile float f = static_cast<float>(v);
  return f;
}
Vec3 to_float(const Vec3& v) { return {to_float(v.x), to_float(v.y), to_float(v.z)}; }

std::string indexed(const char* prefix, int i, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s_%04d%s", prefix, i, ext);
  return buf;
}

}  // namespace

PhantomKind phantom_kind_from_string(const std::string& s) {
  if (s == "sphere") return PhantomKind::sphere;
  if (s == "ellipsoid") return PhantomKind::ellipsoid;
  if (s == "superellipsoid") return PhantomKind::superellipsoid;
  if (s == "icosahedron") return PhantomKind::icosahedron;
  throw ValidationError("unknown phantom kind '" + s + "'");
}

std::string to_string(PhantomKind kind) {
  switch (kind) {
    case PhantomKind::sphere:
      return "sphere";
    case PhantomKind::ellipsoid:
      return "ellipsoid";
    case PhantomKind::superellipsoid:
      return "superellipsoid";
    case PhantomKind::icosahedron:
      return "icosahedron";
  }
  return "?";
}

std::size_t phantom_vertex_count(int resolution) {
  const auto r = static_cast<std::size_t>(resolution);
  return 2 * r * (r + 1) + 2;
}

Mesh generate_phantom_mesh(PhantomKind kind, int resolution, std::uint64_t seed) {
  if (kind == PhantomKind::icosahedron) return icosahedron();
  if (resolution < 1) throw ValidationError("phantom resolution must be positive");
  const std::size_t nv = phantom_vertex_count(resolution);
  if (nv < 100 || nv > 2000) {
    throw ValidationError("phantom resolution " + std::to_string(resolution) + " gives " + std::to_string(nv) +
                          " vertices, outside [100, 2000]");
  }
  Rng rng(mix_seed(seed, 0x5eed));
  Vec3 radii{1.0, 1.0, 1.0};
  double exponent = 1.0;
  if (kind != PhantomKind::sphere) {
    for (int a = 0; a < 3; ++a) radii[a] = 1.0 + uniform(rng, -0.15, 0.15);
  }
  if (kind == PhantomKind::superellipsoid) exponent = uniform(rng, 0.55, 0.9);

  const int lon = 2 * resolution;
  const int rings = resolution + 1;
  Mesh mesh;
  auto point = [&](double phi, double theta) {
    const double sp = std::sin(phi);
    return Vec3{radii.x * signed_pow(sp, exponent) * signed_pow(std::cos(theta), exponent),
                radii.y * signed_pow(sp, exponent) * signed_pow(std::sin(theta), exponent),
                radii.z * signed_pow(std::cos(phi), exponent)};
  };
  mesh.vertices.push_back({0.0, 0.0, radii.z});
  for (int k = 1; k <= rings; ++k) {
    const double phi = kPi * k / (rings + 1);
    for (int j = 0; j < lon; ++j) mesh.vertices.push_back(point(phi, 2.0 * kPi * j / lon));
  }
  mesh.vertices.push_back({0.0, 0.0, -radii.z});
  const auto south = static_cast<std::uint32_t>(mesh.vertices.size() - 1);
  auto ring = [&](int k, int j) { return static_cast<std::uint32_t>(1 + (k - 1) * lon + ((j % lon) + lon) % lon); };
  for (int j = 0; j < lon; ++j) mesh.triangles.push_back({0u, ring(1, j), ring(1, j + 1)});
  for (int k = 1; k < rings; ++k) {
    for (int j = 0; j < lon; ++j) {
      const auto a = ring(k, j);
      const auto b = ring(k, j + 1);
      const auto c = ring(k + 1, j);
      const auto d = ring(k + 1, j + 1);
      mesh.triangles.push_back({a, c, d});
      mesh.triangles.push_back({a, d, b});
    }
  }
  for (int j = 0; j < lon; ++j) mesh.triangles.push_back({south, ring(rings, j + 1), ring(rings, j)});
  mesh.organ_id.assign(mesh.vertices.size(), 0);
  return mesh;
}

Mesh icosahedron() {
  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  Mesh mesh;
  const Vec3 raw[12] = {{-1, t, 0}, {1, t, 0}, {-1, -t, 0}, {1, -t, 0}, {0, -1, t}, {0, 1, t},
                        {0, -1, -t}, {0, 1, -t}, {t, 0, -1}, {t, 0, 1}, {-t, 0, -1}, {-t, 0, 1}};
  for (const auto& v : raw) mesh.vertices.push_back(normalized(v));
  mesh.triangles = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11}, {1, 5, 9}, {5, 11, 4},
                    {11, 10, 2}, {10, 7, 6}, {7, 1, 8},  {3, 9, 4},  {3, 4, 2},   {3, 2, 6}, {3, 6, 8},
                    {3, 8, 9},  {4, 9, 5},  {2, 4, 11}, {6, 2, 10}, {8, 6, 7},   {9, 8, 1}};
  mesh.organ_id.assign(12, 0);
  return mesh;
}

std::vector<Vec3> apply_synthetic_deformation(const Mesh& mesh, const DeformationParams& params, std::uint64_t seed,
                                              double max_displacement_mm) {
  const Vec3 c = centroid(mesh.vertices);
  const Vec3 ext = bounding_box(mesh.vertices).extent();
  Rng rng(mix_seed(seed, 0xbe4d));
  const double phase_y = uniform(rng, 0.0, 2.0 * kPi);
  const double phase_z = uniform(rng, 0.0, 2.0 * kPi);
  std::vector<Vec3> d(mesh.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    const Vec3 rel = mesh.vertices[i] - c;
    Vec3 v = params.translation + hadamard(params.scale - Vec3{1.0, 1.0, 1.0}, rel);
    if (params.bend_amplitude != 0.0) {
      const double ux = ext.x > 0.0 ? rel.x / ext.x : 0.0;
      const double uy = ext.y > 0.0 ? rel.y / ext.y : 0.0;
      v.y += params.bend_amplitude * std::sin(kPi * ux + phase_y);
      v.z += 0.3 * params.bend_amplitude * std::sin(kPi * uy + phase_z);
    }
    if (norm(v) > max_displacement_mm) {
      throw ValidationError("synthetic deformation exceeds the displacement bound of " +
                            std::to_string(max_displacement_mm) + " mm");
    }
    d[i] = v;
  }
  return d;
}

SampleConfig SampleConfig::single_organ() { return SampleConfig{}; }

SampleConfig SampleConfig::smoke() {
  SampleConfig c;
  c.image_size = 16;
  c.pixel_mm = 1.5;
  c.depth_extent_mm = 12.0;
  OrganSpec organ;
  organ.kind = PhantomKind::icosahedron;
  organ.radii_mm = {6.0, 5.0, 4.5};
  c.organs = {organ};
  c.anatomy_offset_mm = {1.0, 1.0, 0.5};
  c.translation_range_mm = {1.5, 2.0, 0.5};
  c.scale_range = 0.08;
  c.bend_range_mm = 0.5;
  return c;
}

SampleConfig SampleConfig::coupled_two_organ() {
  SampleConfig c;
  OrganSpec visible;
  visible.kind = PhantomKind::ellipsoid;
  visible.radii_mm = {17.0, 12.0, 11.0};
  visible.center_mm = {-2.0, 12.0, 0.0};
  visible.density = 1.0;
  OrganSpec hidden;
  hidden.kind = PhantomKind::superellipsoid;
  hidden.radii_mm = {11.0, 8.0, 9.0};
  hidden.center_mm = {4.0, -12.0, 0.0};
  hidden.density = 0.0;
  // Organs sit independently per subject but move together.
  visible.placement_mm = hidden.placement_mm = {4.0, 4.0, 4.0 / 3.0};
  c.organs = {visible, hidden};
  return c;
}

Camera SampleConfig::camera() const {
  return Camera::orthographic(image_size, image_size, pixel_mm, {0.0, 0.0, 0.0}, {0.0, 0.0, 1.0}, {0.0, 1.0, 0.0});
}

void SampleConfig::validate() const {
  if (image_size < 16) throw ValidationError("image_size must be >= 16");
  if (!(pixel_mm > 0.0) || !(depth_extent_mm > 0.0)) throw ValidationError("pixel_mm and depth extent must be positive");
  if (organs.empty()) throw ValidationError("sample config needs at least one organ");
  for (const auto& o : organs) {
    if (o.density < 0.0) throw ValidationError("organ density must be non-negative");
    if (o.placement_mm.x < 0.0 || o.placement_mm.y < 0.0 || o.placement_mm.z < 0.0) {
      throw ValidationError("organ placement range must be non-negative");
    }
    if (!(o.radii_mm.x > 0.0 && o.radii_mm.y > 0.0 && o.radii_mm.z > 0.0)) throw ValidationError("organ radii must be positive");
  }
  if (jitter_max_mm < 0.0 || max_displacement_mm <= 0.0) throw ValidationError("invalid displacement bounds");
}

nlohmann::json SampleConfig::to_json() const {
  nlohmann::json organs_json = nlohmann::json::array();
  for (const auto& o : organs) {
    organs_json.push_back({{"kind", to_string(o.kind)},
                           {"resolution", o.resolution},
                           {"radii_mm", vec_json(o.radii_mm)},
                           {"center_mm", vec_json(o.center_mm)},
                           {"density", o.density},
                           {"placement_mm", vec_json(o.placement_mm)}});
  }
  return {{"image_size", image_size},
          {"pixel_mm", pixel_mm},
          {"depth_extent_mm", depth_extent_mm},
          {"organs", organs_json},
          {"anatomy_offset_mm", vec_json(anatomy_offset_mm)},
          {"shape_variation", shape_variation},
          {"translation_range_mm", vec_json(translation_range_mm)},
          {"scale_range", scale_range},
          {"bend_range_mm", bend_range_mm},
          {"max_displacement_mm", max_displacement_mm},
          {"background_density", background_density},
          {"jitter_max_mm", jitter_max_mm},
          {"drr_max", drr_max}};
}

SampleConfig SampleConfig::from_json(const nlohmann::json& j) {
  SampleConfig c;
  c.image_size = j.at("image_size").get<int>();
  c.pixel_mm = j.at("pixel_mm").get<double>();
  c.depth_extent_mm = j.at("depth_extent_mm").get<double>();
  c.organs.clear();
  for (const auto& o : j.at("organs")) {
    OrganSpec s;
    s.kind = phantom_kind_from_string(o.at("kind").get<std::string>());
    s.resolution = o.at("resolution").get<int>();
    s.radii_mm = vec_from_json(o.at("radii_mm"));
    s.center_mm = vec_from_json(o.at("center_mm"));
    s.density = o.at("density").get<double>();
    if (o.contains("placement_mm")) s.placement_mm = vec_from_json(o.at("placement_mm"));
    c.organs.push_back(s);
  }
  c.anatomy_offset_mm = vec_from_json(j.at("anatomy_offset_mm"));
  c.shape_variation = j.at("shape_variation").get<double>();
  c.translation_range_mm = vec_from_json(j.at("translation_range_mm"));
  c.scale_range = j.at("scale_range").get<double>();
  c.bend_range_mm = j.at("bend_range_mm").get<double>();
  c.max_displacement_mm = j.at("max_displacement_mm").get<double>();
  c.background_density = j.at("background_density").get<double>();
  c.jitter_max_mm = j.at("jitter_max_mm").get<double>();
  c.drr_max = j.at("drr_max").get<double>();
  c.validate();
  return c;
}

std::vector<Vec3> Sample::displacements() const {
  std::vector<Vec3> d(target.size());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = target[i] - template_mesh.vertices[i];
  return d;
}

Sample with_template(const Sample& sample, const Camera& camera, std::vector<Vec3> positions) {
  Sample out = sample;
  out.template_mesh = sample.template_mesh.with_positions(std::move(positions));
  out.label = render_semantic_label(camera, out.template_mesh);
  out.target_map = render_displacement_map(camera, out.template_mesh, out.displacements());
  return out;
}

Sample apply_jitter(const Sample& sample, const Camera& camera, const Vec3& jitter) {
  std::vector<Vec3> moved = sample.template_mesh.vertices;
  for (auto& v : moved) v = to_float(v + jitter);
  Sample out = with_template(sample, camera, std::move(moved));
  out.jitter = sample.jitter + jitter;
  return out;
}

namespace {

Volume density_volume(const SampleConfig& config, const Mesh& deformed) {
  const int n = config.image_size;
  const double px = config.pixel_mm;
  const int nz = static_cast<int>(std::ceil(2.0 * config.depth_extent_mm / px));
  // Voxel x/y centers coincide with pixel centers of the camera.
  const Vec3 origin{-0.5 * n * px, -0.5 * n * px, -0.5 * (nz - 1) * px};
  Volume vol(n, n, nz, origin, {px, px, px});
  const double field = 0.5 * n * px;
  for (int k = 0; k < nz; ++k) {
    for (int j = 0; j < n; ++j) {
      for (int i = 0; i < n; ++i) {
        const Vec3 p = vol.voxel_center(i, j, k);
        const double bg = config.background_density *
                          (1.0 + 0.4 * std::sin(kPi * p.x / field) + 0.3 * p.y / field - 0.2 * (p.z / config.depth_extent_mm));
        vol.at(i, j, k) = static_cast<float>(std::max(0.0, bg));
      }
    }
  }
  VoxelGrid grid;
  grid.origin = origin;
  grid.voxel = px;
  grid.nx = n;
  grid.ny = n;
  grid.nz = nz;
  for (int o = 0; o < deformed.organ_count(); ++o) {
    const double rho = config.organs[static_cast<std::size_t>(o)].density;
    if (rho == 0.0) continue;
    const auto occ = voxelize(deformed.extract_organ(o), grid);
    for (std::size_t v = 0; v < occ.size(); ++v) {
      if (occ[v]) vol.density[v] += static_cast<float>(rho);
    }
  }
  return vol;
}

struct RawSample {
  Sample sample;
  Image raw_image;
};

RawSample generate_raw_sample(const SampleConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(mix_seed(seed, 1));
  const Vec3 offset{uniform(rng, -config.anatomy_offset_mm.x, config.anatomy_offset_mm.x),
                    uniform(rng, -config.anatomy_offset_mm.y, config.anatomy_offset_mm.y),
                    uniform(rng, -config.anatomy_offset_mm.z, config.anatomy_offset_mm.z)};
  Mesh tmpl;
  for (std::size_t o = 0; o < config.organs.size(); ++o) {
    const auto& spec = config.organs[o];
    Mesh organ = generate_phantom_mesh(spec.kind, spec.resolution, mix_seed(seed, 100 + o));
    Vec3 radii = spec.radii_mm;
    for (int a = 0; a < 3; ++a) radii[a] *= 1.0 + uniform(rng, -config.shape_variation, config.shape_variation);
    Vec3 place;
    if (spec.placement_mm != Vec3{}) {
      Rng prng(mix_seed(seed, 200 + o));
      for (int a = 0; a < 3; ++a) place[a] = uniform(prng, -spec.placement_mm[a], spec.placement_mm[a]);
    }
    const auto base = static_cast<std::uint32_t>(tmpl.vertices.size());
    for (const auto& v : organ.vertices) tmpl.vertices.push_back(to_float(hadamard(v, radii) + spec.center_mm + offset + place));
    for (const auto& t : organ.triangles) tmpl.triangles.push_back({t[0] + base, t[1] + base, t[2] + base});
    tmpl.organ_id.insert(tmpl.organ_id.end(), organ.size(), static_cast<int>(o));
  }
  DeformationParams params;
  params.translation = {uniform(rng, -config.translation_range_mm.x, config.translation_range_mm.x),
                        uniform(rng, -config.translation_range_mm.y, config.translation_range_mm.y),
                        uniform(rng, -config.translation_range_mm.z, config.translation_range_mm.z)};
  for (int a = 0; a < 3; ++a) params.scale[a] = 1.0 + uniform(rng, -config.scale_range, config.scale_range);
  params.bend_amplitude = uniform(rng, -config.bend_range_mm, config.bend_range_mm);
  const auto disp = apply_synthetic_deformation(tmpl, params, mix_seed(seed, 2), config.max_displacement_mm);

  const Camera camera = config.camera();
  RawSample raw;
  Sample& s = raw.sample;
  s.seed = seed;
  s.target.resize(tmpl.size());
  for (std::size_t i = 0; i < tmpl.size(); ++i) s.target[i] = to_float(tmpl.vertices[i] + disp[i]);
  s.template_mesh = tmpl;
  raw.raw_image = render_drr(camera, density_volume(config, s.target_mesh()));
  s.label = render_semantic_label(camera, s.template_mesh);
  s.target_map = render_displacement_map(camera, s.template_mesh, s.displacements());
  if (config.jitter_max_mm > 0.0) {
    Rng jrng(mix_seed(seed, 3));
    const Vec3 j = to_float(random_translation(jrng, config.jitter_max_mm));
    s = apply_jitter(s, camera, j);
  }
  return raw;
}

double image_max(const Image& img) {
  double m = 0.0;
  for (float v : img.pixels) m = std::max(m, static_cast<double>(v));
  return m;
}

}  // namespace

Sample generate_sample(const SampleConfig& config, std::uint64_t seed) {
  auto raw = generate_raw_sample(config, seed);
  const double max = config.drr_max > 0.0 ? config.drr_max : image_max(raw.raw_image);
  raw.sample.image = normalize_image(raw.raw_image, max);
  return raw.sample;
}

LossCalibration identity_calibration(std::span<const Sample> samples) {
  LossCalibration c;
  for (const auto& s : samples) {
    const auto tmpl = to_matrix(s.template_mesh.vertices);
    const auto tgt = to_matrix(s.target);
    c.l_pos = std::max(c.l_pos, static_cast<double>(loss_pos<double>(tmpl, tgt).value));
    c.l_smooth = std::max(c.l_smooth, static_cast<double>(loss_smooth<double>(laplacian_matrix(s.template_mesh), tmpl, tgt).value));
    const nn::Mat<double> zero = nn::Mat<double>::Zero(3, static_cast<Eigen::Index>(s.target_map.pixel_count()));
    c.l_map = std::max(c.l_map, static_cast<double>(loss_map<double>(zero, s.target_map).value));
  }
  return c;
}

Dataset generate_dataset(const SampleConfig& config, int n_train, int n_test, std::uint64_t seed,
                         const std::filesystem::path& dir) {
  if (n_train < 1 || n_test < 0) throw ValidationError("dataset needs at least one training sample");
  config.validate();
  const int n_samples = n_train + n_test;
  std::vector<RawSample> raws;
  raws.reserve(static_cast<std::size_t>(n_samples));
  for (int i = 0; i < n_samples; ++i) raws.push_back(generate_raw_sample(config, mix_seed(seed, static_cast<std::uint64_t>(i))));

  Dataset ds;
  ds.root = dir;
  ds.config = config;
  ds.train_count = n_train;
  if (ds.config.drr_max <= 0.0) {
    double max = 0.0;
    for (int i = 0; i < n_train; ++i) max = std::max(max, image_max(raws[static_cast<std::size_t>(i)].raw_image));
    ds.config.drr_max = to_float(max);
  }
  ds.camera = config.camera();
  double disp_sum = 0.0;
  std::size_t disp_count = 0;
  Box box;
  for (int i = 0; i < n_samples; ++i) {
    auto& r = raws[static_cast<std::size_t>(i)];
    r.sample.image = normalize_image(r.raw_image, ds.config.drr_max);
    if (i < n_train) {
      for (std::size_t v = 0; v < r.sample.target.size(); ++v) {
        disp_sum += norm(r.sample.target[v] - r.sample.template_mesh.vertices[v]);
        box.expand(r.sample.target[v]);
        box.expand(r.sample.template_mesh.vertices[v]);
      }
      disp_count += r.sample.target.size();
    }
    ds.samples.push_back(std::move(r.sample));
  }
  ds.mean_displacement_mm = disp_sum / static_cast<double>(disp_count);
  const Vec3 pad = box.extent() * 0.1;
  box.lo -= pad;
  box.hi += pad;
  box.lo = to_float(box.lo);
  box.hi = to_float(box.hi);
  ds.normalization_box = box;

  nlohmann::json entries = nlohmann::json::array();
  for (int i = 0; i < n_samples; ++i) {
    const auto& s = ds.samples[static_cast<std::size_t>(i)];
    entries.push_back({{"id", i},
                       {"split", i < n_train ? "train" : "test"},
                       {"seed", s.seed},
                       {"image", indexed("img", i, ".tns")},
                       {"label", indexed("lbl", i, ".tns")},
                       {"map", indexed("map", i, ".tns")},
                       {"mesh", indexed("mesh", i, ".obj")},
                       {"target", indexed("target", i, ".tns")},
                       {"jitter", vec_json(s.jitter)}});
  }
  ds.manifest = {{"format", "dreg-dataset-1"},
                 {"seed", seed},
                 {"train_count", n_train},
                 {"test_count", n_test},
                 {"organ_count", ds.organ_count()},
                 {"config", ds.config.to_json()},
                 {"camera",
                  {{"mode", "orthographic"},
                   {"width", ds.camera.width},
                   {"height", ds.camera.height},
                   {"pixel_mm", ds.camera.pixel_mm},
                   {"eye", vec_json(ds.camera.eye)},
                   {"forward", vec_json(ds.camera.forward)},
                   {"up", vec_json(ds.camera.up)}}},
                 {"normalization_box", {{"lo", vec_json(box.lo)}, {"hi", vec_json(box.hi)}}},
                 {"mean_displacement_mm", ds.mean_displacement_mm},
                 {"calibration", identity_calibration(ds.train()).to_json()},
                 {"samples", entries}};
  if (dir.empty()) return ds;

  std::filesystem::create_directories(dir);
  for (int i = 0; i < n_samples; ++i) {
    const auto& s = ds.samples[static_cast<std::size_t>(i)];
    const auto& e = entries[static_cast<std::size_t>(i)];
    save_tns(to_stored(s.image), dir / e["image"].get<std::string>());
    save_tns(to_stored(s.label), dir / e["label"].get<std::string>());
    save_tns(to_stored(s.target_map), dir / e["map"].get<std::string>());
    save_obj(s.template_mesh, dir / e["mesh"].get<std::string>());
    save_tns(to_stored(std::span<const Vec3>(s.target)), dir / e["target"].get<std::string>());
  }
  std::ofstream out(dir / "manifest.json");
  if (!out) throw IoError("cannot write manifest in " + dir.string());
  out << ds.manifest.dump(2) << '\n';
  if (!out) throw IoError("failed writing manifest in " + dir.string());
  return ds;
}

Dataset load_dataset(const std::filesystem::path& dir) {
  if (!std::filesystem::is_regular_file(dir / "manifest.json")) {
    throw ValidationError("no dataset manifest at " + (dir / "manifest.json").string());
  }
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("cannot read " + (dir / "manifest.json").string());
  Dataset ds;
  ds.root = dir;
  try {
    ds.manifest = nlohmann::json::parse(in);
    ds.config = SampleConfig::from_json(ds.manifest.at("config"));
    const auto& cam = ds.manifest.at("camera");
    ds.camera = Camera::orthographic(cam.at("width").get<int>(), cam.at("height").get<int>(),
                                     cam.at("pixel_mm").get<double>(), vec_from_json(cam.at("eye")),
                                     vec_from_json(cam.at("forward")), vec_from_json(cam.at("up")));
    ds.normalization_box.lo = vec_from_json(ds.manifest.at("normalization_box").at("lo"));
    ds.normalization_box.hi = vec_from_json(ds.manifest.at("normalization_box").at("hi"));
    ds.mean_displacement_mm = ds.manifest.at("mean_displacement_mm").get<double>();
    ds.train_count = ds.manifest.at("train_count").get<int>();
    for (const auto& e : ds.manifest.at("samples")) {
      Sample s;
      s.seed = e.at("seed").get<std::uint64_t>();
      s.image = image_from_stored(load_tns(dir / e.at("image").get<std::string>()));
      s.label = label_from_stored(load_tns(dir / e.at("label").get<std::string>()));
      s.target_map = map_from_stored(load_tns(dir / e.at("map").get<std::string>()));
      s.template_mesh = load_obj(dir / e.at("mesh").get<std::string>());
      s.target = points_from_stored(load_tns(dir / e.at("target").get<std::string>()));
      s.jitter = vec_from_json(e.at("jitter"));
      if (s.target.size() != s.template_mesh.size()) throw ValidationError("target/template vertex count mismatch");
      ds.samples.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("malformed dataset manifest: " + std::string(e.what()));
  }
  if (ds.train_count < 1 || ds.train_count > static_cast<int>(ds.samples.size())) {
    throw ValidationError("manifest train_count out of range");
  }
  return ds;
}

}  // namespace dreg
