#include "dreg/statmodel.hpp"

#include <cmath>

#include <Eigen/SVD>

#include "dreg/error.hpp"
#include "dreg/rng.hpp"
#include "dreg/tensor_io.hpp"

namespace dreg {

StatModel fit_pca(std::span<const DisplacementField> fields) {
  if (fields.size() < 2) throw ValidationError("fit_pca needs at least 2 fields");
  const std::size_t n = fields.front().size();
  if (n == 0) throw ValidationError("fit_pca: empty field");
  for (const auto& f : fields) {
    if (f.size() != n) throw ValidationError("fit_pca: fields have different vertex counts");
  }
  const auto rows = static_cast<Eigen::Index>(fields.size());
  const auto cols = static_cast<Eigen::Index>(3 * n);
  Eigen::MatrixXd data(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < n; ++i) {
      for (int a = 0; a < 3; ++a) data(r, static_cast<Eigen::Index>(3 * i + a)) = fields[static_cast<std::size_t>(r)][i][a];
    }
  }
  const double scale = std::max(data.cwiseAbs().maxCoeff(), 1e-300);
  const Eigen::RowVectorXd mean = data.colwise().mean();
  data.rowwise() -= mean;

  StatModel model;
  model.mean.resize(n);
  for (std::size_t i = 0; i < n; ++i) model.mean[i] = {mean(3 * i), mean(3 * i + 1), mean(3 * i + 2)};

  Eigen::JacobiSVD<Eigen::MatrixXd> svd(data, Eigen::ComputeThinV);
  const auto& s = svd.singularValues();
  const double tol = 1e-10 * scale * std::sqrt(static_cast<double>(rows * cols));
  const Eigen::Index max_modes = std::min<Eigen::Index>(rows - 1, cols);
  for (Eigen::Index k = 0; k < max_modes && k < s.size(); ++k) {
    if (!(s(k) > tol)) break;
    Eigen::VectorXd c = svd.matrixV().col(k);
    // Sign convention: first clearly nonzero coordinate positive.
    const double cut = 1e-9 * c.cwiseAbs().maxCoeff();
    for (Eigen::Index j = 0; j < c.size(); ++j) {
      if (std::abs(c(j)) > cut) {
        if (c(j) < 0.0) c = -c;
        break;
      }
    }
    DisplacementField comp(n);
    for (std::size_t i = 0; i < n; ++i) comp[i] = {c(3 * i), c(3 * i + 1), c(3 * i + 2)};
    model.components.push_back(std::move(comp));
    model.stddev.push_back(s(k) / std::sqrt(static_cast<double>(rows - 1)));
  }
  return model;
}

DisplacementField synthesize_displacement(const StatModel& model, std::span<const double> weights) {
  DisplacementField d(model.vertex_count());
  if (weights.empty()) return d;
  for (std::size_t k = model.mode_count() + 1; k < weights.size(); ++k) {
    if (weights[k] != 0.0) throw ValidationError("weight given for a mode the model does not have");
  }
  const double w0 = weights[0];
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = model.mean[i] * w0;
  for (std::size_t k = 1; k < weights.size() && k <= model.mode_count(); ++k) {
    const double w = weights[k] * model.stddev[k - 1];
    if (w == 0.0) continue;
    const auto& comp = model.components[k - 1];
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += comp[i] * w;
  }
  return d;
}

std::vector<double> project_field(const StatModel& model, std::span<const Vec3> field) {
  if (field.size() != model.vertex_count()) throw ValidationError("project_field: vertex count mismatch");
  std::vector<double> w{1.0};
  for (std::size_t k = 0; k < model.mode_count(); ++k) {
    double coef = 0.0;
    for (std::size_t i = 0; i < field.size(); ++i) coef += dot(field[i] - model.mean[i], model.components[k][i]);
    w.push_back(model.stddev[k] > 0.0 ? coef / model.stddev[k] : 0.0);
  }
  return w;
}

AugmentedPair augment_pair(const Mesh& mesh, const StatModel& model, const AugmentConfig& config, std::uint64_t seed) {
  if (model.vertex_count() != mesh.size()) throw ValidationError("augment_pair: model and mesh vertex counts differ");
  if (config.weights.empty()) throw ValidationError("augment config needs at least w0");
  AugmentedPair out;
  out.weights = config.weights;
  if (config.randomize) {
    Rng rng(mix_seed(seed, 0xa5));
    for (auto& w : out.weights) w = uniform(rng, -w, w);
  }
  out.displacement = synthesize_displacement(model, out.weights);
  std::vector<Vec3> moved(mesh.size());
  for (std::size_t i = 0; i < moved.size(); ++i) moved[i] = mesh.vertices[i] - out.displacement[i];
  out.deformed = mesh.with_positions(std::move(moved));
  out.target = mesh.vertices;
  return out;
}

void save_statmodel(const StatModel& model, const std::filesystem::path& path) {
  TensorBundle b;
  const auto n = static_cast<std::uint32_t>(model.vertex_count());
  const auto m = static_cast<std::uint32_t>(model.mode_count());
  b.header = {{"kind", "statmodel"}, {"vertex_count", n}, {"modes", m},
              {"tensors", {"mean", "components", "stddev"}}};
  StoredTensor mean{{n, 3u}, {}};
  for (const auto& v : model.mean) mean.data.insert(mean.data.end(), {float(v.x), float(v.y), float(v.z)});
  StoredTensor comps{{m, n, 3u}, {}};
  for (const auto& c : model.components) {
    for (const auto& v : c) comps.data.insert(comps.data.end(), {float(v.x), float(v.y), float(v.z)});
  }
  StoredTensor sd{{m}, {}};
  for (double s : model.stddev) sd.data.push_back(static_cast<float>(s));
  b.tensors = {{"mean", mean}, {"components", comps}, {"stddev", sd}};
  save_bundle(b, path);
}

StatModel load_statmodel(const std::filesystem::path& path) {
  const auto b = load_bundle(path);
  if (b.header.value("kind", "") != "statmodel") throw ValidationError("not a statmodel bundle: " + path.string());
  StatModel model;
  const auto& mean = b.at("mean");
  const auto& comps = b.at("components");
  const auto& sd = b.at("stddev");
  const std::size_t n = mean.dims.at(0);
  for (std::size_t i = 0; i < n; ++i) model.mean.push_back({mean.data[3 * i], mean.data[3 * i + 1], mean.data[3 * i + 2]});
  const std::size_t m = sd.dims.at(0);
  for (std::size_t k = 0; k < m; ++k) {
    DisplacementField c(n);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t o = (k * n + i) * 3;
      c[i] = {comps.data[o], comps.data[o + 1], comps.data[o + 2]};
    }
    model.components.push_back(std::move(c));
    model.stddev.push_back(sd.data[k]);
  }
  return model;
}

}  // namespace dreg
