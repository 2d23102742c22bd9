#include "dreg/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "dreg/error.hpp"
#include "dreg/rng.hpp"

namespace dreg {

RegMode reg_mode_from_string(const std::string& s) {
  if (s == "sr") return RegMode::sr;
  if (s == "mr") return RegMode::mr;
  throw ValidationError("mode must be sr or mr, got '" + s + "'");
}

std::string to_string(RegMode mode) { return mode == RegMode::sr ? "sr" : "mr"; }

// ---------------------------------------------------------------- config

void TrainConfig::validate() const {
  if (epochs < 1) throw ValidationError("epochs must be >= 1");
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ValidationError("lr must be positive");
  if (weights.mu < 0.0 || weights.lambda < 0.0) throw ValidationError("mu and lambda must be non-negative");
  if (augment_fraction < 0.0 || augment_fraction > 1.0) throw ValidationError("augment_fraction must be in [0, 1]");
  if (augment_config.weights.empty()) throw ValidationError("augment_weights needs at least the mean weight");
  for (double w : augment_config.weights) {
    if (!std::isfinite(w)) throw ValidationError("augment weights must be finite");
  }
  if (jitter_scale < 0.0) throw ValidationError("jitter_scale must be non-negative");
  if (organ < 0) throw ValidationError("organ must be non-negative");
  if (bridge_count < 0) throw ValidationError("bridge_count must be non-negative");
  arch.validate();
}

const std::set<std::string>& train_config_keys() {
  static const std::set<std::string> keys{"epochs",
                                          "batch_size",
                                          "lr",
                                          "mu",
                                          "lambda",
                                          "seed",
                                          "data",
                                          "augment",
                                          "augment_weights",
                                          "augment_randomize",
                                          "augment_fraction",
                                          "statmodel",
                                          "jitter",
                                          "jitter_scale",
                                          "mode",
                                          "organ",
                                          "bridge_count",
                                          "arch.widths",
                                          "arch.gcn_hidden",
                                          "arch.gcn_layers",
                                          "arch.map_scale_mm",
                                          "arch.zero_init_heads",
                                          "arch.map_skip"};
  return keys;
}

TrainConfig TrainConfig::from_config(const KeyValueConfig& kv) {
  TrainConfig c;
  c.epochs = kv.get_int("epochs", c.epochs);
  c.batch_size = kv.get_int("batch_size", c.batch_size);
  c.lr = kv.get_double("lr", c.lr);
  c.weights.mu = kv.get_double("mu", c.weights.mu);
  c.weights.lambda = kv.get_double("lambda", c.weights.lambda);
  c.seed = kv.get_u64("seed", c.seed);
  c.data_dir = kv.get("data", "");
  c.augment = kv.get_bool("augment", c.augment);
  c.augment_config.weights = kv.get_doubles("augment_weights", c.augment_config.weights);
  c.augment_config.randomize = kv.get_bool("augment_randomize", c.augment_config.randomize);
  c.augment_fraction = kv.get_double("augment_fraction", c.augment_fraction);
  c.statmodel_path = kv.get("statmodel", "");
  c.jitter = kv.get_bool("jitter", c.jitter);
  c.jitter_scale = kv.get_double("jitter_scale", c.jitter_scale);
  c.mode = reg_mode_from_string(kv.get("mode", to_string(c.mode)));
  c.organ = kv.get_int("organ", c.organ);
  c.bridge_count = kv.get_int("bridge_count", c.bridge_count);
  c.arch.widths = kv.get_ints("arch.widths", c.arch.widths);
  c.arch.gcn_hidden = kv.get_int("arch.gcn_hidden", c.arch.gcn_hidden);
  c.arch.gcn_layers = kv.get_int("arch.gcn_layers", c.arch.gcn_layers);
  c.arch.map_scale_mm = kv.get_double("arch.map_scale_mm", c.arch.map_scale_mm);
  c.arch.zero_init_heads = kv.get_bool("arch.zero_init_heads", c.arch.zero_init_heads);
  c.arch.map_skip = kv.get_bool("arch.map_skip", c.arch.map_skip);
  c.validate();
  return c;
}

KeyValueConfig TrainConfig::to_config() const {
  KeyValueConfig kv;
  kv.set("epochs", std::to_string(epochs));
  kv.set("batch_size", std::to_string(batch_size));
  kv.set("lr", format_double(lr));
  kv.set("mu", format_double(weights.mu));
  kv.set("lambda", format_double(weights.lambda));
  kv.set("seed", std::to_string(seed));
  kv.set("data", data_dir.string());
  kv.set("augment", augment ? "true" : "false");
  kv.set("augment_weights", join_doubles(augment_config.weights));
  kv.set("augment_randomize", augment_config.randomize ? "true" : "false");
  kv.set("augment_fraction", format_double(augment_fraction));
  kv.set("statmodel", statmodel_path.string());
  kv.set("jitter", jitter ? "true" : "false");
  kv.set("jitter_scale", format_double(jitter_scale));
  kv.set("mode", to_string(mode));
  kv.set("organ", std::to_string(organ));
  kv.set("bridge_count", std::to_string(bridge_count));
  std::string widths;
  for (std::size_t i = 0; i < arch.widths.size(); ++i) widths += (i ? "," : "") + std::to_string(arch.widths[i]);
  kv.set("arch.widths", widths);
  kv.set("arch.gcn_hidden", std::to_string(arch.gcn_hidden));
  kv.set("arch.gcn_layers", std::to_string(arch.gcn_layers));
  kv.set("arch.map_scale_mm", format_double(arch.map_scale_mm));
  kv.set("arch.zero_init_heads", arch.zero_init_heads ? "true" : "false");
  kv.set("arch.map_skip", arch.map_skip ? "true" : "false");
  return kv;
}

std::uint64_t TrainConfig::hash() const {
  // Paths are left out so relocated datasets train to identical checkpoints.
  KeyValueConfig kv = to_config();
  kv.erase("data");
  kv.erase("statmodel");
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : kv.dump()) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

// ---------------------------------------------------------------- cases

RegistrationCase make_case(const Camera& camera, const Sample& sample, int id, RegMode mode, int organ,
                           int bridge_count) {
  RegistrationCase c;
  c.id = id;
  c.image = sample.image;
  const int organs = sample.template_mesh.organ_count();
  if (mode == RegMode::sr) {
    if (organ < 0 || organ >= organs) throw ValidationError("organ index " + std::to_string(organ) + " out of range");
    c.mesh = sample.template_mesh.extract_organ(organ);
    for (auto i : sample.template_mesh.organ_vertices(organ)) c.target.push_back(sample.target[i]);
    c.organ_count = 1;
  } else {
    c.mesh = organs > 1 ? compose_organs(sample.template_mesh, bridge_count) : sample.template_mesh;
    c.target = sample.target;
    c.organ_count = organs;
  }
  std::vector<Vec3> disp(c.target.size());
  for (std::size_t i = 0; i < disp.size(); ++i) disp[i] = c.target[i] - c.mesh.vertices[i];
  c.label = render_semantic_label(camera, c.mesh);
  c.map = render_displacement_map(camera, c.mesh, disp);
  return c;
}

RegistrationCase with_case_template(const Camera& camera, const RegistrationCase& c, std::vector<Vec3> positions) {
  RegistrationCase out = c;
  out.mesh = c.mesh.with_positions(std::move(positions));
  std::vector<Vec3> disp(c.target.size());
  for (std::size_t i = 0; i < disp.size(); ++i) disp[i] = c.target[i] - out.mesh.vertices[i];
  out.label = render_semantic_label(camera, out.mesh);
  out.map = render_displacement_map(camera, out.mesh, disp);
  return out;
}

namespace {

ModelInput case_input(const Camera& camera, const RegistrationCase& c, const CoordinateNormalizer& normalizer) {
  return prepare_input(camera, c.image, c.label, c.organ_count, c.mesh, normalizer);
}

template <typename T>
struct StepLosses {
  LossTerm<T> pos;
  LossTerm<T> map;
  LossTerm<T> smooth;
};

template <typename T>
StepLosses<T> compute_losses(const typename nn::Model<T>::Output& out, const Eigen::SparseMatrix<double, Eigen::RowMajor>& lap,
                             const nn::Mat<T>& target, const DisplacementMap& map) {
  return {loss_pos<T>(out.positions, target), loss_map<T>(out.map.v, map), loss_smooth<T>(lap, out.positions, target)};
}

std::vector<Vec3> positions_of(const nn::Mat<float>& m) {
  std::vector<Vec3> out(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) out[static_cast<std::size_t>(i)] = {m(i, 0), m(i, 1), m(i, 2)};
  return out;
}

double max_or_one(double v) { return v > 0.0 && std::isfinite(v) ? v : 1.0; }

Vec3 draw_jitter(Rng& rng, double bound) {
  const Vec3 t = random_translation(rng, bound);
  return {static_cast<double>(static_cast<float>(t.x)), static_cast<double>(static_cast<float>(t.y)),
          static_cast<double>(static_cast<float>(t.z))};
}

void shuffle(std::vector<int>& order, Rng& rng) {
  for (std::size_t i = order.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng() % i);
    std::swap(order[i - 1], order[j]);
  }
}

nlohmann::json box_json(const Box& b) {
  return {{"lo", {b.lo.x, b.lo.y, b.lo.z}}, {"hi", {b.hi.x, b.hi.y, b.hi.z}}};
}

Box box_from_json(const nlohmann::json& j) {
  Box b;
  for (int a = 0; a < 3; ++a) {
    b.lo[a] = j.at("lo").at(a).get<double>();
    b.hi[a] = j.at("hi").at(a).get<double>();
  }
  return b;
}

}  // namespace

LossCalibration calibrate(const nn::Model<float>& model, const std::vector<RegistrationCase>& cases,
                          const Camera& camera, const CoordinateNormalizer& normalizer) {
  LossCalibration cal;
  for (const auto& c : cases) {
    const auto in = case_input(camera, c, normalizer);
    nn::Model<float>::Cache cache;
    const auto out = model.forward(in, cache);
    const nn::Mat<float> target = to_matrix(c.target).cast<float>();
    const auto l = compute_losses<float>(out, laplacian_matrix(c.mesh), target, c.map);
    cal.l_pos = std::max(cal.l_pos, static_cast<double>(l.pos.value));
    cal.l_map = std::max(cal.l_map, static_cast<double>(l.map.value));
    cal.l_smooth = std::max(cal.l_smooth, static_cast<double>(l.smooth.value));
  }
  cal.l_pos = max_or_one(cal.l_pos);
  cal.l_map = max_or_one(cal.l_map);
  cal.l_smooth = max_or_one(cal.l_smooth);
  return cal;
}

// ---------------------------------------------------------------- checkpoint

TensorBundle Checkpoint::to_bundle() const {
  nlohmann::json header{{"kind", "checkpoint"},
                        {"mode", to_string(mode)},
                        {"organ", organ},
                        {"organ_count", organ_count},
                        {"bridge_count", bridge_count},
                        {"normalization_box", box_json(normalization_box)},
                        {"calibration", calibration.to_json()},
                        {"epoch", epoch},
                        {"seed", seed},
                        {"config_hash", config_hash}};
  return model_to_bundle(model, std::move(header));
}

Checkpoint Checkpoint::from_bundle(const TensorBundle& bundle) {
  Checkpoint c;
  try {
    const auto& h = bundle.header;
    if (h.value("kind", "") != "checkpoint") throw ValidationError("bundle is not a checkpoint");
    c.model = model_from_bundle(bundle);
    c.mode = reg_mode_from_string(h.at("mode").get<std::string>());
    c.organ = h.at("organ").get<int>();
    c.organ_count = h.at("organ_count").get<int>();
    c.bridge_count = h.at("bridge_count").get<int>();
    c.normalization_box = box_from_json(h.at("normalization_box"));
    c.calibration = LossCalibration::from_json(h.at("calibration"));
    c.epoch = h.at("epoch").get<int>();
    c.seed = h.at("seed").get<std::uint64_t>();
    c.config_hash = h.at("config_hash").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed checkpoint header: ") + e.what());
  }
  return c;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  save_bundle(checkpoint.to_bundle(), path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return Checkpoint::from_bundle(load_bundle(path)); }

// ---------------------------------------------------------------- training

TrainResult train(const TrainConfig& config, const Dataset& dataset, const std::filesystem::path& failure_checkpoint) {
  config.validate();
  const auto start = std::chrono::steady_clock::now();
  if (dataset.train_count < 1) throw ValidationError("dataset has no training samples");
  if (config.mode == RegMode::sr && config.organ >= dataset.organ_count()) {
    throw ValidationError("organ index exceeds the dataset's organ count");
  }
  const Camera& camera = dataset.camera;
  const CoordinateNormalizer normalizer(dataset.normalization_box);

  ArchConfig arch = config.arch;
  arch.image_width = camera.width;
  arch.image_height = camera.height;
  arch.init_seed = config.seed;

  std::vector<RegistrationCase> cases;
  std::vector<ModelInput> inputs;
  std::vector<Eigen::SparseMatrix<double, Eigen::RowMajor>> laplacians;
  std::vector<nn::Mat<float>> targets;
  for (int i = 0; i < dataset.train_count; ++i) {
    cases.push_back(make_case(camera, dataset.samples[static_cast<std::size_t>(i)], i, config.mode, config.organ,
                              config.bridge_count));
    inputs.push_back(case_input(camera, cases.back(), normalizer));
    laplacians.push_back(laplacian_matrix(cases.back().mesh));
    targets.push_back(to_matrix(cases.back().target).cast<float>());
  }

  StatModel stat;
  if (config.augment) {
    if (!config.statmodel_path.empty()) {
      stat = load_statmodel(config.statmodel_path);
    } else {
      std::vector<DisplacementField> fields;
      for (const auto& c : cases) {
        if (c.target.size() != cases.front().target.size()) {
          throw ValidationError("augmentation needs equal vertex counts across training samples");
        }
        DisplacementField f(c.target.size());
        for (std::size_t v = 0; v < f.size(); ++v) f[v] = c.target[v] - c.mesh.vertices[v];
        fields.push_back(std::move(f));
      }
      stat = fit_pca(fields);
    }
    if (stat.vertex_count() != cases.front().target.size()) {
      throw ValidationError("statistical model vertex count does not match the training meshes");
    }
  }

  Checkpoint ckpt;
  ckpt.model = nn::Model<float>(arch);
  ckpt.mode = config.mode;
  ckpt.organ = config.mode == RegMode::sr ? config.organ : 0;
  ckpt.organ_count = dataset.organ_count();
  ckpt.bridge_count = config.bridge_count;
  ckpt.normalization_box = dataset.normalization_box;
  ckpt.seed = config.seed;
  ckpt.config_hash = config.hash();
  ckpt.calibration = calibrate(ckpt.model, cases, camera, normalizer);

  TrainResult result;
  result.record.config_hash = ckpt.config_hash;
  result.record.calibration = ckpt.calibration;

  nn::Model<float>& model = ckpt.model;
  const auto params = model.params();
  nn::AdamState<float> adam;
  nn::AdamOptions adam_options;
  adam_options.lr = config.lr;
  Rng rng(mix_seed(config.seed, 0x7a11));
  const double jitter_bound = config.jitter_scale * dataset.mean_displacement_mm;
  const double inv_pos = 1.0 / ckpt.calibration.l_pos;
  const double inv_map = config.weights.mu / ckpt.calibration.l_map;
  const double inv_smooth = config.weights.lambda / ckpt.calibration.l_smooth;

  auto fail = [&](const std::string& what) {
    if (!failure_checkpoint.empty()) save_checkpoint(ckpt, failure_checkpoint);
    throw NumericError(what);
  };

  std::vector<nn::Mat<float>> last_good;
  std::vector<int> order(cases.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    shuffle(order, rng);
    EpochRecord rec;
    rec.epoch = epoch;
    model.zero_grad();
    int in_batch = 0;
    for (std::size_t k = 0; k < order.size(); ++k) {
      const auto idx = static_cast<std::size_t>(order[k]);
      const RegistrationCase* c = &cases[idx];
      const ModelInput* in = &inputs[idx];
      RegistrationCase moved_case;
      ModelInput moved_input;
      std::vector<Vec3> positions;
      if (config.augment && uniform(rng, 0.0, 1.0) < config.augment_fraction) {
        const auto pair = augment_pair(c->mesh.with_positions(c->target), stat, config.augment_config, rng());
        positions = pair.deformed.vertices;
      }
      if (config.jitter && jitter_bound > 0.0) {
        if (positions.empty()) positions = c->mesh.vertices;
        const Vec3 t = draw_jitter(rng, jitter_bound);
        for (auto& p : positions) p += t;
      }
      if (!positions.empty()) {
        moved_case = with_case_template(camera, *c, std::move(positions));
        moved_input = case_input(camera, moved_case, normalizer);
        c = &moved_case;
        in = &moved_input;
      }

      nn::Model<float>::Cache cache;
      const auto out = model.forward(*in, cache);
      const auto l = compute_losses<float>(out, laplacians[idx], targets[idx], c->map);
      const auto report = total_loss(l.pos.value, l.map.value, l.smooth.value, ckpt.calibration, config.weights);
      if (!std::isfinite(report.total)) {
        fail("non-finite loss at epoch " + std::to_string(epoch) + ", sample " + std::to_string(c->id));
      }
      rec.mean.l_pos += report.l_pos;
      rec.mean.l_map += report.l_map;
      rec.mean.l_smooth += report.l_smooth;
      rec.mean.total += report.total;
      rec.mean.raw_pos += report.raw_pos;
      rec.mean.raw_map += report.raw_map;
      rec.mean.raw_smooth += report.raw_smooth;

      const std::size_t batch_start = k - static_cast<std::size_t>(in_batch);
      const std::size_t batch_len = std::min<std::size_t>(config.batch_size, order.size() - batch_start);
      const float scale = 1.0f / static_cast<float>(batch_len);
      const nn::Mat<float> d_map = l.map.grad * static_cast<float>(inv_map * scale);
      const nn::Mat<float> d_pos =
          l.pos.grad * static_cast<float>(inv_pos * scale) + l.smooth.grad * static_cast<float>(inv_smooth * scale);
      model.backward(cache, d_map, d_pos);
      if (++in_batch == static_cast<int>(batch_len)) {
        last_good.clear();
        for (const auto* p : params) last_good.push_back(p->value);
        try {
          nn::adam_step(params, adam, adam_options);
        } catch (const NumericError& e) {
          fail(std::string(e.what()) + " at epoch " + std::to_string(epoch));
        }
        for (std::size_t q = 0; q < params.size(); ++q) {
          if (params[q]->value.allFinite()) continue;
          for (std::size_t r = 0; r < params.size(); ++r) params[r]->value = last_good[r];
          fail("non-finite parameter " + params[q]->name + " at epoch " + std::to_string(epoch));
        }
        ++result.record.optimizer_steps;
        model.zero_grad();
        in_batch = 0;
      }
    }
    const double n = static_cast<double>(order.size());
    rec.mean.l_pos /= n;
    rec.mean.l_map /= n;
    rec.mean.l_smooth /= n;
    rec.mean.total /= n;
    rec.mean.raw_pos /= n;
    rec.mean.raw_map /= n;
    rec.mean.raw_smooth /= n;
    result.record.epochs.push_back(rec);
    ckpt.epoch = epoch;
  }
  result.checkpoint = std::move(ckpt);
  result.record.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

// ---------------------------------------------------------------- evaluation

namespace {

MetricReport mean_of(const std::vector<MetricReport>& v) {
  MetricReport m;
  for (const auto& r : v) {
    m.md_mm += r.md_mm;
    m.hd_mm += r.hd_mm;
    m.mae_mm += r.mae_mm;
    m.dsc_percent += r.dsc_percent;
  }
  const double n = v.empty() ? 1.0 : static_cast<double>(v.size());
  m.md_mm /= n;
  m.hd_mm /= n;
  m.mae_mm /= n;
  m.dsc_percent /= n;
  return m;
}

MetricSummary summarize(const std::vector<MetricReport>& v) {
  MetricSummary s;
  s.mean = mean_of(v);
  if (v.size() > 1) {
    for (const auto& r : v) {
      s.stddev.md_mm += (r.md_mm - s.mean.md_mm) * (r.md_mm - s.mean.md_mm);
      s.stddev.hd_mm += (r.hd_mm - s.mean.hd_mm) * (r.hd_mm - s.mean.hd_mm);
      s.stddev.mae_mm += (r.mae_mm - s.mean.mae_mm) * (r.mae_mm - s.mean.mae_mm);
      s.stddev.dsc_percent += (r.dsc_percent - s.mean.dsc_percent) * (r.dsc_percent - s.mean.dsc_percent);
    }
    const double d = static_cast<double>(v.size() - 1);
    s.stddev.md_mm = std::sqrt(s.stddev.md_mm / d);
    s.stddev.hd_mm = std::sqrt(s.stddev.hd_mm / d);
    s.stddev.mae_mm = std::sqrt(s.stddev.mae_mm / d);
    s.stddev.dsc_percent = std::sqrt(s.stddev.dsc_percent / d);
  }
  return s;
}

nlohmann::json summary_to_json(const MetricSummary& s) {
  return {{"md_mm", {{"mean", s.mean.md_mm}, {"std", s.stddev.md_mm}}},
          {"hd_mm", {{"mean", s.mean.hd_mm}, {"std", s.stddev.hd_mm}}},
          {"mae_mm", {{"mean", s.mean.mae_mm}, {"std", s.stddev.mae_mm}}},
          {"dsc_percent", {{"mean", s.mean.dsc_percent}, {"std", s.stddev.dsc_percent}}}};
}

std::string fixed(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

std::string metric_fields(const MetricReport& r) {
  return fixed(r.md_mm) + "," + fixed(r.hd_mm) + "," + fixed(r.mae_mm) + "," + fixed(r.dsc_percent);
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

}  // namespace

MetricReport SampleMetrics::mean_initial() const { return mean_of(initial); }
MetricReport SampleMetrics::mean_predicted() const { return mean_of(predicted); }

MetricSummary EvalReport::initial() const {
  std::vector<MetricReport> v;
  for (const auto& s : samples) v.push_back(s.mean_initial());
  return summarize(v);
}

MetricSummary EvalReport::predicted() const {
  std::vector<MetricReport> v;
  for (const auto& s : samples) v.push_back(s.mean_predicted());
  return summarize(v);
}

MetricSummary EvalReport::initial_organ(std::size_t k) const {
  std::vector<MetricReport> v;
  for (const auto& s : samples) v.push_back(s.initial.at(k));
  return summarize(v);
}

MetricSummary EvalReport::predicted_organ(std::size_t k) const {
  std::vector<MetricReport> v;
  for (const auto& s : samples) v.push_back(s.predicted.at(k));
  return summarize(v);
}

nlohmann::json EvalReport::summary_json() const {
  nlohmann::json organs_json = nlohmann::json::array();
  for (std::size_t k = 0; k < organs.size(); ++k) {
    organs_json.push_back({{"organ", organs[k]},
                           {"initial", summary_to_json(initial_organ(k))},
                           {"predicted", summary_to_json(predicted_organ(k))}});
  }
  return {{"sample_count", samples.size()},
          {"initial", summary_to_json(initial())},
          {"predicted", summary_to_json(predicted())},
          {"organs", organs_json}};
}

EvalReport evaluate(const Checkpoint& checkpoint, const Dataset& dataset, const EvalOptions& options,
                    const std::vector<int>& ids) {
  const Camera& camera = dataset.camera;
  const auto& arch = checkpoint.model.config();
  if (arch.image_width != camera.width || arch.image_height != camera.height) {
    throw ValidationError("checkpoint image size does not match the dataset camera");
  }
  if (!(checkpoint.normalization_box.lo == dataset.normalization_box.lo &&
        checkpoint.normalization_box.hi == dataset.normalization_box.hi)) {
    throw ValidationError("checkpoint normalization box does not match the dataset");
  }
  if (checkpoint.organ_count != dataset.organ_count()) {
    throw ValidationError("checkpoint organ count does not match the dataset");
  }
  std::vector<int> selected = ids;
  if (selected.empty()) {
    for (int i = dataset.train_count; i < static_cast<int>(dataset.samples.size()); ++i) selected.push_back(i);
  }
  if (selected.empty()) throw ValidationError("no samples to evaluate");

  EvalReport report;
  if (checkpoint.mode == RegMode::sr) {
    report.organs = {checkpoint.organ};
  } else {
    for (int o = 0; o < dataset.organ_count(); ++o) report.organs.push_back(o);
  }
  const CoordinateNormalizer normalizer(checkpoint.normalization_box);
  const double jitter_bound = options.jitter_scale * dataset.mean_displacement_mm;
  for (int id : selected) {
    if (id < 0 || id >= static_cast<int>(dataset.samples.size())) throw ValidationError("sample id out of range");
    const Sample& original = dataset.samples[static_cast<std::size_t>(id)];
    SampleMetrics row;
    row.id = id;
    Sample jittered;
    const Sample* sample = &original;
    if (options.jitter && jitter_bound > 0.0) {
      Rng rng(mix_seed(options.eval_seed, static_cast<std::uint64_t>(id)));
      row.jitter = draw_jitter(rng, jitter_bound);
      jittered = apply_jitter(original, camera, row.jitter);
      sample = &jittered;
    }
    const auto c = make_case(camera, *sample, id, checkpoint.mode, checkpoint.organ, checkpoint.bridge_count);
    const auto in = case_input(camera, c, normalizer);
    nn::Model<float>::Cache cache;
    const auto out = checkpoint.model.forward(in, cache);
    const Mesh predicted = c.mesh.with_positions(positions_of(out.positions));
    const Mesh target = c.mesh.with_positions(c.target);
    for (std::size_t k = 0; k < report.organs.size(); ++k) {
      const int local = checkpoint.mode == RegMode::sr ? 0 : report.organs[k];
      const Mesh t = target.extract_organ(local);
      row.initial.push_back(evaluate_metrics(c.mesh.extract_organ(local), t, options.dsc_voxel_mm));
      row.predicted.push_back(evaluate_metrics(predicted.extract_organ(local), t, options.dsc_voxel_mm));
    }
    report.samples.push_back(std::move(row));
  }
  return report;
}

void write_metrics_csv(const EvalReport& report, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "id,init_md,init_hd,init_mae,init_dsc,md,hd,mae,dsc\n";
  for (const auto& s : report.samples) {
    out << s.id << ',' << metric_fields(s.mean_initial()) << ',' << metric_fields(s.mean_predicted()) << '\n';
  }
  out << "mean," << metric_fields(report.initial().mean) << ',' << metric_fields(report.predicted().mean) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

void write_curve_csv(const RunRecord& record, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "epoch,total,l_pos,l_map,l_smooth,raw_pos,raw_map,raw_smooth\n";
  for (const auto& e : record.epochs) {
    const auto& m = e.mean;
    out << e.epoch << ',' << fixed(m.total) << ',' << fixed(m.l_pos) << ',' << fixed(m.l_map) << ','
        << fixed(m.l_smooth) << ',' << fixed(m.raw_pos) << ',' << fixed(m.raw_map) << ',' << fixed(m.raw_smooth)
        << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

// ---------------------------------------------------------------- experiment

ExperimentReport run_experiment(const TrainConfig& config, const Dataset& dataset, const EvalOptions& options) {
  if (dataset.organ_count() < 2) throw ValidationError("the SR/MR experiment needs a dataset with at least two organs");
  ExperimentReport report;
  TrainConfig mr = config;
  mr.mode = RegMode::mr;
  mr.organ = 0;
  report.mr = train(mr, dataset);
  const auto mr_eval = evaluate(report.mr.checkpoint, dataset, options);
  for (int o = 0; o < dataset.organ_count(); ++o) {
    TrainConfig sr = config;
    sr.mode = RegMode::sr;
    sr.organ = o;
    report.sr.push_back(train(sr, dataset));
    const auto sr_eval = evaluate(report.sr.back().checkpoint, dataset, options);
    OrganComparison cmp;
    cmp.organ = o;
    cmp.initial = mr_eval.initial_organ(static_cast<std::size_t>(o));
    cmp.mr = mr_eval.predicted_organ(static_cast<std::size_t>(o));
    cmp.sr = sr_eval.predicted_organ(0);
    report.organs.push_back(cmp);
  }
  return report;
}

void write_experiment_csv(const ExperimentReport& report, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "organ,arm,md,md_std,hd,hd_std,mae,mae_std,dsc,dsc_std\n";
  auto row = [&](int organ, const char* arm, const MetricSummary& s) {
    out << organ << ',' << arm << ',' << fixed(s.mean.md_mm) << ',' << fixed(s.stddev.md_mm) << ','
        << fixed(s.mean.hd_mm) << ',' << fixed(s.stddev.hd_mm) << ',' << fixed(s.mean.mae_mm) << ','
        << fixed(s.stddev.mae_mm) << ',' << fixed(s.mean.dsc_percent) << ',' << fixed(s.stddev.dsc_percent) << '\n';
  };
  for (const auto& o : report.organs) {
    row(o.organ, "initial", o.initial);
    row(o.organ, "sr", o.sr);
    row(o.organ, "mr", o.mr);
  }
  if (!out) throw IoError("failed writing " + path.string());
}

// ---------------------------------------------------------------- overlays

Overlay render_overlay(const Camera& camera, const Image& image, std::span<const Vec3> target,
                       std::span<const Vec3> predicted) {
  if (image.width != camera.width || image.height != camera.height) {
    throw ValidationError("overlay image does not match the camera");
  }
  Overlay o;
  o.image = RgbImage(image.width, image.height);
  // PNG rows run top-down; camera y grows along the up axis.
  auto row = [&](int y) { return image.height - 1 - y; };
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      const auto g = static_cast<std::uint8_t>(std::lround(std::clamp(image.at(x, y), 0.0f, 1.0f) * 255.0f));
      o.image.put(x, row(y), g, g, g);
    }
  }
  auto plot = [&](std::span<const Vec3> pts, std::vector<std::pair<int, int>>& pixels, std::uint8_t r,
                  std::uint8_t g, std::uint8_t b) {
    for (const auto& p : pts) {
      const auto q = camera.project(p);
      if (!q.valid) continue;
      const int x = static_cast<int>(std::lround(q.x));
      const int y = static_cast<int>(std::lround(q.y));
      if (x < 0 || y < 0 || x >= image.width || y >= image.height) continue;
      pixels.emplace_back(x, y);
      o.image.put(x, row(y), r, g, b);
    }
  };
  plot(target, o.target_pixels, 255, 0, 255);
  plot(predicted, o.predicted_pixels, 0, 255, 255);
  return o;
}

Overlay render_overlay(const Checkpoint& checkpoint, const Dataset& dataset, int sample_id) {
  if (sample_id < 0 || sample_id >= static_cast<int>(dataset.samples.size())) {
    throw ValidationError("sample id out of range");
  }
  const auto& sample = dataset.samples[static_cast<std::size_t>(sample_id)];
  const auto c = make_case(dataset.camera, sample, sample_id, checkpoint.mode, checkpoint.organ, checkpoint.bridge_count);
  const auto in = case_input(dataset.camera, c, CoordinateNormalizer(checkpoint.normalization_box));
  nn::Model<float>::Cache cache;
  const auto out = checkpoint.model.forward(in, cache);
  const auto predicted = positions_of(out.positions);
  return render_overlay(dataset.camera, sample.image, c.target, predicted);
}

// ---------------------------------------------------------------- gradcheck

bool GradcheckReport::passed() const {
  return std::all_of(entries.begin(), entries.end(), [](const GradcheckEntry& e) { return e.passed; });
}

double GradcheckReport::max_rel_error() const {
  double m = 0.0;
  for (const auto& e : entries) m = std::max(m, e.max_rel_error);
  return m;
}

namespace {

double rel_error(double analytic, double numeric) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / scale;
}

// Central difference of f around *x, restoring *x afterwards.
template <typename F>
double central_difference(double* x, double h, F&& f) {
  const double saved = *x;
  *x = saved + h;
  const double plus = f();
  *x = saved - h;
  const double minus = f();
  *x = saved;
  return (plus - minus) / (2.0 * h);
}

std::vector<Eigen::Index> pick_entries(Eigen::Index size, int count, Rng& rng) {
  std::vector<Eigen::Index> idx;
  if (size <= count) {
    for (Eigen::Index i = 0; i < size; ++i) idx.push_back(i);
    return idx;
  }
  while (static_cast<int>(idx.size()) < count) {
    const auto i = static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(size));
    if (std::find(idx.begin(), idx.end(), i) == idx.end()) idx.push_back(i);
  }
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

GradcheckReport run_gradcheck(const GradcheckOptions& options) {
  const auto start = std::chrono::steady_clock::now();
  GradcheckReport report;
  Rng rng(mix_seed(options.seed, 0x9c));

  const SampleConfig smoke = SampleConfig::smoke();
  const Dataset data = generate_dataset(smoke, 1, 0, options.seed);
  const Sample& sample = data.samples.front();
  const Camera& camera = data.camera;
  const auto c = make_case(camera, sample, 0, RegMode::mr, 0, kDefaultBridgeCount);
  const auto in = case_input(camera, c, CoordinateNormalizer(data.normalization_box));
  const auto lap = laplacian_matrix(c.mesh);
  const nn::Mat<double> target = to_matrix(c.target);

  ArchConfig arch;
  arch.image_width = camera.width;
  arch.image_height = camera.height;
  arch.widths = {4, 8};
  arch.gcn_hidden = 16;
  arch.zero_init_heads = false;
  arch.init_seed = options.seed;
  nn::Model<double> model(arch);
  // Larger head weights make the map path matter at this scale.
  for (auto* p : model.params()) {
    if (p->name.rfind("gen.head", 0) == 0) p->value *= 4.0;
  }
  const LossCalibration cal = identity_calibration(data.train());
  const LossWeights weights;

  // Probes whose +/- step flips any ReLU or the sign inside |u - û| are
  // redrawn: a difference quotient across a kink is not a derivative.
  auto objective = [&](std::vector<bool>* pattern) {
    nn::Model<double>::Cache cache;
    const auto out = model.forward(in, cache);
    const auto l = compute_losses<double>(out, lap, target, c.map);
    if (pattern) {
      pattern->clear();
      auto add = [&](const nn::Mat<double>& m) {
        for (Eigen::Index i = 0; i < m.size(); ++i) pattern->push_back(m.data()[i] > 0.0);
      };
      const auto& g = cache.generator;
      for (const auto& f : g.enc_out) add(f.v);
      add(g.bottleneck_out.v);
      for (const auto& f : g.dec_out) add(f.v);
      for (const auto& layer : cache.deformer.layers) add(layer.output);
      for (Eigen::Index p = 0; p < out.map.v.cols(); ++p) {
        if (!c.map.mask[static_cast<std::size_t>(p)]) continue;
        for (Eigen::Index ch = 0; ch < 3; ++ch) {
          pattern->push_back(out.map.v(ch, p) > c.map.data[static_cast<std::size_t>(ch * out.map.v.cols() + p)]);
        }
      }
    }
    return total_loss(l.pos.value, l.map.value, l.smooth.value, cal, weights).total;
  };

  // Parameter gradients of the full objective.
  model.zero_grad();
  {
    nn::Model<double>::Cache cache;
    const auto out = model.forward(in, cache);
    const auto l = compute_losses<double>(out, lap, target, c.map);
    const nn::Mat<double> d_map = l.map.grad * (weights.mu / cal.l_map);
    const nn::Mat<double> d_pos = l.pos.grad / cal.l_pos + l.smooth.grad * (weights.lambda / cal.l_smooth);
    model.backward(cache, d_map, d_pos);
  }
  std::vector<bool> base, plus, minus;
  objective(&base);
  for (auto* p : model.params()) {
    GradcheckEntry e;
    e.name = p->name;
    const auto size = p->value.size();
    const auto wanted = std::min<Eigen::Index>(size, options.entries_per_tensor);
    std::vector<Eigen::Index> tried;
    while (static_cast<Eigen::Index>(e.checked) < wanted && static_cast<Eigen::Index>(tried.size()) < size) {
      const auto i = static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(size));
      if (std::find(tried.begin(), tried.end(), i) != tried.end()) continue;
      tried.push_back(i);
      double* x = p->value.data() + i;
      const double saved = *x;
      *x = saved + options.step;
      const double fp = objective(&plus);
      *x = saved - options.step;
      const double fm = objective(&minus);
      *x = saved;
      if (plus != base || minus != base) {
        ++e.skipped;
        continue;
      }
      const double numeric = (fp - fm) / (2.0 * options.step);
      e.max_rel_error = std::max(e.max_rel_error, rel_error(p->grad.data()[i], numeric));
      ++e.checked;
    }
    e.passed = e.checked > 0 && e.max_rel_error < options.tolerance;
    report.entries.push_back(e);
  }

  // Vertex sampler: f(map) = sum(w .* sample(map)).
  {
    nn::Mat<double> map = nn::Mat<double>::Random(3, static_cast<Eigen::Index>(camera.width) * camera.height);
    const nn::Mat<double> w = nn::Mat<double>::Random(static_cast<Eigen::Index>(in.taps.size()), 3);
    auto f = [&]() { return nn::sample_vertices<double>(map, camera.width, in.taps).cwiseProduct(w).sum(); };
    nn::Mat<double> grad = nn::Mat<double>::Zero(map.rows(), map.cols());
    nn::sample_vertices_backward<double>(w, camera.width, in.taps, grad);
    std::vector<Eigen::Index> touched;
    for (const auto& t : in.taps) {
      for (Eigen::Index ch = 0; ch < 3; ++ch) touched.push_back(ch * map.cols() + t.y0 * camera.width + t.x0);
    }
    GradcheckEntry e;
    e.name = "sampler";
    for (auto k : pick_entries(static_cast<Eigen::Index>(touched.size()), options.entries_per_tensor, rng)) {
      const auto i = touched[static_cast<std::size_t>(k)];
      const double numeric = central_difference(map.data() + i, options.step, f);
      e.max_rel_error = std::max(e.max_rel_error, rel_error(grad.data()[i], numeric));
      ++e.checked;
    }
    e.passed = e.max_rel_error < options.tolerance;
    report.entries.push_back(e);
  }

  // Each loss with respect to its prediction.
  nn::Model<double>::Cache cache;
  const auto out = model.forward(in, cache);
  {
    nn::Mat<double> pred = out.positions;
    const auto grad = loss_pos<double>(pred, target).grad;
    GradcheckEntry e;
    e.name = "loss.pos";
    for (auto i : pick_entries(pred.size(), options.entries_per_tensor, rng)) {
      const double numeric = central_difference(pred.data() + i, options.step, [&] { return loss_pos<double>(pred, target).value; });
      e.max_rel_error = std::max(e.max_rel_error, rel_error(grad.data()[i], numeric));
      ++e.checked;
    }
    e.passed = e.max_rel_error < options.tolerance;
    report.entries.push_back(e);
  }
  {
    nn::Mat<double> pred = out.positions;
    const auto grad = loss_smooth<double>(lap, pred, target).grad;
    GradcheckEntry e;
    e.name = "loss.smooth";
    for (auto i : pick_entries(pred.size(), options.entries_per_tensor, rng)) {
      const double numeric =
          central_difference(pred.data() + i, options.step, [&] { return loss_smooth<double>(lap, pred, target).value; });
      e.max_rel_error = std::max(e.max_rel_error, rel_error(grad.data()[i], numeric));
      ++e.checked;
    }
    e.passed = e.max_rel_error < options.tolerance;
    report.entries.push_back(e);
  }
  {
    nn::Mat<double> pred = out.map.v;
    const auto grad = loss_map<double>(pred, c.map).grad;
    // Entries on covered pixels, away from the kink of |u - û|.
    std::vector<Eigen::Index> smooth_entries;
    for (Eigen::Index p = 0; p < pred.cols(); ++p) {
      if (!c.map.mask[static_cast<std::size_t>(p)]) continue;
      for (Eigen::Index ch = 0; ch < 3; ++ch) {
        const double diff = pred(ch, p) - c.map.data[static_cast<std::size_t>(ch * pred.cols() + p)];
        if (std::abs(diff) > 4.0 * options.step) smooth_entries.push_back(ch * pred.cols() + p);
      }
    }
    GradcheckEntry e;
    e.name = "loss.map";
    for (auto k : pick_entries(static_cast<Eigen::Index>(smooth_entries.size()), options.entries_per_tensor, rng)) {
      const auto i = smooth_entries[static_cast<std::size_t>(k)];
      const double numeric = central_difference(pred.data() + i, options.step, [&] { return loss_map<double>(pred, c.map).value; });
      e.max_rel_error = std::max(e.max_rel_error, rel_error(grad.data()[i], numeric));
      ++e.checked;
    }
    e.passed = e.checked > 0 && e.max_rel_error < options.tolerance;
    report.entries.push_back(e);
  }

  // Zero-initialized heads: without the map skip the position loss has no path
  // to the generator at all; with it, only the generator head sees a gradient.
  for (const bool skip : {false, true}) {
    ArchConfig zero = arch;
    zero.zero_init_heads = true;
    zero.map_skip = skip;
    nn::Model<double> identity(zero);
    identity.zero_grad();
    nn::Model<double>::Cache zc;
    const auto zout = identity.forward(in, zc);
    identity.backward(zc, nn::Mat<double>(), loss_pos<double>(zout.positions, target).grad);
    auto pos_loss = [&] {
      nn::Model<double>::Cache cache;
      return loss_pos<double>(identity.forward(in, cache).positions, target).value;
    };
    GradcheckEntry e;
    e.name = skip ? "zero_init.generator_pos_grad.map_skip" : "zero_init.generator_pos_grad";
    for (auto* p : identity.params()) {
      if (p->name.rfind("gen.", 0) != 0) continue;
      if (skip && p->name.rfind("gen.head.", 0) == 0) continue;
      e.max_rel_error = std::max(e.max_rel_error, p->grad.cwiseAbs().maxCoeff());
      e.checked += static_cast<std::size_t>(p->grad.size());
      for (auto k : pick_entries(p->value.size(), options.entries_per_tensor, rng)) {
        const double numeric = central_difference(p->value.data() + k, options.step, pos_loss);
        e.max_rel_error = std::max(e.max_rel_error, std::abs(numeric));
      }
    }
    e.passed = e.checked > 0 && e.max_rel_error == 0.0;
    report.entries.push_back(e);
  }

  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace dreg
