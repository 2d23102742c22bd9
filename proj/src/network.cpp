#include "dreg/network.hpp"

#include <cmath>

#include "dreg/error.hpp"
#include "dreg/rng.hpp"

namespace dreg {

void ArchConfig::validate() const {
  if (image_width < 16 || image_height < 16) throw ValidationError("image size must be at least 16x16");
  if (widths.empty()) throw ValidationError("generator needs at least one stage");
  const int div = 1 << widths.size();
  if (image_width % div != 0 || image_height % div != 0) {
    throw ValidationError("image size must be divisible by 2^depth = " + std::to_string(div));
  }
  for (int w : widths) {
    if (w < 1) throw ValidationError("generator widths must be positive");
  }
  if (gcn_layers < 1 || gcn_hidden < 1) throw ValidationError("graph network needs positive layer count and width");
  if (!(map_scale_mm > 0.0)) throw ValidationError("map_scale_mm must be positive");
}

nlohmann::json ArchConfig::to_json() const {
  return {{"image_width", image_width}, {"image_height", image_height}, {"widths", widths},
          {"gcn_hidden", gcn_hidden},   {"gcn_layers", gcn_layers},     {"map_scale_mm", map_scale_mm},
          {"zero_init_heads", zero_init_heads}, {"map_skip", map_skip}, {"init_seed", init_seed}};
}

ArchConfig ArchConfig::from_json(const nlohmann::json& j) {
  ArchConfig c;
  c.image_width = j.at("image_width").get<int>();
  c.image_height = j.at("image_height").get<int>();
  c.widths = j.at("widths").get<std::vector<int>>();
  c.gcn_hidden = j.at("gcn_hidden").get<int>();
  c.gcn_layers = j.at("gcn_layers").get<int>();
  c.map_scale_mm = j.at("map_scale_mm").get<double>();
  c.zero_init_heads = j.at("zero_init_heads").get<bool>();
  c.map_skip = j.at("map_skip").get<bool>();
  c.init_seed = j.at("init_seed").get<std::uint64_t>();
  c.validate();
  return c;
}

ModelInput prepare_input(const Camera& camera, const Image& image, const SemanticLabel& label, int organ_count,
                         const Mesh& mesh, const CoordinateNormalizer& normalizer) {
  if (image.width != camera.width || image.height != camera.height || label.width != camera.width ||
      label.height != camera.height) {
    throw ValidationError("image/label size does not match camera");
  }
  if (organ_count < 1) throw ValidationError("organ_count must be >= 1");
  ModelInput in;
  in.image = nn::FeatureMap<double>(2, image.height, image.width);
  const double inv = 1.0 / organ_count;
  for (int p = 0; p < in.image.pixels(); ++p) {
    in.image.v(0, p) = image.pixels[static_cast<std::size_t>(p)];
    in.image.v(1, p) = label.labels[static_cast<std::size_t>(p)] * inv;
  }
  in.template_positions = mesh.vertices;
  in.normalizer = normalizer;
  in.normalized_positions.reserve(mesh.size());
  for (const auto& v : mesh.vertices) in.normalized_positions.push_back(normalizer.normalize(v));
  in.taps.reserve(mesh.size());
  for (const auto& v : mesh.vertices) {
    const auto p = camera.project(v);
    in.taps.push_back(bilinear_tap(camera.width, camera.height, p.x, p.y));
  }
  in.graph = build_graph_operator(mesh);
  return in;
}

namespace nn {

namespace {

template <typename T>
void glorot(Param<T>& p, int fan_in, int fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = static_cast<T>(uniform(rng, -limit, limit));
}

template <typename T>
void init_conv(Conv2d<T>& conv, Rng& rng) {
  const int k2 = conv.kernel * conv.kernel;
  glorot(conv.weight, conv.in_channels * k2, conv.out_channels * k2, rng);
}

}  // namespace

template <typename T>
Mat<T> sample_vertices(const Mat<T>& map, int width, const std::vector<BilinearTap>& taps) {
  Mat<T> out(static_cast<Eigen::Index>(taps.size()), 3);
  for (std::size_t i = 0; i < taps.size(); ++i) {
    const auto& t = taps[i];
    const int p00 = t.y0 * width + t.x0;
    const int p10 = t.y0 * width + t.x1;
    const int p01 = t.y1 * width + t.x0;
    const int p11 = t.y1 * width + t.x1;
    for (int c = 0; c < 3; ++c) {
      out(static_cast<Eigen::Index>(i), c) =
          static_cast<T>(t.w00) * map(c, p00) + static_cast<T>(t.w10) * map(c, p10) +
          static_cast<T>(t.w01) * map(c, p01) + static_cast<T>(t.w11) * map(c, p11);
    }
  }
  return out;
}

template <typename T>
void sample_vertices_backward(const Mat<T>& d_samples, int width, const std::vector<BilinearTap>& taps,
                              Mat<T>& d_map) {
  for (std::size_t i = 0; i < taps.size(); ++i) {
    const auto& t = taps[i];
    const int p00 = t.y0 * width + t.x0;
    const int p10 = t.y0 * width + t.x1;
    const int p01 = t.y1 * width + t.x0;
    const int p11 = t.y1 * width + t.x1;
    for (int c = 0; c < 3; ++c) {
      const T g = d_samples(static_cast<Eigen::Index>(i), c);
      d_map(c, p00) += static_cast<T>(t.w00) * g;
      d_map(c, p10) += static_cast<T>(t.w10) * g;
      d_map(c, p01) += static_cast<T>(t.w01) * g;
      d_map(c, p11) += static_cast<T>(t.w11) * g;
    }
  }
}

template <typename T>
Generator<T>::Generator(const ArchConfig& config) : config_(config) {
  config.validate();
  Rng rng(mix_seed(config.init_seed, 1));
  const auto& w = config.widths;
  const int depth = static_cast<int>(w.size());
  int in = 2;
  for (int s = 0; s < depth; ++s) {
    enc_.emplace_back("gen.enc" + std::to_string(s), in, w[s], 3);
    in = w[s];
  }
  bottleneck_ = Conv2d<T>("gen.bottleneck", w[depth - 1], w[depth - 1], 3);
  for (int s = 0; s < depth; ++s) {
    const int up = s == depth - 1 ? w[depth - 1] : w[s + 1];
    dec_.emplace_back("gen.dec" + std::to_string(s), up + w[s], w[s], 3);
  }
  head_ = Conv2d<T>("gen.head", w[0], 3, 1);
  for (auto& c : enc_) init_conv(c, rng);
  init_conv(bottleneck_, rng);
  for (int s = depth - 1; s >= 0; --s) init_conv(dec_[static_cast<std::size_t>(s)], rng);
  if (!config.zero_init_heads) init_conv(head_, rng);
}

template <typename T>
FeatureMap<T> Generator<T>::forward(const FeatureMap<T>& input, Cache& cache) const {
  if (input.channels != 2 || input.width != config_.image_width || input.height != config_.image_height) {
    throw ValidationError("generator input must be 2 x " + std::to_string(config_.image_height) + " x " +
                          std::to_string(config_.image_width));
  }
  const std::size_t depth = enc_.size();
  cache.enc_conv.resize(depth);
  cache.enc_out.resize(depth);
  cache.pooled.resize(depth + 1);
  cache.dec_conv.resize(depth);
  cache.dec_out.resize(depth);
  cache.dec_in_low.resize(depth);

  cache.pooled[0] = input;
  for (std::size_t s = 0; s < depth; ++s) {
    cache.enc_out[s] = relu(enc_[s].forward(cache.pooled[s], cache.enc_conv[s]));
    cache.pooled[s + 1] = avg_pool2(cache.enc_out[s]);
  }
  cache.bottleneck_out = relu(bottleneck_.forward(cache.pooled[depth], cache.bottleneck_conv));
  const FeatureMap<T>* y = &cache.bottleneck_out;
  for (std::size_t k = depth; k-- > 0;) {
    cache.dec_in_low[k] = *y;
    const auto cat = concat_channels(upsample2(*y), cache.enc_out[k]);
    cache.dec_out[k] = relu(dec_[k].forward(cat, cache.dec_conv[k]));
    y = &cache.dec_out[k];
  }
  FeatureMap<T> out = head_.forward(*y, cache.head_conv);
  out.v *= static_cast<T>(config_.map_scale_mm);
  return out;
}

template <typename T>
void Generator<T>::backward(const Cache& cache, const Mat<T>& d_output) {
  const std::size_t depth = enc_.size();
  const Mat<T> d_head = d_output * static_cast<T>(config_.map_scale_mm);
  Mat<T> dy = head_.backward(cache.head_conv, d_head).v;
  std::vector<Mat<T>> d_skip(depth);
  for (std::size_t k = 0; k < depth; ++k) {
    const Mat<T> dz = relu_backward<T>(cache.dec_out[k].v, dy);
    const auto dcat = dec_[k].backward(cache.dec_conv[k], dz);
    const auto& low = cache.dec_in_low[k];
    d_skip[k] = dcat.v.bottomRows(cache.enc_out[k].channels);
    dy = upsample2_backward<T>(dcat.v.topRows(low.channels), low.channels, low.height, low.width);
  }
  const Mat<T> dzb = relu_backward<T>(cache.bottleneck_out.v, dy);
  Mat<T> dp = bottleneck_.backward(cache.bottleneck_conv, dzb).v;
  for (std::size_t k = depth; k-- > 0;) {
    const auto& e = cache.enc_out[k];
    Mat<T> de = avg_pool2_backward<T>(dp, e.channels, e.height, e.width).v;
    de += d_skip[k];
    const Mat<T> dz = relu_backward<T>(e.v, de);
    dp = enc_[k].backward(cache.enc_conv[k], dz).v;
  }
}

template <typename T>
std::vector<Param<T>*> Generator<T>::params() {
  std::vector<Param<T>*> out;
  for (auto& c : enc_) {
    out.push_back(&c.weight);
    out.push_back(&c.bias);
  }
  out.push_back(&bottleneck_.weight);
  out.push_back(&bottleneck_.bias);
  for (auto& c : dec_) {
    out.push_back(&c.weight);
    out.push_back(&c.bias);
  }
  out.push_back(&head_.weight);
  out.push_back(&head_.bias);
  return out;
}

template <typename T>
std::vector<const Param<T>*> Generator<T>::params() const {
  auto mut = const_cast<Generator*>(this)->params();
  return {mut.begin(), mut.end()};
}

template <typename T>
Deformer<T>::Deformer(const ArchConfig& config) {
  config.validate();
  Rng rng(mix_seed(config.init_seed, 2));
  int in = 6;
  for (int l = 0; l < config.gcn_layers; ++l) {
    const bool last = l == config.gcn_layers - 1;
    const int out = last ? 3 : config.gcn_hidden;
    layers_.emplace_back("gcn.layer" + std::to_string(l), in, out, !last);
    if (!last || !config.zero_init_heads) glorot(layers_.back().weight, in, out, rng);
    in = out;
  }
}

template <typename T>
Mat<T> Deformer<T>::forward(const Eigen::SparseMatrix<T, Eigen::RowMajor>& prop, const Mat<T>& features,
                            Cache& cache) const {
  cache.layers.resize(layers_.size());
  Mat<T> x = features;
  for (std::size_t l = 0; l < layers_.size(); ++l) x = layers_[l].forward(prop, x, cache.layers[l]);
  return x;
}

template <typename T>
Mat<T> Deformer<T>::backward(const Eigen::SparseMatrix<T, Eigen::RowMajor>& prop, const Cache& cache,
                             const Mat<T>& d_output) {
  Mat<T> d = d_output;
  for (std::size_t l = layers_.size(); l-- > 0;) d = layers_[l].backward(prop, cache.layers[l], d);
  return d;
}

template <typename T>
std::vector<Param<T>*> Deformer<T>::params() {
  std::vector<Param<T>*> out;
  for (auto& l : layers_) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
  }
  return out;
}

template <typename T>
std::vector<const Param<T>*> Deformer<T>::params() const {
  auto mut = const_cast<Deformer*>(this)->params();
  return {mut.begin(), mut.end()};
}

template <typename T>
Model<T>::Model(const ArchConfig& config) : config_(config), generator_(config), deformer_(config) {}

template <typename T>
typename Model<T>::Output Model<T>::forward(const ModelInput& input, Cache& cache) const {
  const auto n = static_cast<Eigen::Index>(input.vertex_count());
  if (input.graph.size() != input.vertex_count() || input.taps.size() != input.vertex_count()) {
    throw ValidationError("model input is inconsistent");
  }
  cache.prop = input.graph.propagation.template cast<T>();
  cache.map_width = input.image.width;
  cache.taps = input.taps;
  cache.half_extent = input.normalizer.half_extent();

  FeatureMap<T> image(input.image.channels, input.image.height, input.image.width);
  image.v = input.image.v.template cast<T>();
  Output out;
  out.map = generator_.forward(image, cache.generator);

  const Mat<T> samples = sample_vertices<T>(out.map.v, out.map.width, input.taps);
  cache.features.resize(n, 6);
  const T inv_scale = static_cast<T>(1.0 / config_.map_scale_mm);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vec3& q = input.normalized_positions[static_cast<std::size_t>(i)];
    for (int a = 0; a < 3; ++a) {
      cache.features(i, a) = static_cast<T>(q[a]);
      cache.features(i, 3 + a) = samples(i, a) * inv_scale;
    }
  }
  const Mat<T> delta = deformer_.forward(cache.prop, cache.features, cache.deformer);
  const Vec3 h = input.normalizer.half_extent();
  out.positions.resize(n, 3);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vec3& v = input.template_positions[static_cast<std::size_t>(i)];
    for (int a = 0; a < 3; ++a) {
      T d = static_cast<T>(h[a]) * delta(i, a);
      if (config_.map_skip) d += samples(i, a);
      out.positions(i, a) = static_cast<T>(v[a]) + d;
    }
  }
  return out;
}

template <typename T>
void Model<T>::backward(const Cache& cache, const Mat<T>& d_map, const Mat<T>& d_positions) {
  const auto& g0 = cache.generator.pooled.front();
  Mat<T> d_total = d_map.size() ? d_map : Mat<T>::Zero(3, g0.pixels());
  if (d_positions.size()) {
    Mat<T> d_delta = d_positions;
    for (int a = 0; a < 3; ++a) d_delta.col(a) *= static_cast<T>(cache.half_extent[a]);
    const Mat<T> d_features = deformer_.backward(cache.prop, cache.deformer, d_delta);
    Mat<T> d_samples = d_features.rightCols(3) * static_cast<T>(1.0 / config_.map_scale_mm);
    if (config_.map_skip) d_samples += d_positions;
    sample_vertices_backward<T>(d_samples, cache.map_width, cache.taps, d_total);
  }
  generator_.backward(cache.generator, d_total);
}

template <typename T>
std::vector<Param<T>*> Model<T>::params() {
  auto out = generator_.params();
  for (auto* p : deformer_.params()) out.push_back(p);
  return out;
}

template <typename T>
std::vector<const Param<T>*> Model<T>::params() const {
  auto mut = const_cast<Model*>(this)->params();
  return {mut.begin(), mut.end()};
}

template <typename T>
void Model<T>::zero_grad() {
  for (auto* p : params()) p->zero_grad();
}

template <typename T>
std::size_t Model<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto* p : params()) n += static_cast<std::size_t>(p->value.size());
  return n;
}

template <typename From, typename To>
void copy_parameters(const Model<From>& from, Model<To>& to) {
  const auto src = from.params();
  auto dst = to.params();
  if (src.size() != dst.size()) throw ValidationError("parameter lists differ");
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i]->name != dst[i]->name || src[i]->value.rows() != dst[i]->value.rows() ||
        src[i]->value.cols() != dst[i]->value.cols()) {
      throw ValidationError("parameter mismatch at " + src[i]->name);
    }
    dst[i]->value = src[i]->value.template cast<To>();
  }
}

template <typename T>
void adam_step(const std::vector<Param<T>*>& params, AdamState<T>& state, const AdamOptions& options) {
  for (const auto* p : params) {
    if (!p->grad.allFinite()) throw NumericError("non-finite gradient in " + p->name);
  }
  if (state.m.size() != params.size()) {
    state.m.clear();
    state.v.clear();
    for (const auto* p : params) {
      state.m.push_back(Mat<T>::Zero(p->value.rows(), p->value.cols()));
      state.v.push_back(Mat<T>::Zero(p->value.rows(), p->value.cols()));
    }
    state.step = 0;
  }
  ++state.step;
  const T b1 = static_cast<T>(options.beta1);
  const T b2 = static_cast<T>(options.beta2);
  const T c1 = static_cast<T>(1.0 - std::pow(options.beta1, static_cast<double>(state.step)));
  const T c2 = static_cast<T>(1.0 - std::pow(options.beta2, static_cast<double>(state.step)));
  const T lr = static_cast<T>(options.lr);
  const T eps = static_cast<T>(options.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& g = params[i]->grad;
    auto& m = state.m[i];
    auto& v = state.v[i];
    m = b1 * m + (T(1) - b1) * g;
    v = b2 * v + (T(1) - b2) * g.cwiseProduct(g);
    params[i]->value.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  }
}

template Mat<float> sample_vertices<float>(const Mat<float>&, int, const std::vector<BilinearTap>&);
template Mat<double> sample_vertices<double>(const Mat<double>&, int, const std::vector<BilinearTap>&);
template void sample_vertices_backward<float>(const Mat<float>&, int, const std::vector<BilinearTap>&, Mat<float>&);
template void sample_vertices_backward<double>(const Mat<double>&, int, const std::vector<BilinearTap>&,
                                               Mat<double>&);
template class Generator<float>;
template class Generator<double>;
template class Deformer<float>;
template class Deformer<double>;
template class Model<float>;
template class Model<double>;
template void copy_parameters<float, double>(const Model<float>&, Model<double>&);
template void copy_parameters<double, float>(const Model<double>&, Model<float>&);
template void copy_parameters<float, float>(const Model<float>&, Model<float>&);
template void adam_step<float>(const std::vector<Param<float>*>&, AdamState<float>&, const AdamOptions&);
template void adam_step<double>(const std::vector<Param<double>*>&, AdamState<double>&, const AdamOptions&);

}  // namespace nn

TensorBundle model_to_bundle(const nn::Model<float>& model, nlohmann::json header) {
  TensorBundle bundle;
  header["arch"] = model.config().to_json();
  bundle.header = std::move(header);
  for (const auto* p : model.params()) {
    StoredTensor t;
    for (int d : p->shape) t.dims.push_back(static_cast<std::uint32_t>(d));
    t.data.assign(p->value.data(), p->value.data() + p->value.size());
    bundle.tensors.push_back({p->name, std::move(t)});
  }
  return bundle;
}

nn::Model<float> model_from_bundle(const TensorBundle& bundle) {
  if (!bundle.header.contains("arch")) throw ValidationError("checkpoint header lacks architecture");
  nn::Model<float> model(ArchConfig::from_json(bundle.header.at("arch")));
  for (auto* p : model.params()) {
    const auto& t = bundle.at(p->name);
    if (t.data.size() != static_cast<std::size_t>(p->value.size())) {
      throw ValidationError("checkpoint tensor " + p->name + " has wrong size");
    }
    std::copy(t.data.begin(), t.data.end(), p->value.data());
  }
  return model;
}

}  // namespace dreg
