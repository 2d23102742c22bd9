#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dreg/layers.hpp"
#include "dreg/mesh.hpp"
#include "dreg/projection.hpp"
#include "dreg/tensor_io.hpp"

namespace dreg {

struct ArchConfig {
  int image_width = 64;
  int image_height = 64;
  std::vector<int> widths{8, 16, 32};  // encoder stage widths; decoder mirrors them
  int gcn_hidden = 64;
  int gcn_layers = 8;
  double map_scale_mm = 10.0;  // generator head output unit, in millimeters
  bool zero_init_heads = true;
  // Vertex output adds the sampled map displacement to the graph network's correction.
  bool map_skip = true;
  std::uint64_t init_seed = 1;

  void validate() const;
  nlohmann::json to_json() const;
  static ArchConfig from_json(const nlohmann::json& j);
  friend bool operator==(const ArchConfig&, const ArchConfig&) = default;
};

// Everything the model needs about one (image, label, template) triple,
// precomputed in double precision.
struct ModelInput {
  nn::FeatureMap<double> image;  // 2 channels: projection image, organ label / organ count
  std::vector<Vec3> template_positions;
  std::vector<Vec3> normalized_positions;
  std::vector<BilinearTap> taps;  // each vertex's sampling footprint in the map
  GraphOperator graph;
  CoordinateNormalizer normalizer{Box{{-1, -1, -1}, {1, 1, 1}}};

  std::size_t vertex_count() const { return template_positions.size(); }
};

// `mesh` is the template graph (surface plus any bridges) in world millimeters.
ModelInput prepare_input(const Camera& camera, const Image& image, const SemanticLabel& label, int organ_count,
                         const Mesh& mesh, const CoordinateNormalizer& normalizer);

namespace nn {

// Per-vertex bilinear lookup of a 3-channel map (3 x H*W).
template <typename T>
Mat<T> sample_vertices(const Mat<T>& map, int width, const std::vector<BilinearTap>& taps);
// Scatters per-vertex gradients (n x 3) back onto map pixels.
template <typename T>
void sample_vertices_backward(const Mat<T>& d_samples, int width, const std::vector<BilinearTap>& taps,
                              Mat<T>& d_map);

// Image translator: encoder-decoder with skip concatenation, 2 input and 3 output channels.
template <typename T>
class Generator {
 public:
  struct Cache {
    std::vector<typename Conv2d<T>::Cache> enc_conv;
    std::vector<FeatureMap<T>> enc_out;  // post-ReLU, pre-pool
    std::vector<FeatureMap<T>> pooled;   // input to each encoder stage (index 0 = network input)
    typename Conv2d<T>::Cache bottleneck_conv;
    FeatureMap<T> bottleneck_out;
    std::vector<typename Conv2d<T>::Cache> dec_conv;
    std::vector<FeatureMap<T>> dec_out;
    std::vector<FeatureMap<T>> dec_in_low;  // decoder input before upsampling
    typename Conv2d<T>::Cache head_conv;
  };

  Generator() = default;
  explicit Generator(const ArchConfig& config);

  // Output in millimeters (3 x H*W).
  FeatureMap<T> forward(const FeatureMap<T>& input, Cache& cache) const;
  void backward(const Cache& cache, const Mat<T>& d_output);

  std::vector<Param<T>*> params();
  std::vector<const Param<T>*> params() const;

 private:
  ArchConfig config_;
  std::vector<Conv2d<T>> enc_;
  Conv2d<T> bottleneck_;
  std::vector<Conv2d<T>> dec_;
  Conv2d<T> head_;
};

// Stack of graph convolutions: 6 -> hidden -> ... -> 3, ReLU on all but the last.
template <typename T>
class Deformer {
 public:
  struct Cache {
    std::vector<typename GraphConv<T>::Cache> layers;
  };

  Deformer() = default;
  explicit Deformer(const ArchConfig& config);

  Mat<T> forward(const Eigen::SparseMatrix<T, Eigen::RowMajor>& prop, const Mat<T>& features, Cache& cache) const;
  Mat<T> backward(const Eigen::SparseMatrix<T, Eigen::RowMajor>& prop, const Cache& cache, const Mat<T>& d_output);

  std::vector<Param<T>*> params();
  std::vector<const Param<T>*> params() const;
  std::size_t layer_count() const { return layers_.size(); }

 private:
  std::vector<GraphConv<T>> layers_;
};

// Composite model: displacement-map generator followed by the graph deformer.
template <typename T>
class Model {
 public:
  struct Output {
    FeatureMap<T> map;  // predicted displacement map, mm
    Mat<T> positions;   // predicted vertices, n x 3, mm
  };
  struct Cache {
    typename Generator<T>::Cache generator;
    typename Deformer<T>::Cache deformer;
    Eigen::SparseMatrix<T, Eigen::RowMajor> prop;
    Mat<T> features;
    std::vector<BilinearTap> taps;
    int map_width = 0;
    Vec3 half_extent;
  };

  Model() = default;
  explicit Model(const ArchConfig& config);

  const ArchConfig& config() const { return config_; }

  Output forward(const ModelInput& input, Cache& cache) const;
  // Accumulates gradients for the given output gradients (either may be empty).
  void backward(const Cache& cache, const Mat<T>& d_map, const Mat<T>& d_positions);

  std::vector<Param<T>*> params();
  std::vector<const Param<T>*> params() const;
  void zero_grad();
  std::size_t parameter_count() const;

  Generator<T>& generator() { return generator_; }
  Deformer<T>& deformer() { return deformer_; }

 private:
  ArchConfig config_;
  Generator<T> generator_;
  Deformer<T> deformer_;
};

// Copies parameter values between precisions (names and shapes must match).
template <typename From, typename To>
void copy_parameters(const Model<From>& from, Model<To>& to);

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  std::vector<Mat<T>> m;
  std::vector<Mat<T>> v;
  long step = 0;
};

// Bias-corrected Adam; throws NumericError on a non-finite gradient before touching any parameter.
template <typename T>
void adam_step(const std::vector<Param<T>*>& params, AdamState<T>& state, const AdamOptions& options);

}  // namespace nn

using Model = nn::Model<float>;

// Checkpoint bundle: one tensor per parameter plus `header["arch"]`.
TensorBundle model_to_bundle(const nn::Model<float>& model, nlohmann::json header);
nn::Model<float> model_from_bundle(const TensorBundle& bundle);

}  // namespace dreg
