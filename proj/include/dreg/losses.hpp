#pragma once

#include <span>
#include <vector>

#include <Eigen/Sparse>
#include <nlohmann/json.hpp>

#include "dreg/geometry.hpp"
#include "dreg/layers.hpp"
#include "dreg/projection.hpp"

namespace dreg {

template <typename T>
struct LossTerm {
  T value = T(0);
  nn::Mat<T> grad;  // same shape as the prediction
};

// (1/n) sum ||v_i - v̂_i||^2 over n x 3 position matrices.
template <typename T>
LossTerm<T> loss_pos(const nn::Mat<T>& pred, const nn::Mat<T>& target);

// (1/n) sum ||L(v_i) - L(v̂_i)||^2 with the umbrella Laplacian matrix L.
template <typename T>
LossTerm<T> loss_smooth(const Eigen::SparseMatrix<double, Eigen::RowMajor>& laplacian, const nn::Mat<T>& pred,
                        const nn::Mat<T>& target);

// Mean |u - û| over the target mask's covered pixels and all 3 channels.
// `pred` is 3 x H*W. An empty mask gives zero loss and zero gradient.
template <typename T>
LossTerm<T> loss_map(const nn::Mat<T>& pred, const DisplacementMap& target);

nn::Mat<double> to_matrix(std::span<const Vec3> points);
std::vector<Vec3> to_points(const nn::Mat<double>& m);

// Per-dataset maxima dividing each raw loss so the terms land in [0, 1].
struct LossCalibration {
  double l_pos = 0.0;
  double l_map = 0.0;
  double l_smooth = 0.0;

  bool complete() const { return l_pos > 0.0 && l_map > 0.0 && l_smooth > 0.0; }
  nlohmann::json to_json() const;
  static LossCalibration from_json(const nlohmann::json& j);
};

struct LossWeights {
  double mu = 1.0;      // map term
  double lambda = 0.1;  // smoothness term
};

struct LossReport {
  double l_pos = 0.0;
  double l_smooth = 0.0;
  double l_map = 0.0;
  double total = 0.0;
  double raw_pos = 0.0;
  double raw_smooth = 0.0;
  double raw_map = 0.0;
};

// Normalizes raw component losses by the calibration and forms
// total = l_pos + mu * l_map + lambda * l_smooth. Throws ValidationError if
// the calibration is incomplete.
LossReport total_loss(double raw_pos, double raw_map, double raw_smooth, const LossCalibration& calibration,
                      const LossWeights& weights);

}  // namespace dreg
