#include "dreg/losses.hpp"

#include "dreg/error.hpp"

namespace dreg {

template <typename T>
LossTerm<T> loss_pos(const nn::Mat<T>& pred, const nn::Mat<T>& target) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols()) {
    throw ValidationError("loss_pos: prediction and target sizes differ");
  }
  LossTerm<T> out;
  const auto n = pred.rows();
  if (n == 0) {
    out.grad = nn::Mat<T>::Zero(0, pred.cols());
    return out;
  }
  const nn::Mat<T> diff = pred - target;
  out.value = diff.squaredNorm() / static_cast<T>(n);
  out.grad = diff * (T(2) / static_cast<T>(n));
  return out;
}

template <typename T>
LossTerm<T> loss_smooth(const Eigen::SparseMatrix<double, Eigen::RowMajor>& laplacian, const nn::Mat<T>& pred,
                        const nn::Mat<T>& target) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols() || laplacian.rows() != pred.rows()) {
    throw ValidationError("loss_smooth: size mismatch");
  }
  LossTerm<T> out;
  const auto n = pred.rows();
  if (n == 0) {
    out.grad = nn::Mat<T>::Zero(0, pred.cols());
    return out;
  }
  const Eigen::SparseMatrix<T, Eigen::RowMajor> lap = laplacian.cast<T>();
  const nn::Mat<T> d = pred - target;
  // Rows sum to zero, so L d = sum_j L_ij (d_j - d_i); exact 0 under translation.
  nn::Mat<T> r = nn::Mat<T>::Zero(n, d.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    for (typename Eigen::SparseMatrix<T, Eigen::RowMajor>::InnerIterator it(lap, i); it; ++it) {
      if (it.col() != i) r.row(i) += it.value() * (d.row(it.col()) - d.row(i));
    }
  }
  out.value = r.squaredNorm() / static_cast<T>(n);
  out.grad = (lap.transpose() * r) * (T(2) / static_cast<T>(n));
  return out;
}

template <typename T>
LossTerm<T> loss_map(const nn::Mat<T>& pred, const DisplacementMap& target) {
  const auto npix = static_cast<Eigen::Index>(target.pixel_count());
  if (pred.rows() != 3 || pred.cols() != npix) throw ValidationError("loss_map: map dimensions differ");
  LossTerm<T> out;
  out.grad = nn::Mat<T>::Zero(3, npix);
  const std::size_t covered = target.covered();
  if (covered == 0) return out;
  const T inv = T(1) / static_cast<T>(3 * covered);
  T acc = T(0);
  for (int c = 0; c < 3; ++c) {
    const float* u = target.data.data() + static_cast<std::size_t>(c) * target.pixel_count();
    for (Eigen::Index p = 0; p < npix; ++p) {
      if (!target.mask[static_cast<std::size_t>(p)]) continue;
      const T d = pred(c, p) - static_cast<T>(u[p]);
      acc += d < T(0) ? -d : d;
      out.grad(c, p) = d > T(0) ? inv : (d < T(0) ? -inv : T(0));
    }
  }
  out.value = acc * inv;
  return out;
}

template LossTerm<float> loss_pos<float>(const nn::Mat<float>&, const nn::Mat<float>&);
template LossTerm<double> loss_pos<double>(const nn::Mat<double>&, const nn::Mat<double>&);
template LossTerm<float> loss_smooth<float>(const Eigen::SparseMatrix<double, Eigen::RowMajor>&,
                                            const nn::Mat<float>&, const nn::Mat<float>&);
template LossTerm<double> loss_smooth<double>(const Eigen::SparseMatrix<double, Eigen::RowMajor>&,
                                              const nn::Mat<double>&, const nn::Mat<double>&);
template LossTerm<float> loss_map<float>(const nn::Mat<float>&, const DisplacementMap&);
template LossTerm<double> loss_map<double>(const nn::Mat<double>&, const DisplacementMap&);

nn::Mat<double> to_matrix(std::span<const Vec3> points) {
  nn::Mat<double> m(static_cast<Eigen::Index>(points.size()), 3);
  for (std::size_t i = 0; i < points.size(); ++i) {
    for (int a = 0; a < 3; ++a) m(static_cast<Eigen::Index>(i), a) = points[i][a];
  }
  return m;
}

std::vector<Vec3> to_points(const nn::Mat<double>& m) {
  std::vector<Vec3> out(static_cast<std::size_t>(m.rows()));
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    out[i] = {m(r, 0), m(r, 1), m(r, 2)};
  }
  return out;
}

nlohmann::json LossCalibration::to_json() const {
  return {{"l_pos", l_pos}, {"l_map", l_map}, {"l_smooth", l_smooth}};
}

LossCalibration LossCalibration::from_json(const nlohmann::json& j) {
  LossCalibration c;
  c.l_pos = j.at("l_pos").get<double>();
  c.l_map = j.at("l_map").get<double>();
  c.l_smooth = j.at("l_smooth").get<double>();
  return c;
}

LossReport total_loss(double raw_pos, double raw_map, double raw_smooth, const LossCalibration& calibration,
                      const LossWeights& weights) {
  if (!calibration.complete()) throw ValidationError("loss calibration constants are missing or non-positive");
  if (weights.mu < 0.0 || weights.lambda < 0.0) throw ValidationError("loss weights must be non-negative");
  LossReport r;
  r.raw_pos = raw_pos;
  r.raw_map = raw_map;
  r.raw_smooth = raw_smooth;
  r.l_pos = raw_pos / calibration.l_pos;
  r.l_map = raw_map / calibration.l_map;
  r.l_smooth = raw_smooth / calibration.l_smooth;
  r.total = r.l_pos + weights.mu * r.l_map + weights.lambda * r.l_smooth;
  return r;
}

}  // namespace dreg
