#pragma once

// Building blocks with explicit forward/backward passes. Feature maps are
// row-major (channels x H*W) matrices.

#include <cassert>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

namespace dreg::nn {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
struct FeatureMap {
  int channels = 0;
  int height = 0;
  int width = 0;
  Mat<T> v;  // channels x (height * width)

  FeatureMap() = default;
  FeatureMap(int c, int h, int w) : channels(c), height(h), width(w), v(Mat<T>::Zero(c, h * w)) {}
  int pixels() const { return height * width; }
};

// Learnable tensor with its gradient accumulator. `shape` is the logical layout
// recorded in checkpoints; `value` is the matrix view used by the math.
template <typename T>
struct Param {
  std::string name;
  std::vector<int> shape;
  Mat<T> value;
  Mat<T> grad;

  Param() = default;
  Param(std::string n, std::vector<int> s, Eigen::Index rows, Eigen::Index cols)
      : name(std::move(n)), shape(std::move(s)), value(Mat<T>::Zero(rows, cols)), grad(Mat<T>::Zero(rows, cols)) {}
  void zero_grad() { grad.setZero(); }
};

// Same-padded k x k convolution (k odd). Weight is (out x in*k*k), bias (out x 1).
template <typename T>
struct Conv2d {
  Param<T> weight;
  Param<T> bias;
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 3;

  struct Cache {
    Mat<T> cols;
    int height = 0;
    int width = 0;
  };

  Conv2d() = default;
  Conv2d(const std::string& name, int in, int out, int k)
      : weight(name + ".w", {out, in, k, k}, out, static_cast<Eigen::Index>(in) * k * k),
        bias(name + ".b", {out}, out, 1),
        in_channels(in),
        out_channels(out),
        kernel(k) {}

  FeatureMap<T> forward(const FeatureMap<T>& x, Cache& cache) const {
    assert(x.channels == in_channels);
    cache.height = x.height;
    cache.width = x.width;
    if (kernel == 1) {
      cache.cols = x.v;
    } else {
      im2col(x, cache.cols);
    }
    FeatureMap<T> y(out_channels, x.height, x.width);
    y.v.noalias() = weight.value * cache.cols;
    y.v.colwise() += bias.value.col(0);
    return y;
  }

  // Accumulates parameter gradients; returns the input gradient.
  FeatureMap<T> backward(const Cache& cache, const Mat<T>& dy) {
    weight.grad.noalias() += dy * cache.cols.transpose();
    bias.grad.col(0) += dy.rowwise().sum();
    FeatureMap<T> dx(in_channels, cache.height, cache.width);
    if (kernel == 1) {
      dx.v.noalias() = weight.value.transpose() * dy;
    } else {
      Mat<T> dcols = weight.value.transpose() * dy;
      col2im(dcols, dx);
    }
    return dx;
  }

 private:
  void im2col(const FeatureMap<T>& x, Mat<T>& cols) const {
    const int h = x.height;
    const int w = x.width;
    const int r = kernel / 2;
    cols.resize(static_cast<Eigen::Index>(in_channels) * kernel * kernel, h * w);
    for (int c = 0; c < in_channels; ++c) {
      const T* src = x.v.row(c).data();
      for (int ky = 0; ky < kernel; ++ky) {
        for (int kx = 0; kx < kernel; ++kx) {
          T* dst = cols.row((c * kernel + ky) * kernel + kx).data();
          const int dy = ky - r;
          const int dx = kx - r;
          for (int y = 0; y < h; ++y) {
            const int sy = y + dy;
            T* row = dst + y * w;
            if (sy < 0 || sy >= h) {
              std::fill(row, row + w, T(0));
              continue;
            }
            const T* srow = src + sy * w;
            for (int xx = 0; xx < w; ++xx) {
              const int sx = xx + dx;
              row[xx] = (sx < 0 || sx >= w) ? T(0) : srow[sx];
            }
          }
        }
      }
    }
  }

  void col2im(const Mat<T>& cols, FeatureMap<T>& dx) const {
    const int h = dx.height;
    const int w = dx.width;
    const int r = kernel / 2;
    for (int c = 0; c < in_channels; ++c) {
      T* dst = dx.v.row(c).data();
      for (int ky = 0; ky < kernel; ++ky) {
        for (int kx = 0; kx < kernel; ++kx) {
          const T* src = cols.row((c * kernel + ky) * kernel + kx).data();
          const int dy = ky - r;
          const int ddx = kx - r;
          for (int y = 0; y < h; ++y) {
            const int sy = y + dy;
            if (sy < 0 || sy >= h) continue;
            const T* row = src + y * w;
            T* drow = dst + sy * w;
            const int x_begin = std::max(0, -ddx);
            const int x_end = std::min(w, w - ddx);
            for (int xx = x_begin; xx < x_end; ++xx) drow[xx + ddx] += row[xx];
          }
        }
      }
    }
  }
};

template <typename T>
FeatureMap<T> relu(const FeatureMap<T>& x) {
  FeatureMap<T> y = x;
  y.v = y.v.cwiseMax(T(0));
  return y;
}

// Gradient through ReLU given its output.
template <typename T>
Mat<T> relu_backward(const Mat<T>& activated, const Mat<T>& dy) {
  return (activated.array() > T(0)).select(dy, T(0));
}

template <typename T>
FeatureMap<T> avg_pool2(const FeatureMap<T>& x) {
  FeatureMap<T> y(x.channels, x.height / 2, x.width / 2);
  for (int c = 0; c < x.channels; ++c) {
    const T* src = x.v.row(c).data();
    T* dst = y.v.row(c).data();
    for (int yy = 0; yy < y.height; ++yy) {
      const T* r0 = src + (2 * yy) * x.width;
      const T* r1 = r0 + x.width;
      for (int xx = 0; xx < y.width; ++xx) {
        dst[yy * y.width + xx] = T(0.25) * (r0[2 * xx] + r0[2 * xx + 1] + r1[2 * xx] + r1[2 * xx + 1]);
      }
    }
  }
  return y;
}

template <typename T>
FeatureMap<T> avg_pool2_backward(const Mat<T>& dy, int channels, int height, int width) {
  FeatureMap<T> dx(channels, height, width);
  const int oh = height / 2;
  const int ow = width / 2;
  for (int c = 0; c < channels; ++c) {
    const T* src = dy.row(c).data();
    T* dst = dx.v.row(c).data();
    for (int yy = 0; yy < oh; ++yy) {
      for (int xx = 0; xx < ow; ++xx) {
        const T g = T(0.25) * src[yy * ow + xx];
        T* r0 = dst + (2 * yy) * width + 2 * xx;
        T* r1 = r0 + width;
        r0[0] = g;
        r0[1] = g;
        r1[0] = g;
        r1[1] = g;
      }
    }
  }
  return dx;
}

template <typename T>
FeatureMap<T> upsample2(const FeatureMap<T>& x) {
  FeatureMap<T> y(x.channels, x.height * 2, x.width * 2);
  for (int c = 0; c < x.channels; ++c) {
    const T* src = x.v.row(c).data();
    T* dst = y.v.row(c).data();
    for (int yy = 0; yy < y.height; ++yy) {
      const T* srow = src + (yy / 2) * x.width;
      T* drow = dst + yy * y.width;
      for (int xx = 0; xx < y.width; ++xx) drow[xx] = srow[xx / 2];
    }
  }
  return y;
}

template <typename T>
Mat<T> upsample2_backward(const Mat<T>& dy, int channels, int height, int width) {
  Mat<T> dx = Mat<T>::Zero(channels, height * width);
  const int uw = width * 2;
  for (int c = 0; c < channels; ++c) {
    const T* src = dy.row(c).data();
    T* dst = dx.row(c).data();
    for (int yy = 0; yy < height * 2; ++yy) {
      for (int xx = 0; xx < uw; ++xx) dst[(yy / 2) * width + xx / 2] += src[yy * uw + xx];
    }
  }
  return dx;
}

template <typename T>
FeatureMap<T> concat_channels(const FeatureMap<T>& a, const FeatureMap<T>& b) {
  assert(a.height == b.height && a.width == b.width);
  FeatureMap<T> y(a.channels + b.channels, a.height, a.width);
  y.v.topRows(a.channels) = a.v;
  y.v.bottomRows(b.channels) = b.v;
  return y;
}

// X' = act(P X W + b) over a fixed propagation matrix P.
template <typename T>
struct GraphConv {
  Param<T> weight;  // in x out
  Param<T> bias;    // 1 x out
  bool relu = true;

  struct Cache {
    Mat<T> propagated;  // P X
    Mat<T> output;      // post-activation
  };

  GraphConv() = default;
  GraphConv(const std::string& name, int in, int out, bool use_relu)
      : weight(name + ".w", {in, out}, in, out), bias(name + ".b", {out}, 1, out), relu(use_relu) {}

  Mat<T> forward(const Eigen::SparseMatrix<T, Eigen::RowMajor>& prop, const Mat<T>& x, Cache& cache) const {
    cache.propagated = prop * x;
    Mat<T> z = cache.propagated * weight.value;
    z.rowwise() += bias.value.row(0);
    if (relu) z = z.cwiseMax(T(0));
    cache.output = z;
    return z;
  }

  Mat<T> backward(const Eigen::SparseMatrix<T, Eigen::RowMajor>& prop, const Cache& cache, const Mat<T>& dy) {
    const Mat<T> dz = relu ? relu_backward<T>(cache.output, dy) : dy;
    weight.grad.noalias() += cache.propagated.transpose() * dz;
    bias.grad.row(0) += dz.colwise().sum();
    const Mat<T> dprop = dz * weight.value.transpose();
    // P is symmetric.
    return prop.transpose() * dprop;
  }
};

}  // namespace dreg::nn
