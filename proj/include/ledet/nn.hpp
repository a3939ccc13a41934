#pragma once

// Minimal CHW layers with hand-written backward passes: convolution (im2col +
// GEMM), ReLU, nearest upsampling and RoIAlign.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "ledet/geometry.hpp"

namespace ledet::nn {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<Matrix>;
using ConstMatrixMap = Eigen::Map<const Matrix>;

struct FeatureMap {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> data;

  FeatureMap() = default;
  FeatureMap(int c, int h, int w) : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, 0.0) {}

  double& at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  double at(int c, int y, int x) const { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  std::size_t plane() const { return static_cast<std::size_t>(height) * width; }

  MatrixMap as_matrix() { return MatrixMap(data.data(), channels, height * width); }
  ConstMatrixMap as_matrix() const { return ConstMatrixMap(data.data(), channels, height * width); }
};

struct ConvSpec {
  int in = 0;
  int out = 0;
  int kernel = 3;
  int stride = 1;
  int pad = 1;

  int out_size(int n) const { return (n + 2 * pad - kernel) / stride + 1; }
  int fan_in() const { return in * kernel * kernel; }
};

inline void im2col(const FeatureMap& in, const ConvSpec& s, int oh, int ow, Matrix& col) {
  col.resize(static_cast<Eigen::Index>(s.in) * s.kernel * s.kernel, static_cast<Eigen::Index>(oh) * ow);
  for (int c = 0; c < s.in; ++c) {
    for (int ky = 0; ky < s.kernel; ++ky) {
      for (int kx = 0; kx < s.kernel; ++kx) {
        double* row = col.row((c * s.kernel + ky) * s.kernel + kx).data();
        for (int y = 0; y < oh; ++y) {
          const int iy = y * s.stride - s.pad + ky;
          for (int x = 0; x < ow; ++x) {
            const int ix = x * s.stride - s.pad + kx;
            row[y * ow + x] = (iy >= 0 && iy < in.height && ix >= 0 && ix < in.width) ? in.at(c, iy, ix) : 0.0;
          }
        }
      }
    }
  }
}

inline void col2im(const Matrix& col, const ConvSpec& s, int oh, int ow, FeatureMap& out) {
  for (int c = 0; c < s.in; ++c) {
    for (int ky = 0; ky < s.kernel; ++ky) {
      for (int kx = 0; kx < s.kernel; ++kx) {
        const double* row = col.row((c * s.kernel + ky) * s.kernel + kx).data();
        for (int y = 0; y < oh; ++y) {
          const int iy = y * s.stride - s.pad + ky;
          if (iy < 0 || iy >= out.height) continue;
          for (int x = 0; x < ow; ++x) {
            const int ix = x * s.stride - s.pad + kx;
            if (ix >= 0 && ix < out.width) out.at(c, iy, ix) += row[y * ow + x];
          }
        }
      }
    }
  }
}

/// weight: [out, in*k*k] row-major; bias: [out]. `col` receives the
/// unfolded input for the backward pass.
inline FeatureMap conv_forward(const FeatureMap& in, const std::vector<double>& weight,
                               const std::vector<double>& bias, const ConvSpec& s, Matrix& col) {
  if (in.channels != s.in) throw std::invalid_argument("conv_forward: channel mismatch");
  const int oh = s.out_size(in.height);
  const int ow = s.out_size(in.width);
  if (oh <= 0 || ow <= 0) throw std::invalid_argument("conv_forward: input smaller than kernel");
  FeatureMap out(s.out, oh, ow);
  if (s.kernel == 1 && s.stride == 1 && s.pad == 0) {
    col = in.as_matrix();
  } else {
    im2col(in, s, oh, ow, col);
  }
  ConstMatrixMap w(weight.data(), s.out, s.fan_in());
  auto o = out.as_matrix();
  o.noalias() = w * col;
  for (int c = 0; c < s.out; ++c) o.row(c).array() += bias[c];
  return out;
}

/// Accumulates into dweight/dbias; writes the input gradient into `din`
/// (already sized, accumulated) when non-null.
inline void conv_backward(const Matrix& col, const std::vector<double>& weight, const ConvSpec& s,
                          const FeatureMap& dout, std::vector<double>* dweight, std::vector<double>* dbias,
                          FeatureMap* din) {
  auto g = dout.as_matrix();
  if (dweight) {
    MatrixMap dw(dweight->data(), s.out, s.fan_in());
    dw.noalias() += g * col.transpose();
  }
  if (dbias) {
    for (int c = 0; c < s.out; ++c) (*dbias)[c] += g.row(c).sum();
  }
  if (din) {
    ConstMatrixMap w(weight.data(), s.out, s.fan_in());
    Matrix dcol = w.transpose() * g;
    if (s.kernel == 1 && s.stride == 1 && s.pad == 0) {
      din->as_matrix() += dcol;
    } else {
      col2im(dcol, s, dout.height, dout.width, *din);
    }
  }
}

inline void relu_inplace(FeatureMap& x) {
  for (auto& v : x.data) v = v > 0.0 ? v : 0.0;
}

/// Zeroes gradient entries where the forward output was not positive.
inline void relu_backward(const FeatureMap& out, FeatureMap& grad) {
  for (std::size_t i = 0; i < grad.data.size(); ++i) {
    if (!(out.data[i] > 0.0)) grad.data[i] = 0.0;
  }
}

/// Nearest-neighbour resize to (h, w).
inline FeatureMap upsample_nearest(const FeatureMap& in, int h, int w) {
  FeatureMap out(in.channels, h, w);
  for (int c = 0; c < in.channels; ++c) {
    for (int y = 0; y < h; ++y) {
      const int sy = std::min(in.height - 1, y * in.height / h);
      for (int x = 0; x < w; ++x) out.at(c, y, x) = in.at(c, sy, std::min(in.width - 1, x * in.width / w));
    }
  }
  return out;
}

inline void upsample_nearest_backward(const FeatureMap& dout, FeatureMap& din) {
  for (int c = 0; c < dout.channels; ++c) {
    for (int y = 0; y < dout.height; ++y) {
      const int sy = std::min(din.height - 1, y * din.height / dout.height);
      for (int x = 0; x < dout.width; ++x) {
        din.at(c, sy, std::min(din.width - 1, x * din.width / dout.width)) += dout.at(c, y, x);
      }
    }
  }
}

struct RoiAlignSpec {
  int output_size = 4;
  int sampling = 2;
  double spatial_scale = 0.25;
};

namespace detail {

struct BilinearTap {
  int y0 = 0, x0 = 0, y1 = 0, x1 = 0;
  double w00 = 0, w01 = 0, w10 = 0, w11 = 0;
  bool valid = false;
};

inline BilinearTap bilinear_tap(double y, double x, int height, int width) {
  BilinearTap t;
  if (y < -1.0 || y > height || x < -1.0 || x > width) return t;
  y = std::max(y, 0.0);
  x = std::max(x, 0.0);
  t.y0 = static_cast<int>(y);
  t.x0 = static_cast<int>(x);
  if (t.y0 >= height - 1) {
    t.y0 = t.y1 = height - 1;
    y = t.y0;
  } else {
    t.y1 = t.y0 + 1;
  }
  if (t.x0 >= width - 1) {
    t.x0 = t.x1 = width - 1;
    x = t.x0;
  } else {
    t.x1 = t.x0 + 1;
  }
  const double ly = y - t.y0;
  const double lx = x - t.x0;
  t.w00 = (1 - ly) * (1 - lx);
  t.w01 = (1 - ly) * lx;
  t.w10 = ly * (1 - lx);
  t.w11 = ly * lx;
  t.valid = true;
  return t;
}

template <class Fn>
void for_each_roi_sample(const Box& roi, const RoiAlignSpec& s, int height, int width, Fn&& fn) {
  // aligned RoIAlign: continuous coordinates shifted by half a pixel
  const double x1 = roi.x1 * s.spatial_scale - 0.5;
  const double y1 = roi.y1 * s.spatial_scale - 0.5;
  const double bw = (roi.x2 - roi.x1) * s.spatial_scale / s.output_size;
  const double bh = (roi.y2 - roi.y1) * s.spatial_scale / s.output_size;
  const double norm = 1.0 / (s.sampling * s.sampling);
  for (int ph = 0; ph < s.output_size; ++ph) {
    for (int pw = 0; pw < s.output_size; ++pw) {
      for (int iy = 0; iy < s.sampling; ++iy) {
        const double y = y1 + ph * bh + (iy + 0.5) * bh / s.sampling;
        for (int ix = 0; ix < s.sampling; ++ix) {
          const double x = x1 + pw * bw + (ix + 0.5) * bw / s.sampling;
          const BilinearTap t = bilinear_tap(y, x, height, width);
          if (t.valid) fn(ph * s.output_size + pw, t, norm);
        }
      }
    }
  }
}

}  // namespace detail

/// Pools `roi` (image coordinates) into out[c * S*S + bin].
inline void roi_align_forward(const FeatureMap& f, const Box& roi, const RoiAlignSpec& s, double* out) {
  const int bins = s.output_size * s.output_size;
  std::fill(out, out + static_cast<std::size_t>(f.channels) * bins, 0.0);
  detail::for_each_roi_sample(roi, s, f.height, f.width, [&](int bin, const detail::BilinearTap& t, double norm) {
    for (int c = 0; c < f.channels; ++c) {
      out[c * bins + bin] += norm * (t.w00 * f.at(c, t.y0, t.x0) + t.w01 * f.at(c, t.y0, t.x1) +
                                     t.w10 * f.at(c, t.y1, t.x0) + t.w11 * f.at(c, t.y1, t.x1));
    }
  });
}

inline void roi_align_backward(FeatureMap& df, const Box& roi, const RoiAlignSpec& s, const double* dout) {
  const int bins = s.output_size * s.output_size;
  detail::for_each_roi_sample(roi, s, df.height, df.width, [&](int bin, const detail::BilinearTap& t, double norm) {
    for (int c = 0; c < df.channels; ++c) {
      const double g = norm * dout[c * bins + bin];
      df.at(c, t.y0, t.x0) += t.w00 * g;
      df.at(c, t.y0, t.x1) += t.w01 * g;
      df.at(c, t.y1, t.x0) += t.w10 * g;
      df.at(c, t.y1, t.x1) += t.w11 * g;
    }
  });
}

/// Row-wise softmax of an [n, c] row-major matrix.
inline std::vector<double> softmax_rows(const std::vector<double>& logits, int c) {
  std::vector<double> out(logits.size());
  const std::size_t n = logits.size() / static_cast<std::size_t>(c);
  for (std::size_t i = 0; i < n; ++i) {
    const double* z = logits.data() + i * c;
    double* p = out.data() + i * c;
    const double m = *std::max_element(z, z + c);
    double sum = 0.0;
    for (int k = 0; k < c; ++k) sum += (p[k] = std::exp(z[k] - m));
    for (int k = 0; k < c; ++k) p[k] /= sum;
  }
  return out;
}

inline std::vector<double> log_softmax_row(const double* z, int c) {
  std::vector<double> out(c);
  const double m = *std::max_element(z, z + c);
  double sum = 0.0;
  for (int k = 0; k < c; ++k) sum += std::exp(z[k] - m);
  const double lse = m + std::log(sum);
  for (int k = 0; k < c; ++k) out[k] = z[k] - lse;
  return out;
}

inline double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

}  // namespace ledet::nn
