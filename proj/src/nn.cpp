#include "celestial/nn.hpp"

#include "celestial/errors.hpp"

#include <cmath>
#include <limits>

namespace celestial::nn {

Dense make_dense(int in, int out, double init_scale, std::mt19937_64& gen) {
  std::normal_distribution<double> normal(0.0, init_scale / std::sqrt(static_cast<double>(in)));
  Dense d;
  d.weight.resize(out, in);
  for (Eigen::Index j = 0; j < d.weight.cols(); ++j)
    for (Eigen::Index i = 0; i < d.weight.rows(); ++i)
      d.weight(i, j) = static_cast<float>(normal(gen));
  d.bias = Matrix::Zero(out, 1);
  return d;
}

Matrix forward(const Dense& layer, const Matrix& x) {
  if (x.rows() != layer.weight.cols()) throw ValidationError("dense input dimension mismatch");
  Matrix y = layer.weight * x;
  y.colwise() += layer.bias.col(0);
  return y;
}

void backward(const Dense& layer, const Matrix& x, const Matrix& dy, Matrix& dweight,
              Matrix& dbias, Matrix* dx) {
  dweight.noalias() += dy * x.transpose();
  dbias.col(0) += dy.rowwise().sum();
  if (dx) *dx = layer.weight.transpose() * dy;
}

Conv2d make_conv(int in_channels, int out_channels, int kernel, int stride, std::mt19937_64& gen) {
  Conv2d c;
  c.in_channels = in_channels;
  c.out_channels = out_channels;
  c.kernel = kernel;
  c.stride = stride;
  const int fan_in = in_channels * kernel * kernel;
  std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / fan_in));
  c.weight.resize(out_channels, fan_in);
  for (Eigen::Index j = 0; j < c.weight.cols(); ++j)
    for (Eigen::Index i = 0; i < c.weight.rows(); ++i)
      c.weight(i, j) = static_cast<float>(normal(gen));
  c.bias = Matrix::Zero(out_channels, 1);
  return c;
}

Matrix im2col(const Conv2d& conv, const Matrix& x, int height, int width) {
  const int k = conv.kernel, s = conv.stride, p = conv.pad();
  const int oh = conv.out_size(height), ow = conv.out_size(width);
  Matrix cols = Matrix::Zero(static_cast<Eigen::Index>(conv.in_channels) * k * k,
                             static_cast<Eigen::Index>(oh) * ow);
  for (int c = 0; c < conv.in_channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const Eigen::Index row = (static_cast<Eigen::Index>(c) * k + ky) * k + kx;
        for (int y = 0; y < oh; ++y) {
          const int sy = y * s + ky - p;
          if (sy < 0 || sy >= height) continue;
          for (int xx = 0; xx < ow; ++xx) {
            const int sx = xx * s + kx - p;
            if (sx < 0 || sx >= width) continue;
            cols(row, static_cast<Eigen::Index>(y) * ow + xx) = x(c, static_cast<Eigen::Index>(sy) * width + sx);
          }
        }
      }
    }
  }
  return cols;
}

Matrix col2im(const Conv2d& conv, const Matrix& cols, int height, int width) {
  const int k = conv.kernel, s = conv.stride, p = conv.pad();
  const int oh = conv.out_size(height), ow = conv.out_size(width);
  Matrix x = Matrix::Zero(conv.in_channels, static_cast<Eigen::Index>(height) * width);
  for (int c = 0; c < conv.in_channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const Eigen::Index row = (static_cast<Eigen::Index>(c) * k + ky) * k + kx;
        for (int y = 0; y < oh; ++y) {
          const int sy = y * s + ky - p;
          if (sy < 0 || sy >= height) continue;
          for (int xx = 0; xx < ow; ++xx) {
            const int sx = xx * s + kx - p;
            if (sx < 0 || sx >= width) continue;
            x(c, static_cast<Eigen::Index>(sy) * width + sx) += cols(row, static_cast<Eigen::Index>(y) * ow + xx);
          }
        }
      }
    }
  }
  return x;
}

Matrix forward(const Conv2d& conv, const Matrix& x, int height, int width) {
  if (x.rows() != conv.in_channels) throw ValidationError("conv input channel mismatch");
  Matrix y = conv.weight * im2col(conv, x, height, width);
  y.colwise() += conv.bias.col(0);
  return y;
}

void backward(const Conv2d& conv, const Matrix& x, int height, int width, const Matrix& dy,
              Matrix& dweight, Matrix& dbias, Matrix* dx) {
  const Matrix cols = im2col(conv, x, height, width);
  dweight.noalias() += dy * cols.transpose();
  dbias.col(0) += dy.rowwise().sum();
  if (dx) {
    Matrix dcols = conv.weight.transpose() * dy;
    *dx = col2im(conv, dcols, height, width);
  }
}

PoolResult max_pool(const Matrix& x, int height, int width, int size) {
  const int oh = height / size, ow = width / size;
  PoolResult r;
  r.out.resize(x.rows(), static_cast<Eigen::Index>(oh) * ow);
  r.argmax.resize(static_cast<std::size_t>(x.rows()) * oh * ow);
  for (Eigen::Index c = 0; c < x.rows(); ++c) {
    for (int y = 0; y < oh; ++y) {
      for (int xx = 0; xx < ow; ++xx) {
        float best = -std::numeric_limits<float>::infinity();
        int best_idx = 0;
        for (int dy = 0; dy < size; ++dy) {
          for (int dx = 0; dx < size; ++dx) {
            const int idx = (y * size + dy) * width + xx * size + dx;
            const float v = x(c, idx);
            if (v > best) {
              best = v;
              best_idx = idx;
            }
          }
        }
        const Eigen::Index o = static_cast<Eigen::Index>(y) * ow + xx;
        r.out(c, o) = best;
        r.argmax[static_cast<std::size_t>(c * r.out.cols() + o)] = best_idx;
      }
    }
  }
  return r;
}

Matrix max_pool_backward(const Matrix& dy, const std::vector<int>& argmax, int in_spatial) {
  Matrix dx = Matrix::Zero(dy.rows(), in_spatial);
  for (Eigen::Index c = 0; c < dy.rows(); ++c)
    for (Eigen::Index o = 0; o < dy.cols(); ++o)
      dx(c, argmax[static_cast<std::size_t>(c * dy.cols() + o)]) += dy(c, o);
  return dx;
}

Matrix softmax_columns(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    const float m = logits.col(j).maxCoeff();
    auto e = (logits.col(j).array() - m).exp();
    out.col(j) = e / e.sum();
  }
  return out;
}

std::vector<Matrix> zeros_like(const std::vector<ParamRef>& params) {
  std::vector<Matrix> g;
  g.reserve(params.size());
  for (const auto& p : params) g.push_back(Matrix::Zero(p.value->rows(), p.value->cols()));
  return g;
}

void MomentumSgd::step(const std::vector<ParamRef>& params, const std::vector<Matrix>& grads) {
  if (velocity_.empty()) velocity_ = zeros_like(params);
  if (velocity_.size() != params.size() || grads.size() != params.size())
    throw Error("optimizer parameter list changed between steps");
  const float lr = static_cast<float>(learning_rate_);
  const float mu = static_cast<float>(momentum_);
  for (std::size_t i = 0; i < params.size(); ++i) {
    velocity_[i] = mu * velocity_[i] + grads[i];
    *params[i].value -= lr * velocity_[i];
  }
}

}  // namespace celestial::nn
