#pragma once

// Minimal layer kit for the featurizer and heads. Activations are stored
// channel-major per sample (channels x height*width); dense layers take a
// batch as columns (features x batch).

#include <Eigen/Core>

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace celestial::nn {

using Matrix = Eigen::MatrixXf;

struct Dense {
  Matrix weight;  // out x in
  Matrix bias;    // out x 1

  int in() const { return static_cast<int>(weight.cols()); }
  int out() const { return static_cast<int>(weight.rows()); }
  std::int64_t parameter_count() const { return weight.size() + bias.size(); }
};

Dense make_dense(int in, int out, double init_scale, std::mt19937_64& gen);

Matrix forward(const Dense& layer, const Matrix& x);

/// Accumulates into dweight/dbias; writes dx when non-null.
void backward(const Dense& layer, const Matrix& x, const Matrix& dy, Matrix& dweight,
              Matrix& dbias, Matrix* dx);

struct Conv2d {
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 3;
  int stride = 1;
  Matrix weight;  // out x (in * kernel * kernel)
  Matrix bias;    // out x 1

  int pad() const { return kernel / 2; }
  int out_size(int size) const { return (size + 2 * pad() - kernel) / stride + 1; }
  std::int64_t parameter_count() const { return weight.size() + bias.size(); }
};

Conv2d make_conv(int in_channels, int out_channels, int kernel, int stride, std::mt19937_64& gen);

Matrix im2col(const Conv2d& conv, const Matrix& x, int height, int width);
Matrix col2im(const Conv2d& conv, const Matrix& cols, int height, int width);

/// x: in_channels x (height*width). Returns out_channels x (out_h*out_w).
Matrix forward(const Conv2d& conv, const Matrix& x, int height, int width);

/// Accumulates parameter gradients; writes dx when non-null.
void backward(const Conv2d& conv, const Matrix& x, int height, int width, const Matrix& dy,
              Matrix& dweight, Matrix& dbias, Matrix* dx);

struct PoolResult {
  Matrix out;
  std::vector<int> argmax;  // flat source spatial index per output element
};

/// Non-overlapping max pooling with window == stride == size (floor on edges).
PoolResult max_pool(const Matrix& x, int height, int width, int size);
Matrix max_pool_backward(const Matrix& dy, const std::vector<int>& argmax, int in_spatial);

/// Numerically stable softmax over each column.
Matrix softmax_columns(const Matrix& logits);

/// A named reference to a trainable tensor, for optimizers and checkpoints.
struct ParamRef {
  std::string name;
  Matrix* value;
};

struct ConstParamRef {
  std::string name;
  const Matrix* value;
};

/// Gradient buffers shaped like a parameter list.
std::vector<Matrix> zeros_like(const std::vector<ParamRef>& params);

/// Momentum SGD: v <- momentum * v + g; w <- w - lr * v.
class MomentumSgd {
 public:
  MomentumSgd(double learning_rate, double momentum)
      : learning_rate_(learning_rate), momentum_(momentum) {}

  void step(const std::vector<ParamRef>& params, const std::vector<Matrix>& grads);

 private:
  double learning_rate_;
  double momentum_;
  std::vector<Matrix> velocity_;
};

}  // namespace celestial::nn
