#pragma once

// Losses and similarity, templated on the scalar type so the same code runs in
// float for training and in double for gradient checks.

#include "celestial/errors.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace celestial {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

/// u.v / (|u| |v|). Throws DomainError for a zero vector or mismatched sizes.
template <typename DerivedU, typename DerivedV>
typename DerivedU::Scalar cosine_similarity(const Eigen::MatrixBase<DerivedU>& u,
                                            const Eigen::MatrixBase<DerivedV>& v) {
  using Scalar = typename DerivedU::Scalar;
  if (u.size() != v.size()) throw DomainError("cosine_similarity: dimension mismatch");
  const Scalar nu = u.norm();
  const Scalar nv = v.norm();
  if (nu == Scalar(0) || nv == Scalar(0)) throw DomainError("cosine_similarity: zero vector");
  const Scalar s = u.dot(v) / (nu * nv);
  return std::clamp(s, Scalar(-1), Scalar(1));
}

/// Pairing for the usual [a_0..a_{N-1}, b_0..b_{N-1}] layout: i <-> i +- N.
inline std::vector<int> interleaved_pairing(int num_pairs) {
  std::vector<int> pair(static_cast<std::size_t>(2 * num_pairs));
  for (int i = 0; i < num_pairs; ++i) {
    pair[static_cast<std::size_t>(i)] = i + num_pairs;
    pair[static_cast<std::size_t>(i + num_pairs)] = i;
  }
  return pair;
}

/// Throws DegenerateBatchError unless pairing is a fixed-point-free involution
/// over at least 4 views.
inline void check_pairing(const std::vector<int>& pairing) {
  const int n = static_cast<int>(pairing.size());
  if (n < 4) throw DegenerateBatchError("contrastive batch needs at least 4 views (2 pairs); got " + std::to_string(n));
  for (int i = 0; i < n; ++i) {
    const int p = pairing[static_cast<std::size_t>(i)];
    if (p < 0 || p >= n || p == i || pairing[static_cast<std::size_t>(p)] != i)
      throw DegenerateBatchError("pairing is not a fixed-point-free involution at view " + std::to_string(i));
  }
}

/// 2N projection vectors (columns) with their positive-partner map.
template <typename Scalar>
struct ContrastiveBatch {
  MatrixX<Scalar> vectors;
  std::vector<int> pairing;

  /// Checks the pairing and that every column has unit norm within tolerance.
  void validate(Scalar tolerance = Scalar(1e-6)) const {
    if (static_cast<std::size_t>(vectors.cols()) != pairing.size())
      throw ValidationError("pairing size does not match the number of vectors");
    check_pairing(pairing);
    for (Eigen::Index i = 0; i < vectors.cols(); ++i) {
      const Scalar norm = vectors.col(i).norm();
      if (!(std::abs(norm - Scalar(1)) <= tolerance))
        throw ValidationError("contrastive batch vector " + std::to_string(i) + " is not unit length");
    }
  }
};

template <typename Scalar>
struct ContrastiveLoss {
  Scalar loss;
  MatrixX<Scalar> gradient;  // dloss/dvectors, same shape as the input
};

/// NT-Xent over cosine similarities:
///   loss = 1/(2N) sum_i -log( exp(s_{i,pair(i)}/t) / sum_{j != i} exp(s_{ij}/t) )
/// with the analytic gradient with respect to each (unnormalized) input vector.
template <typename Scalar>
ContrastiveLoss<Scalar> contrastive_loss(const MatrixX<Scalar>& vectors,
                                         const std::vector<int>& pairing, Scalar temperature) {
  if (!(temperature > Scalar(0))) throw ValidationError("temperature must be positive");
  if (static_cast<std::size_t>(vectors.cols()) != pairing.size())
    throw ValidationError("pairing size does not match the number of vectors");
  check_pairing(pairing);

  const Eigen::Index n = vectors.cols();
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> norms(n);
  MatrixX<Scalar> unit(vectors.rows(), n);
  for (Eigen::Index i = 0; i < n; ++i) {
    norms(i) = vectors.col(i).norm();
    if (norms(i) == Scalar(0)) throw DomainError("contrastive_loss: zero vector at view " + std::to_string(i));
    unit.col(i) = vectors.col(i) / norms(i);
  }
  const MatrixX<Scalar> sim = unit.transpose() * unit;

  // g(i, j) = dloss / d sim(i, j) for the row-i softmax.
  MatrixX<Scalar> g = MatrixX<Scalar>::Zero(n, n);
  Scalar total = 0;
  const Scalar inv = Scalar(1) / (static_cast<Scalar>(n) * temperature);
  for (Eigen::Index i = 0; i < n; ++i) {
    Scalar max_logit = -std::numeric_limits<Scalar>::infinity();
    for (Eigen::Index j = 0; j < n; ++j)
      if (j != i) max_logit = std::max(max_logit, sim(i, j) / temperature);
    Scalar denom = 0;
    for (Eigen::Index j = 0; j < n; ++j)
      if (j != i) denom += std::exp(sim(i, j) / temperature - max_logit);
    const Scalar log_denom = std::log(denom) + max_logit;
    const Eigen::Index p = pairing[static_cast<std::size_t>(i)];
    total += log_denom - sim(i, p) / temperature;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) continue;
      const Scalar prob = std::exp(sim(i, j) / temperature - log_denom);
      g(i, j) = inv * (prob - (j == p ? Scalar(1) : Scalar(0)));
    }
  }

  const MatrixX<Scalar> d_unit = unit * (g + g.transpose());
  MatrixX<Scalar> grad(vectors.rows(), n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto u = unit.col(i);
    grad.col(i) = (d_unit.col(i) - u * u.dot(d_unit.col(i))) / norms(i);
  }
  return {total / static_cast<Scalar>(n), std::move(grad)};
}

template <typename Scalar>
ContrastiveLoss<Scalar> contrastive_loss(const ContrastiveBatch<Scalar>& batch, Scalar temperature) {
  batch.validate();
  return contrastive_loss(batch.vectors, batch.pairing, temperature);
}

template <typename Scalar>
struct CrossEntropy {
  Scalar loss;                 // mean over the batch
  MatrixX<Scalar> d_logits;    // classes x batch
};

/// Mean softmax cross-entropy of logits (classes x batch) against labels.
template <typename Scalar>
CrossEntropy<Scalar> softmax_cross_entropy(const MatrixX<Scalar>& logits, const std::vector<int>& labels) {
  if (static_cast<std::size_t>(logits.cols()) != labels.size())
    throw ValidationError("label count does not match batch size");
  const Eigen::Index batch = logits.cols();
  MatrixX<Scalar> d(logits.rows(), batch);
  double total = 0;
  for (Eigen::Index j = 0; j < batch; ++j) {
    const int y = labels[static_cast<std::size_t>(j)];
    if (y < 0 || y >= logits.rows()) throw ValidationError("label out of range");
    const Scalar m = logits.col(j).maxCoeff();
    const auto e = (logits.col(j).array() - m).exp();
    const Scalar sum = e.sum();
    d.col(j) = e / sum;
    total += std::log(static_cast<double>(sum)) + m - logits(y, j);
    d(y, j) -= Scalar(1);
  }
  d /= static_cast<Scalar>(batch);
  return {static_cast<Scalar>(total / static_cast<double>(batch)), std::move(d)};
}

}  // namespace celestial
