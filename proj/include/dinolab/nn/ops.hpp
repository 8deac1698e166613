#pragma once

#include "dinolab/common.hpp"

namespace dinolab::nn {

// tanh-form GELU; vectorizes through Eigen where the erf form would not.
template <typename S>
Mat<S> gelu(const Mat<S>& x) {
  const S c = S(0.7978845608028654);  // sqrt(2/pi)
  const S a = S(0.044715);
  Mat<S> u = (c * (x.array() + a * x.array().cube())).matrix();
  return (S(0.5) * x.array() * (S(1) + u.array().tanh())).matrix();
}

template <typename S>
Mat<S> gelu_grad(const Mat<S>& x) {
  const S c = S(0.7978845608028654);
  const S a = S(0.044715);
  auto xa = x.array();
  Mat<S> t = (c * (xa + a * xa.cube())).tanh().matrix();
  auto ta = t.array();
  // d/dx [0.5 x (1 + tanh u)] = 0.5 (1 + tanh u) + 0.5 x (1 - tanh^2 u) u'
  return (S(0.5) * (S(1) + ta) +
          S(0.5) * xa * (S(1) - ta.square()) * (c * (S(1) + S(3) * a * xa.square())))
      .matrix();
}

// Kernel feature map for linear attention: phi(x) = elu(x) + 1 > 0.
template <typename S>
Mat<S> elu1(const Mat<S>& x) {
  return (x.array() > S(0)).select(x.array() + S(1), x.array().exp()).matrix();
}

template <typename S>
Mat<S> elu1_grad(const Mat<S>& x) {
  return (x.array() > S(0)).select(Mat<S>::Ones(x.rows(), x.cols()).array(), x.array().exp())
      .matrix();
}

template <typename S>
void softmax_rows_inplace(Mat<S>& x) {
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    auto row = x.row(i).array();
    row -= row.maxCoeff();
    row = row.exp();
    row /= row.sum();
  }
}

// Inverted-dropout mask with keep probability 1-p, entries either 0 or
// 1/(1-p). Multiplying by the same mask serves both forward and backward.
template <typename S>
Mat<S> dropout_mask(Eigen::Index rows, Eigen::Index cols, S p, std::mt19937_64& rng) {
  Mat<S> m(rows, cols);
  const S keep_inv = S(1) / (S(1) - p);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c)
      m(r, c) = (uniform01(rng) >= static_cast<double>(p)) ? keep_inv : S(0);
  return m;
}

}  // namespace dinolab::nn
