#pragma once

#include "dinolab/common.hpp"
#include "dinolab/nn/ops.hpp"
#include "dinolab/tensor_store.hpp"

#include <string>
#include <vector>

namespace dinolab::nn {

// Flat view of one trainable tensor; the optimizer only needs contiguous
// value/grad storage, shapes stay with the owning layer.
template <typename S>
struct ParamView {
  std::string name;
  S* value = nullptr;
  S* grad = nullptr;
  Eigen::Index size = 0;
};

template <typename S>
S truncated_normal(std::mt19937_64& rng, S stddev) {
  for (;;) {
    double z = normal01(rng);
    if (std::abs(z) <= 2.0) return S(z) * stddev;
  }
}

template <typename S>
class Linear {
 public:
  Linear() = default;
  Linear(Eigen::Index in, Eigen::Index out, std::mt19937_64& rng) { init(in, out, rng); }

  void init(Eigen::Index in, Eigen::Index out, std::mt19937_64& rng) {
    W.resize(in, out);
    for (Eigen::Index c = 0; c < out; ++c)
      for (Eigen::Index r = 0; r < in; ++r) W(r, c) = truncated_normal<S>(rng, S(0.02));
    b = RowVec<S>::Zero(out);
    zero_grad();
  }

  Mat<S> forward(const Mat<S>& x, bool train) {
    if (train) x_cache_ = x;
    Mat<S> y = x * W;
    y.rowwise() += b;
    return y;
  }

  Mat<S> backward(const Mat<S>& gy) {
    gW.noalias() += x_cache_.transpose() * gy;
    gb += gy.colwise().sum();
    return gy * W.transpose();
  }

  void zero_grad() {
    gW = Mat<S>::Zero(W.rows(), W.cols());
    gb = RowVec<S>::Zero(b.size());
  }

  void collect(std::vector<ParamView<S>>& out, const std::string& prefix) {
    out.push_back({prefix + ".weight", W.data(), gW.data(), W.size()});
    out.push_back({prefix + ".bias", b.data(), gb.data(), b.size()});
  }

  void save(TensorStore& ts, const std::string& prefix) const {
    ts.put_matrix(prefix + ".weight", W.template cast<float>());
    ts.put_vector(prefix + ".bias", b.transpose().template cast<float>());
  }

  void load(const TensorStore& ts, const std::string& prefix) {
    MatF w = ts.matrix(prefix + ".weight");
    VecF bv = ts.vector(prefix + ".bias");
    if (W.size() != 0)
      require(w.rows() == W.rows() && w.cols() == W.cols() && bv.size() == b.size(),
              prefix + ": stored shape differs from the constructed layer");
    W = w.cast<S>();
    b = bv.transpose().cast<S>();
    zero_grad();
  }

  Mat<S> W;      // in x out
  RowVec<S> b;
  Mat<S> gW;
  RowVec<S> gb;

 private:
  Mat<S> x_cache_;
};

template <typename S>
class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(Eigen::Index dim) { init(dim); }

  void init(Eigen::Index dim) {
    gamma = RowVec<S>::Ones(dim);
    beta = RowVec<S>::Zero(dim);
    zero_grad();
  }

  Mat<S> forward(const Mat<S>& x, bool train) {
    Vec<S> mean = x.rowwise().mean();
    Mat<S> centered = x.colwise() - mean;
    Vec<S> var = centered.array().square().rowwise().mean().matrix();
    Vec<S> inv_std = (var.array() + S(kEps)).rsqrt().matrix();
    Mat<S> xhat = (centered.array().colwise() * inv_std.array()).matrix();
    Mat<S> y = ((xhat.array().rowwise() * gamma.array()).rowwise() + beta.array()).matrix();
    if (train) {
      xhat_cache_ = std::move(xhat);
      inv_std_cache_ = std::move(inv_std);
    }
    return y;
  }

  Mat<S> backward(const Mat<S>& gy) {
    // dx = (dxhat - mean(dxhat) - xhat * mean(dxhat .* xhat)) * inv_std, per row
    Mat<S> dxhat = (gy.array().rowwise() * gamma.array()).matrix();
    g_gamma += (gy.array() * xhat_cache_.array()).colwise().sum().matrix();
    g_beta += gy.colwise().sum();
    Vec<S> m1 = dxhat.rowwise().mean();
    Vec<S> m2 = (dxhat.array() * xhat_cache_.array()).rowwise().mean().matrix();
    Mat<S> gx = dxhat;
    gx.colwise() -= m1;
    gx.array() -= xhat_cache_.array().colwise() * m2.array();
    gx.array().colwise() *= inv_std_cache_.array();
    return gx;
  }

  void zero_grad() {
    g_gamma = RowVec<S>::Zero(gamma.size());
    g_beta = RowVec<S>::Zero(beta.size());
  }

  void collect(std::vector<ParamView<S>>& out, const std::string& prefix) {
    out.push_back({prefix + ".weight", gamma.data(), g_gamma.data(), gamma.size()});
    out.push_back({prefix + ".bias", beta.data(), g_beta.data(), beta.size()});
  }

  void save(TensorStore& ts, const std::string& prefix) const {
    ts.put_vector(prefix + ".weight", gamma.transpose().template cast<float>());
    ts.put_vector(prefix + ".bias", beta.transpose().template cast<float>());
  }

  void load(const TensorStore& ts, const std::string& prefix) {
    VecF g = ts.vector(prefix + ".weight");
    VecF bv = ts.vector(prefix + ".bias");
    if (gamma.size() != 0)
      require(g.size() == gamma.size() && bv.size() == beta.size(),
              prefix + ": stored shape differs from the constructed layer");
    gamma = g.transpose().cast<S>();
    beta = bv.transpose().cast<S>();
    zero_grad();
  }

  RowVec<S> gamma, beta;
  RowVec<S> g_gamma, g_beta;

  static constexpr double kEps = 1e-6;

 private:
  Mat<S> xhat_cache_;
  Vec<S> inv_std_cache_;
};

// Two-layer GELU MLP used inside transformer blocks.
template <typename S>
class Mlp {
 public:
  Mlp() = default;
  Mlp(Eigen::Index dim, Eigen::Index hidden, std::mt19937_64& rng) { init(dim, hidden, rng); }

  void init(Eigen::Index dim, Eigen::Index hidden, std::mt19937_64& rng) {
    fc1.init(dim, hidden, rng);
    fc2.init(hidden, dim, rng);
  }

  Mat<S> forward(const Mat<S>& x, bool train) {
    Mat<S> u = fc1.forward(x, train);
    Mat<S> a = gelu(u);
    if (train) u_cache_ = std::move(u);
    return fc2.forward(a, train);
  }

  Mat<S> backward(const Mat<S>& gy) {
    Mat<S> ga = fc2.backward(gy);
    Mat<S> gu = ga.cwiseProduct(gelu_grad(u_cache_));
    return fc1.backward(gu);
  }

  void zero_grad() {
    fc1.zero_grad();
    fc2.zero_grad();
  }

  void collect(std::vector<ParamView<S>>& out, const std::string& prefix) {
    fc1.collect(out, prefix + ".fc1");
    fc2.collect(out, prefix + ".fc2");
  }

  void save(TensorStore& ts, const std::string& prefix) const {
    fc1.save(ts, prefix + ".fc1");
    fc2.save(ts, prefix + ".fc2");
  }

  void load(const TensorStore& ts, const std::string& prefix) {
    fc1.load(ts, prefix + ".fc1");
    fc2.load(ts, prefix + ".fc2");
  }

  Linear<S> fc1, fc2;

 private:
  Mat<S> u_cache_;
};

}  // namespace dinolab::nn
