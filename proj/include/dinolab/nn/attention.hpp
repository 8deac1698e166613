#pragma once

#include "dinolab/common.hpp"
#include "dinolab/nn/ops.hpp"

namespace dinolab::nn {

template <typename S>
struct AttnGrads {
  Mat<S> gq, gk, gv;
};

template <typename S>
struct LinearAttnCache {
  Mat<S> phi_q, phi_k;
  Mat<S> ctx;  // phi(K)^T V
  Vec<S> r;    // per-row normalizer phi(Q) (phi(K)^T 1)
};

// Kernelized attention phi(Q) (phi(K)^T V) with phi = elu+1, rows normalized
// by phi(Q) (phi(K)^T 1). Never materializes an N x N matrix.
template <typename S>
Mat<S> linear_attention(const Mat<S>& q, const Mat<S>& k, const Mat<S>& v,
                        LinearAttnCache<S>* cache = nullptr) {
  require(q.cols() == k.cols() && k.rows() == v.rows(), "linear_attention: shape mismatch");
  Mat<S> phi_q = elu1(q);
  Mat<S> phi_k = elu1(k);
  Mat<S> ctx = phi_k.transpose() * v;
  Vec<S> key_sum = phi_k.colwise().sum().transpose();
  Vec<S> r = phi_q * key_sum;
  if (r.minCoeff() <= S(0)) throw NumericError("linear_attention: non-positive normalizer");
  Mat<S> out = phi_q * ctx;
  out.array().colwise() /= r.array();
  if (cache) {
    cache->phi_q = std::move(phi_q);
    cache->phi_k = std::move(phi_k);
    cache->ctx = std::move(ctx);
    cache->r = std::move(r);
  }
  return out;
}

template <typename S>
AttnGrads<S> linear_attention_backward(const Mat<S>& q, const Mat<S>& k, const Mat<S>& v,
                                       const LinearAttnCache<S>& c, const Mat<S>& go) {
  const Mat<S>& a = c.phi_q;
  const Mat<S>& b = c.phi_k;
  // Forward pieces: U = a*ctx, r = a*s with s = b^T 1, O = U/r rowwise.
  Mat<S> gu = (go.array().colwise() / c.r.array()).matrix();
  Mat<S> u = a * c.ctx;
  Vec<S> gr =
      (-(go.array() * u.array()).rowwise().sum() / (c.r.array() * c.r.array())).matrix();
  Vec<S> s = b.colwise().sum().transpose();
  Mat<S> ga = gu * c.ctx.transpose() + gr * s.transpose();
  Mat<S> gctx = a.transpose() * gu;
  Vec<S> gs = a.transpose() * gr;
  Mat<S> gb = v * gctx.transpose();
  gb.rowwise() += gs.transpose();
  AttnGrads<S> out;
  out.gq = ga.cwiseProduct(elu1_grad(q));
  out.gk = gb.cwiseProduct(elu1_grad(k));
  out.gv = b * gctx;
  return out;
}

// Standard scaled dot-product attention; quadratic in N, kept for ablations.
template <typename S>
Mat<S> softmax_attention(const Mat<S>& q, const Mat<S>& k, const Mat<S>& v,
                         Mat<S>* attn_cache = nullptr) {
  require(q.cols() == k.cols() && k.rows() == v.rows(), "softmax_attention: shape mismatch");
  const S scale = S(1) / std::sqrt(S(q.cols()));
  Mat<S> attn = (q * k.transpose()) * scale;
  softmax_rows_inplace(attn);
  Mat<S> out = attn * v;
  if (attn_cache) *attn_cache = std::move(attn);
  return out;
}

template <typename S>
AttnGrads<S> softmax_attention_backward(const Mat<S>& q, const Mat<S>& k, const Mat<S>& v,
                                        const Mat<S>& attn, const Mat<S>& go) {
  const S scale = S(1) / std::sqrt(S(q.cols()));
  Mat<S> gattn = go * v.transpose();
  // Softmax Jacobian per row: gS_i = A_i .* (gA_i - <gA_i, A_i>)
  Vec<S> dots = (gattn.array() * attn.array()).rowwise().sum().matrix();
  Mat<S> gscores = (attn.array() * (gattn.colwise() - dots).array()).matrix();
  AttnGrads<S> out;
  out.gq = gscores * k * scale;
  out.gk = gscores.transpose() * q * scale;
  out.gv = attn.transpose() * go;
  return out;
}

// Explicit N x N row-weight matrices, for diagnostics only (attention-mass
// dispersion checks); O(N^2) on purpose.
template <typename S>
Mat<S> linear_attention_weights(const Mat<S>& q, const Mat<S>& k) {
  Mat<S> w = elu1(q) * elu1(k).transpose();
  Vec<S> r = w.rowwise().sum();
  w.array().colwise() /= r.array();
  return w;
}

template <typename S>
Mat<S> softmax_attention_weights(const Mat<S>& q, const Mat<S>& k) {
  const S scale = S(1) / std::sqrt(S(q.cols()));
  Mat<S> w = (q * k.transpose()) * scale;
  softmax_rows_inplace(w);
  return w;
}

}  // namespace dinolab::nn
