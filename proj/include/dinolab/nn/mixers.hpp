#pragma once

#include "dinolab/nn/attention.hpp"
#include "dinolab/nn/layers.hpp"

#include <memory>
#include <string>
#include <vector>

namespace dinolab::nn {

// Token matrices are concatenated over the batch (batch*tokens rows); the
// grid is needed only by convolutional mixers.
struct BatchShape {
  Eigen::Index batch = 1;
  Eigen::Index tokens = 0;
  Eigen::Index grid_h = 0;
  Eigen::Index grid_w = 0;
};

enum class MixerKind { LinearAttention, SoftmaxAttention, Conv1, Conv3, Conv5 };

MixerKind mixer_kind_from_string(const std::string& s);
std::string to_string(MixerKind k);

template <typename S>
class TokenMixer {
 public:
  virtual ~TokenMixer() = default;
  virtual Mat<S> forward(const Mat<S>& x, const BatchShape& shape, bool train) = 0;
  virtual Mat<S> backward(const Mat<S>& gy) = 0;
  virtual void zero_grad() = 0;
  virtual void collect(std::vector<ParamView<S>>& out, const std::string& prefix) = 0;
  virtual void save(TensorStore& ts, const std::string& prefix) const = 0;
  virtual void load(const TensorStore& ts, const std::string& prefix) = 0;
};

template <typename S>
class MultiHeadAttentionMixer : public TokenMixer<S> {
 public:
  MultiHeadAttentionMixer(Eigen::Index dim, Eigen::Index heads, bool linear_kernel,
                          std::mt19937_64& rng)
      : dim_(dim), heads_(heads), head_dim_(dim / heads), linear_(linear_kernel) {
    require(dim % heads == 0, "attention: dim not divisible by heads");
    wq.init(dim, dim, rng);
    wk.init(dim, dim, rng);
    wv.init(dim, dim, rng);
    wo.init(dim, dim, rng);
  }

  Mat<S> forward(const Mat<S>& x, const BatchShape& shape, bool train) override {
    shape_ = shape;
    Mat<S> q = wq.forward(x, train);
    Mat<S> k = wk.forward(x, train);
    Mat<S> v = wv.forward(x, train);
    Mat<S> o(x.rows(), dim_);
    const Eigen::Index n = shape.tokens;
    if (train) {
      lin_caches_.assign(static_cast<std::size_t>(shape.batch * heads_), {});
      attn_caches_.assign(static_cast<std::size_t>(shape.batch * heads_), {});
    }
    for (Eigen::Index s = 0; s < shape.batch; ++s) {
      for (Eigen::Index h = 0; h < heads_; ++h) {
        auto qb = q.block(s * n, h * head_dim_, n, head_dim_);
        auto kb = k.block(s * n, h * head_dim_, n, head_dim_);
        auto vb = v.block(s * n, h * head_dim_, n, head_dim_);
        const std::size_t ci = static_cast<std::size_t>(s * heads_ + h);
        if (linear_) {
          o.block(s * n, h * head_dim_, n, head_dim_) =
              linear_attention<S>(qb, kb, vb, train ? &lin_caches_[ci] : nullptr);
        } else {
          o.block(s * n, h * head_dim_, n, head_dim_) =
              softmax_attention<S>(qb, kb, vb, train ? &attn_caches_[ci] : nullptr);
        }
      }
    }
    if (train) {
      q_cache_ = std::move(q);
      k_cache_ = std::move(k);
      v_cache_ = std::move(v);
    }
    return wo.forward(o, train);
  }

  Mat<S> backward(const Mat<S>& gy) override {
    Mat<S> go = wo.backward(gy);
    Mat<S> gq(go.rows(), dim_), gk(go.rows(), dim_), gv(go.rows(), dim_);
    const Eigen::Index n = shape_.tokens;
    for (Eigen::Index s = 0; s < shape_.batch; ++s) {
      for (Eigen::Index h = 0; h < heads_; ++h) {
        Mat<S> qb = q_cache_.block(s * n, h * head_dim_, n, head_dim_);
        Mat<S> kb = k_cache_.block(s * n, h * head_dim_, n, head_dim_);
        Mat<S> vb = v_cache_.block(s * n, h * head_dim_, n, head_dim_);
        Mat<S> gob = go.block(s * n, h * head_dim_, n, head_dim_);
        const std::size_t ci = static_cast<std::size_t>(s * heads_ + h);
        AttnGrads<S> g = linear_ ? linear_attention_backward(qb, kb, vb, lin_caches_[ci], gob)
                                 : softmax_attention_backward(qb, kb, vb, attn_caches_[ci], gob);
        gq.block(s * n, h * head_dim_, n, head_dim_) = g.gq;
        gk.block(s * n, h * head_dim_, n, head_dim_) = g.gk;
        gv.block(s * n, h * head_dim_, n, head_dim_) = g.gv;
      }
    }
    return wq.backward(gq) + wk.backward(gk) + wv.backward(gv);
  }

  void zero_grad() override {
    wq.zero_grad();
    wk.zero_grad();
    wv.zero_grad();
    wo.zero_grad();
  }

  void collect(std::vector<ParamView<S>>& out, const std::string& prefix) override {
    wq.collect(out, prefix + ".wq");
    wk.collect(out, prefix + ".wk");
    wv.collect(out, prefix + ".wv");
    wo.collect(out, prefix + ".wo");
  }

  void save(TensorStore& ts, const std::string& prefix) const override {
    wq.save(ts, prefix + ".wq");
    wk.save(ts, prefix + ".wk");
    wv.save(ts, prefix + ".wv");
    wo.save(ts, prefix + ".wo");
  }

  void load(const TensorStore& ts, const std::string& prefix) override {
    wq.load(ts, prefix + ".wq");
    wk.load(ts, prefix + ".wk");
    wv.load(ts, prefix + ".wv");
    wo.load(ts, prefix + ".wo");
  }

  Linear<S> wq, wk, wv, wo;

 private:
  Eigen::Index dim_, heads_, head_dim_;
  bool linear_;
  BatchShape shape_;
  Mat<S> q_cache_, k_cache_, v_cache_;
  std::vector<LinearAttnCache<S>> lin_caches_;
  std::vector<Mat<S>> attn_caches_;
};

// Depthwise k x k convolution over the token grid, zero padded; the
// non-attention ablation mixer.
template <typename S>
class DepthwiseConvMixer : public TokenMixer<S> {
 public:
  DepthwiseConvMixer(Eigen::Index dim, int kernel, std::mt19937_64& rng)
      : dim_(dim), k_(kernel) {
    W.resize(dim, kernel * kernel);
    for (Eigen::Index c = 0; c < W.cols(); ++c)
      for (Eigen::Index r = 0; r < W.rows(); ++r) W(r, c) = truncated_normal<S>(rng, S(0.02));
    b = RowVec<S>::Zero(dim);
    zero_grad();
  }

  Mat<S> forward(const Mat<S>& x, const BatchShape& shape, bool train) override {
    require(shape.grid_h * shape.grid_w == shape.tokens, "conv mixer: grid does not match tokens");
    shape_ = shape;
    if (train) x_cache_ = x;
    const int r = k_ / 2;
    Mat<S> y(x.rows(), x.cols());
    for (Eigen::Index s = 0; s < shape.batch; ++s) {
      const Eigen::Index base = s * shape.tokens;
      for (Eigen::Index c = 0; c < dim_; ++c) {
        for (Eigen::Index gy = 0; gy < shape.grid_h; ++gy) {
          for (Eigen::Index gx = 0; gx < shape.grid_w; ++gx) {
            S acc = b(c);
            for (int dy = -r; dy <= r; ++dy) {
              for (int dx = -r; dx <= r; ++dx) {
                const Eigen::Index yy = gy + dy, xx = gx + dx;
                if (yy < 0 || yy >= shape.grid_h || xx < 0 || xx >= shape.grid_w) continue;
                acc += W(c, (dy + r) * k_ + (dx + r)) * x(base + yy * shape.grid_w + xx, c);
              }
            }
            y(base + gy * shape.grid_w + gx, c) = acc;
          }
        }
      }
    }
    return y;
  }

  Mat<S> backward(const Mat<S>& gy) override {
    const int r = k_ / 2;
    Mat<S> gx = Mat<S>::Zero(gy.rows(), gy.cols());
    for (Eigen::Index s = 0; s < shape_.batch; ++s) {
      const Eigen::Index base = s * shape_.tokens;
      for (Eigen::Index c = 0; c < dim_; ++c) {
        for (Eigen::Index oy = 0; oy < shape_.grid_h; ++oy) {
          for (Eigen::Index ox = 0; ox < shape_.grid_w; ++ox) {
            const S g = gy(base + oy * shape_.grid_w + ox, c);
            gb(c) += g;
            for (int dy = -r; dy <= r; ++dy) {
              for (int dx = -r; dx <= r; ++dx) {
                const Eigen::Index yy = oy + dy, xx = ox + dx;
                if (yy < 0 || yy >= shape_.grid_h || xx < 0 || xx >= shape_.grid_w) continue;
                const Eigen::Index in_row = base + yy * shape_.grid_w + xx;
                gW(c, (dy + r) * k_ + (dx + r)) += g * x_cache_(in_row, c);
                gx(in_row, c) += g * W(c, (dy + r) * k_ + (dx + r));
              }
            }
          }
        }
      }
    }
    return gx;
  }

  void zero_grad() override {
    gW = Mat<S>::Zero(W.rows(), W.cols());
    gb = RowVec<S>::Zero(b.size());
  }

  void collect(std::vector<ParamView<S>>& out, const std::string& prefix) override {
    out.push_back({prefix + ".weight", W.data(), gW.data(), W.size()});
    out.push_back({prefix + ".bias", b.data(), gb.data(), b.size()});
  }

  void save(TensorStore& ts, const std::string& prefix) const override {
    ts.put_matrix(prefix + ".weight", W.template cast<float>());
    ts.put_vector(prefix + ".bias", b.transpose().template cast<float>());
  }

  void load(const TensorStore& ts, const std::string& prefix) override {
    W = ts.matrix(prefix + ".weight").cast<S>();
    b = ts.vector(prefix + ".bias").transpose().cast<S>();
    zero_grad();
  }

  Mat<S> W;
  RowVec<S> b;
  Mat<S> gW;
  RowVec<S> gb;

 private:
  Eigen::Index dim_;
  int k_;
  BatchShape shape_;
  Mat<S> x_cache_;
};

template <typename S>
std::unique_ptr<TokenMixer<S>> make_mixer(MixerKind kind, Eigen::Index dim, Eigen::Index heads,
                                          std::mt19937_64& rng) {
  switch (kind) {
    case MixerKind::LinearAttention:
      return std::make_unique<MultiHeadAttentionMixer<S>>(dim, heads, true, rng);
    case MixerKind::SoftmaxAttention:
      return std::make_unique<MultiHeadAttentionMixer<S>>(dim, heads, false, rng);
    case MixerKind::Conv1:
      return std::make_unique<DepthwiseConvMixer<S>>(dim, 1, rng);
    case MixerKind::Conv3:
      return std::make_unique<DepthwiseConvMixer<S>>(dim, 3, rng);
    case MixerKind::Conv5:
      return std::make_unique<DepthwiseConvMixer<S>>(dim, 5, rng);
  }
  throw ConfigError("unknown mixer kind");
}

inline MixerKind mixer_kind_from_string(const std::string& s) {
  if (s == "linear_attention") return MixerKind::LinearAttention;
  if (s == "softmax_attention") return MixerKind::SoftmaxAttention;
  if (s == "conv1") return MixerKind::Conv1;
  if (s == "conv3") return MixerKind::Conv3;
  if (s == "conv5") return MixerKind::Conv5;
  throw ConfigError("unknown mixer: " + s);
}

inline std::string to_string(MixerKind k) {
  switch (k) {
    case MixerKind::LinearAttention: return "linear_attention";
    case MixerKind::SoftmaxAttention: return "softmax_attention";
    case MixerKind::Conv1: return "conv1";
    case MixerKind::Conv3: return "conv3";
    case MixerKind::Conv5: return "conv5";
  }
  return "?";
}

}  // namespace dinolab::nn
