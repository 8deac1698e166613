#pragma once

#include "dinolab/nn/mixers.hpp"

namespace dinolab::nn {

// Pre-norm transformer block: x + mixer(ln1(x)), then y + mlp(ln2(y)).
template <typename S>
class TransformerBlock {
 public:
  TransformerBlock(Eigen::Index dim, Eigen::Index heads, MixerKind kind, double mlp_ratio,
                   std::mt19937_64& rng) {
    ln1.init(dim);
    ln2.init(dim);
    mixer = make_mixer<S>(kind, dim, heads, rng);
    mlp.init(dim, static_cast<Eigen::Index>(mlp_ratio * static_cast<double>(dim)), rng);
  }

  Mat<S> forward(const Mat<S>& x, const BatchShape& shape, bool train) {
    Mat<S> y = x + mixer->forward(ln1.forward(x, train), shape, train);
    return y + mlp.forward(ln2.forward(y, train), train);
  }

  Mat<S> backward(const Mat<S>& g_out) {
    Mat<S> gy = g_out + ln2.backward(mlp.backward(g_out));
    return gy + ln1.backward(mixer->backward(gy));
  }

  void zero_grad() {
    ln1.zero_grad();
    ln2.zero_grad();
    mixer->zero_grad();
    mlp.zero_grad();
  }

  void collect(std::vector<ParamView<S>>& out, const std::string& prefix) {
    ln1.collect(out, prefix + ".ln1");
    mixer->collect(out, prefix + ".mixer");
    ln2.collect(out, prefix + ".ln2");
    mlp.collect(out, prefix + ".mlp");
  }

  void save(TensorStore& ts, const std::string& prefix) const {
    ln1.save(ts, prefix + ".ln1");
    mixer->save(ts, prefix + ".mixer");
    ln2.save(ts, prefix + ".ln2");
    mlp.save(ts, prefix + ".mlp");
  }

  void load(const TensorStore& ts, const std::string& prefix) {
    ln1.load(ts, prefix + ".ln1");
    mixer->load(ts, prefix + ".mixer");
    ln2.load(ts, prefix + ".ln2");
    mlp.load(ts, prefix + ".mlp");
  }

  LayerNorm<S> ln1, ln2;
  std::unique_ptr<TokenMixer<S>> mixer;
  Mlp<S> mlp;
};

}  // namespace dinolab::nn
