#pragma once

#include "dinolab/nn/block.hpp"

namespace dinolab {

struct DecoderConfig {
  int num_layers = 8;
  int embed_dim = 0;
  int num_heads = 0;  // 0 resolves to embed_dim/64 (at least 1)
  nn::MixerKind mixer = nn::MixerKind::LinearAttention;
  double mlp_ratio = 4.0;

  void validate() const {
    if (num_layers < 1) throw ConfigError("decoder num_layers must be >= 1");
    if (embed_dim <= 0) throw ConfigError("decoder embed_dim must be positive");
    if (mlp_ratio <= 0.0) throw ConfigError("decoder mlp_ratio must be positive");
  }

  int resolved_heads() const {
    int h = num_heads > 0 ? num_heads : std::max(1, embed_dim / 64);
    if (embed_dim % h != 0) throw ConfigError("decoder heads must divide embed_dim");
    return h;
  }
};

// Stack of pre-norm transformer blocks reconstructing encoder features from
// the bottleneck output. Block outputs are returned in execution order; the
// first block's output is trained against the deepest encoder target.
template <typename S>
class Decoder {
 public:
  Decoder(const DecoderConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
    cfg_.validate();
    const int heads = cfg_.resolved_heads();
    blocks_.reserve(static_cast<std::size_t>(cfg_.num_layers));
    for (int i = 0; i < cfg_.num_layers; ++i)
      blocks_.emplace_back(cfg_.embed_dim, heads, cfg_.mixer, cfg_.mlp_ratio, rng);
  }

  const DecoderConfig& config() const { return cfg_; }

  std::vector<Mat<S>> forward(const Mat<S>& z, const nn::BatchShape& shape, bool train) {
    std::vector<Mat<S>> outputs;
    outputs.reserve(blocks_.size());
    const Mat<S>* x = &z;
    for (auto& blk : blocks_) {
      outputs.push_back(blk.forward(*x, shape, train));
      x = &outputs.back();
    }
    return outputs;
  }

  // Single-image eval-mode pass.
  std::vector<Mat<S>> decode(const Mat<S>& z, int grid_h, int grid_w) {
    nn::BatchShape shape{1, z.rows(), grid_h, grid_w};
    return forward(z, shape, false);
  }

  // g_outputs holds dL/d(block output) per block; returns dL/dz.
  Mat<S> backward(const std::vector<Mat<S>>& g_outputs) {
    require(g_outputs.size() == blocks_.size(), "decoder backward: gradient count mismatch");
    Mat<S> g = g_outputs.back();
    for (std::size_t i = blocks_.size(); i-- > 0;) {
      g = blocks_[i].backward(g);
      if (i > 0) g += g_outputs[i - 1];
    }
    return g;
  }

  void zero_grad() {
    for (auto& blk : blocks_) blk.zero_grad();
  }

  void collect(std::vector<nn::ParamView<S>>& out) {
    for (std::size_t i = 0; i < blocks_.size(); ++i)
      blocks_[i].collect(out, "decoder.block" + std::to_string(i + 1));
  }

  void save(TensorStore& ts) const {
    for (std::size_t i = 0; i < blocks_.size(); ++i)
      blocks_[i].save(ts, "decoder.block" + std::to_string(i + 1));
  }

  void load(const TensorStore& ts) {
    for (std::size_t i = 0; i < blocks_.size(); ++i)
      blocks_[i].load(ts, "decoder.block" + std::to_string(i + 1));
  }

  std::vector<nn::TransformerBlock<S>>& blocks() { return blocks_; }

 private:
  DecoderConfig cfg_;
  std::vector<nn::TransformerBlock<S>> blocks_;
};

}  // namespace dinolab
