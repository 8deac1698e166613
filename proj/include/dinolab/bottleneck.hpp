#pragma once

#include "dinolab/encoder.hpp"
#include "dinolab/nn/layers.hpp"

namespace dinolab {

enum class NoiseMode { Dropout, FeatureJitter, None };

NoiseMode noise_mode_from_string(const std::string& s);
std::string to_string(NoiseMode m);

struct BottleneckConfig {
  int num_layers = 3;
  int hidden_dim = 0;  // 0 resolves to 4*d at construction
  double dropout_rate = 0.2;
  NoiseMode noise_mode = NoiseMode::Dropout;
  double jitter_scale = 20.0;

  void validate() const {
    if (num_layers < 1) throw ConfigError("bottleneck num_layers must be >= 1");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0)
      throw ConfigError("bottleneck dropout_rate must be in [0,1)");
    if (hidden_dim < 0) throw ConfigError("bottleneck hidden_dim must be positive");
  }
};

// Elementwise sum of the tapped layers' patch tokens.
inline MatF aggregate(const FeatureStack& stack) {
  if (stack.layers.empty()) throw ShapeError("aggregate: empty feature stack");
  MatF sum;
  for (const auto& [idx, layer] : stack.layers) {
    if (sum.size() == 0) {
      sum = layer.patches;
    } else {
      if (layer.patches.rows() != sum.rows() || layer.patches.cols() != sum.cols())
        throw ShapeError("aggregate: layer " + std::to_string(idx) + " shape mismatch");
      sum += layer.patches;
    }
  }
  return sum;
}

// MLP between encoder and decoder; dropout on every layer output acts as the
// training-time pseudo feature anomaly.
template <typename S>
class Bottleneck {
 public:
  Bottleneck(Eigen::Index dim, const BottleneckConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
    cfg_.validate();
    if (cfg_.hidden_dim == 0) cfg_.hidden_dim = static_cast<int>(4 * dim);
    const Eigen::Index h = cfg_.hidden_dim;
    layers_.resize(static_cast<std::size_t>(cfg_.num_layers));
    for (int i = 0; i < cfg_.num_layers; ++i) {
      Eigen::Index in = (i == 0) ? dim : h;
      Eigen::Index out = (i == cfg_.num_layers - 1) ? dim : h;
      layers_[static_cast<std::size_t>(i)].init(in, out, rng);
    }
  }

  const BottleneckConfig& config() const { return cfg_; }

  Mat<S> forward(const Mat<S>& z0, bool training, std::uint64_t rng_seed) {
    if (!all_finite(z0)) throw NumericError("bottleneck: non-finite input");
    std::mt19937_64 rng = make_rng(rng_seed);
    Mat<S> x = z0;
    if (training && cfg_.noise_mode == NoiseMode::FeatureJitter) {
      for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const S sigma = S(cfg_.jitter_scale) * x.row(r).cwiseAbs().mean();
        for (Eigen::Index c = 0; c < x.cols(); ++c) x(r, c) += sigma * S(normal01(rng));
      }
    }
    const bool mask_on = training && cfg_.noise_mode == NoiseMode::Dropout &&
                         cfg_.dropout_rate > 0.0;
    pre_acts_.clear();
    masks_.clear();
    for (auto& lin : layers_) {
      Mat<S> u = lin.forward(x, training);
      x = nn::gelu(u);
      if (training) pre_acts_.push_back(std::move(u));
      if (mask_on) {
        Mat<S> m = nn::dropout_mask<S>(x.rows(), x.cols(), S(cfg_.dropout_rate), rng);
        x = x.cwiseProduct(m);
        masks_.push_back(std::move(m));
      }
    }
    return x;
  }

  Mat<S> backward(const Mat<S>& g_out) {
    Mat<S> g = g_out;
    for (std::size_t i = layers_.size(); i-- > 0;) {
      if (!masks_.empty()) g = g.cwiseProduct(masks_[i]);
      g = g.cwiseProduct(nn::gelu_grad(pre_acts_[i]));
      g = layers_[i].backward(g);
    }
    return g;
  }

  void zero_grad() {
    for (auto& lin : layers_) lin.zero_grad();
  }

  void collect(std::vector<nn::ParamView<S>>& out) {
    for (std::size_t i = 0; i < layers_.size(); ++i)
      layers_[i].collect(out, "bottleneck.fc" + std::to_string(i + 1));
  }

  void save(TensorStore& ts) const {
    for (std::size_t i = 0; i < layers_.size(); ++i)
      layers_[i].save(ts, "bottleneck.fc" + std::to_string(i + 1));
  }

  void load(const TensorStore& ts) {
    for (std::size_t i = 0; i < layers_.size(); ++i)
      layers_[i].load(ts, "bottleneck.fc" + std::to_string(i + 1));
  }

  std::vector<nn::Linear<S>>& layers() { return layers_; }

 private:
  BottleneckConfig cfg_;
  std::vector<nn::Linear<S>> layers_;
  std::vector<Mat<S>> pre_acts_;
  std::vector<Mat<S>> masks_;
};

inline NoiseMode noise_mode_from_string(const std::string& s) {
  if (s == "dropout") return NoiseMode::Dropout;
  if (s == "feature_jitter") return NoiseMode::FeatureJitter;
  if (s == "none") return NoiseMode::None;
  throw ConfigError("unknown noise_mode: " + s);
}

inline std::string to_string(NoiseMode m) {
  switch (m) {
    case NoiseMode::Dropout: return "dropout";
    case NoiseMode::FeatureJitter: return "feature_jitter";
    case NoiseMode::None: return "none";
  }
  return "?";
}

}  // namespace dinolab
