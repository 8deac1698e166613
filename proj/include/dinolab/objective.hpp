#pragma once

#include "dinolab/encoder.hpp"

#include <algorithm>
#include <numeric>
#include <utility>
#include <vector>

namespace dinolab {

enum class GroupingMode {
  Layer2LayerLast1,
  Layer2LayerDense,
  Layer2LayerSparse2,
  Layer2LayerSparse4,
  Group1,
  Group2,
  Group4,
};

GroupingMode grouping_mode_from_string(const std::string& s);
std::string to_string(GroupingMode m);

struct GroupingScheme {
  GroupingMode mode = GroupingMode::Group2;
  std::vector<std::vector<int>> encoder_sets;  // 1-based encoder layer indices
  std::vector<std::vector<int>> decoder_sets;  // 1-based decoder block indices
};

// Pair tapped encoder layers with decoder blocks. Decoder block 1 reconstructs
// the deepest tapped layer, so selection position p maps to block |M|+1-p;
// grouped modes pair contiguous runs accordingly.
inline GroupingScheme make_grouping(GroupingMode mode, const LayerSelection& sel) {
  const int n = static_cast<int>(sel.indices.size());
  if (n < 1) throw ConfigError("grouping needs a non-empty layer selection");
  auto enc_at = [&](int pos) { return sel.indices[static_cast<std::size_t>(pos - 1)]; };
  auto dec_at = [&](int pos) { return n + 1 - pos; };
  // Position range [lo, hi] -> one (encoder set, decoder set) pair.
  auto span_pair = [&](int lo, int hi, GroupingScheme& g) {
    std::vector<int> enc, dec;
    for (int p = lo; p <= hi; ++p) enc.push_back(enc_at(p));
    for (int p = hi; p >= lo; --p) dec.push_back(dec_at(p));
    g.encoder_sets.push_back(std::move(enc));
    g.decoder_sets.push_back(std::move(dec));
  };

  GroupingScheme g;
  g.mode = mode;
  switch (mode) {
    case GroupingMode::Layer2LayerDense:
      for (int p = 1; p <= n; ++p) span_pair(p, p, g);
      break;
    case GroupingMode::Layer2LayerLast1:
      span_pair(n, n, g);
      break;
    case GroupingMode::Layer2LayerSparse2:
      for (int p = 2; p <= n; p += 2) span_pair(p, p, g);
      break;
    case GroupingMode::Layer2LayerSparse4:
      for (int p = 4; p <= n; p += 4) span_pair(p, p, g);
      break;
    case GroupingMode::Group1:
      span_pair(1, n, g);
      break;
    case GroupingMode::Group2:
      if (n % 2 != 0) throw ConfigError("group2 needs an even layer count");
      span_pair(1, n / 2, g);
      span_pair(n / 2 + 1, n, g);
      break;
    case GroupingMode::Group4:
      if (n % 4 != 0) throw ConfigError("group4 needs a layer count divisible by 4");
      for (int q = 0; q < 4; ++q) span_pair(q * n / 4 + 1, (q + 1) * n / 4, g);
      break;
  }
  if (g.encoder_sets.empty()) throw ConfigError("grouping produced no pairs for this selection");
  return g;
}

inline void validate_scheme(const GroupingScheme& scheme, const LayerSelection& sel,
                            int num_decoder_blocks) {
  if (scheme.encoder_sets.size() != scheme.decoder_sets.size())
    throw ConfigError("grouping: encoder/decoder set counts differ");
  std::vector<int> seen_enc, seen_dec;
  for (const auto& s : scheme.encoder_sets)
    for (int i : s) {
      if (std::find(sel.indices.begin(), sel.indices.end(), i) == sel.indices.end())
        throw ConfigError("grouping references untapped layer " + std::to_string(i));
      if (std::find(seen_enc.begin(), seen_enc.end(), i) != seen_enc.end())
        throw ConfigError("grouping: encoder layer " + std::to_string(i) + " used twice");
      seen_enc.push_back(i);
    }
  for (const auto& s : scheme.decoder_sets)
    for (int j : s) {
      if (j < 1 || j > num_decoder_blocks)
        throw ConfigError("grouping references missing decoder block " + std::to_string(j));
      if (std::find(seen_dec.begin(), seen_dec.end(), j) != seen_dec.end())
        throw ConfigError("grouping: decoder block " + std::to_string(j) + " used twice");
      seen_dec.push_back(j);
    }
}

// Summed reconstruction targets and predictions for one image.
template <typename S>
std::vector<std::pair<Mat<S>, Mat<S>>> build_groups(const FeatureStack& stack,
                                                    const std::vector<Mat<S>>& decoded,
                                                    const GroupingScheme& scheme) {
  std::vector<std::pair<Mat<S>, Mat<S>>> pairs;
  pairs.reserve(scheme.encoder_sets.size());
  for (std::size_t k = 0; k < scheme.encoder_sets.size(); ++k) {
    Mat<S> target;
    for (int i : scheme.encoder_sets[k]) {
      auto it = stack.layers.find(i);
      if (it == stack.layers.end())
        throw ConfigError("build_groups: stack missing layer " + std::to_string(i));
      Mat<S> patches = it->second.patches.template cast<S>();
      target = target.size() ? Mat<S>(target + patches) : patches;
    }
    Mat<S> pred;
    for (int j : scheme.decoder_sets[k]) {
      if (j < 1 || j > static_cast<int>(decoded.size()))
        throw ConfigError("build_groups: missing decoder block " + std::to_string(j));
      const Mat<S>& out = decoded[static_cast<std::size_t>(j - 1)];
      pred = pred.size() ? Mat<S>(pred + out) : out;
    }
    if (target.rows() != pred.rows() || target.cols() != pred.cols())
      throw ShapeError("build_groups: target/prediction shape mismatch");
    pairs.emplace_back(std::move(target), std::move(pred));
  }
  return pairs;
}

struct LooseLossConfig {
  double discard_rate_final = 0.9;
  long warmup_iters = 1000;
  double grad_scale = 0.1;

  void validate() const {
    if (discard_rate_final < 0.0 || discard_rate_final >= 1.0)
      throw ConfigError("discard_rate_final must be in [0,1)");
    if (grad_scale <= 0.0 || grad_scale > 1.0) throw ConfigError("grad_scale must be in (0,1]");
    if (warmup_iters < 0) throw ConfigError("warmup_iters must be >= 0");
  }
};

// Fraction of well-reconstructed tokens whose gradients are damped; warms up
// linearly from zero.
inline double discard_rate(long iter, const LooseLossConfig& cfg) {
  if (cfg.warmup_iters <= 0) return cfg.discard_rate_final;
  double progress = std::min(1.0, static_cast<double>(iter) / static_cast<double>(cfg.warmup_iters));
  return progress * cfg.discard_rate_final;
}

template <typename S>
struct LossResult {
  double value = 0.0;
  std::vector<Mat<S>> grad_pred;        // dL/d prediction, per group
  std::vector<Eigen::Index> modulated;  // damped token count, per group
};

constexpr double kCosineEps = 1e-8;

namespace detail {

// Cosine distance between the flattened per-sample slices, with gradients on
// the prediction side. Shared by the plain and loose variants; the loose one
// then rescales rows of well-reconstructed tokens.
template <typename S>
LossResult<S> cosine_loss_impl(const std::vector<std::pair<Mat<S>, Mat<S>>>& pairs,
                               Eigen::Index batch, double modulation_rate, double grad_scale) {
  if (pairs.empty()) throw ShapeError("cosine loss: no group pairs");
  LossResult<S> res;
  res.grad_pred.reserve(pairs.size());
  double total = 0.0;
  const double sample_weight = 1.0 / (static_cast<double>(pairs.size()) * static_cast<double>(batch));
  for (const auto& [target, pred] : pairs) {
    if (target.rows() != pred.rows() || target.cols() != pred.cols())
      throw ShapeError("cosine loss: pair shape mismatch");
    if (batch <= 0 || target.rows() % batch != 0)
      throw ShapeError("cosine loss: rows not divisible by batch");
    const Eigen::Index n = target.rows() / batch;
    Mat<S> grad = Mat<S>::Zero(pred.rows(), pred.cols());
    for (Eigen::Index s = 0; s < batch; ++s) {
      auto t = target.middleRows(s * n, n);
      auto p = pred.middleRows(s * n, n);
      const double dot = t.template cast<double>().cwiseProduct(p.template cast<double>()).sum();
      const double nt = std::sqrt(t.template cast<double>().array().square().sum());
      const double np = std::sqrt(p.template cast<double>().array().square().sum());
      const double denom = std::max(nt * np, kCosineEps);
      const double cos_sim = std::max(-1.0, std::min(1.0, dot / denom));
      total += (1.0 - cos_sim) * sample_weight;
      if (nt * np > kCosineEps) {
        // d(1 - u.v/(|u||v|))/dv = -u/(|u||v|) + (u.v) v/(|u||v|^3)
        grad.middleRows(s * n, n) =
            (sample_weight *
             (-t.template cast<double>() / denom +
              (dot / (denom * np * np)) * p.template cast<double>()))
                .template cast<S>();
      }
    }
    res.grad_pred.push_back(std::move(grad));
    res.modulated.push_back(0);
  }
  res.value = total;

  if (modulation_rate > 0.0) {
    for (std::size_t k = 0; k < pairs.size(); ++k) {
      const Mat<S>& target = pairs[k].first;
      const Mat<S>& pred = pairs[k].second;
      const Eigen::Index rows = target.rows();
      std::vector<double> dist(static_cast<std::size_t>(rows));
      for (Eigen::Index r = 0; r < rows; ++r) {
        const double dot =
            target.row(r).template cast<double>().dot(pred.row(r).template cast<double>());
        const double denom =
            std::max(target.row(r).template cast<double>().norm() *
                         pred.row(r).template cast<double>().norm(),
                     kCosineEps);
        dist[static_cast<std::size_t>(r)] = 1.0 - dot / denom;
      }
      // Batch-global ranking; ties broken by token index so the damped count
      // is deterministic.
      std::vector<Eigen::Index> order(static_cast<std::size_t>(rows));
      std::iota(order.begin(), order.end(), 0);
      std::sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
        const double da = dist[static_cast<std::size_t>(a)];
        const double db = dist[static_cast<std::size_t>(b)];
        return da < db || (da == db && a < b);
      });
      const auto damped = static_cast<Eigen::Index>(modulation_rate * static_cast<double>(rows));
      for (Eigen::Index i = 0; i < damped; ++i)
        res.grad_pred[k].row(order[static_cast<std::size_t>(i)]) *= S(grad_scale);
      res.modulated[k] = damped;
    }
  }
  return res;
}

}  // namespace detail

template <typename S>
LossResult<S> loose_loss(const std::vector<std::pair<Mat<S>, Mat<S>>>& pairs, Eigen::Index batch,
                         long iter, const LooseLossConfig& cfg) {
  cfg.validate();
  return detail::cosine_loss_impl(pairs, batch, discard_rate(iter, cfg), cfg.grad_scale);
}

template <typename S>
LossResult<S> plain_cosine_loss(const std::vector<std::pair<Mat<S>, Mat<S>>>& pairs,
                                Eigen::Index batch) {
  return detail::cosine_loss_impl(pairs, batch, 0.0, 1.0);
}

inline GroupingMode grouping_mode_from_string(const std::string& s) {
  if (s == "layer2layer_last1") return GroupingMode::Layer2LayerLast1;
  if (s == "layer2layer_dense") return GroupingMode::Layer2LayerDense;
  if (s == "layer2layer_sparse2") return GroupingMode::Layer2LayerSparse2;
  if (s == "layer2layer_sparse4") return GroupingMode::Layer2LayerSparse4;
  if (s == "group1") return GroupingMode::Group1;
  if (s == "group2") return GroupingMode::Group2;
  if (s == "group4") return GroupingMode::Group4;
  throw ConfigError("unknown grouping scheme: " + s);
}

inline std::string to_string(GroupingMode m) {
  switch (m) {
    case GroupingMode::Layer2LayerLast1: return "layer2layer_last1";
    case GroupingMode::Layer2LayerDense: return "layer2layer_dense";
    case GroupingMode::Layer2LayerSparse2: return "layer2layer_sparse2";
    case GroupingMode::Layer2LayerSparse4: return "layer2layer_sparse4";
    case GroupingMode::Group1: return "group1";
    case GroupingMode::Group2: return "group2";
    case GroupingMode::Group4: return "group4";
  }
  return "?";
}

}  // namespace dinolab
