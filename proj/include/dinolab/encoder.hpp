#pragma once

#include "dinolab/common.hpp"
#include "dinolab/tensor_store.hpp"

#include <array>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace dinolab {

// Normalized image as three H x W channel planes.
using ImageF = std::array<MatF, 3>;

struct EncoderSpec {
  int depth = 0;
  int embed_dim = 0;
  int patch_size = 0;
  int num_prefix_tokens = 1;  // class token plus optional register tokens
  int num_heads = 0;
  std::string weight_id;
  std::array<float, 3> image_mean{0.5f, 0.5f, 0.5f};
  std::array<float, 3> image_std{0.5f, 0.5f, 0.5f};

  void validate() const;
};

struct LayerSelection {
  std::vector<int> indices;  // 1-based encoder layer indices, strictly increasing
};

// Built-in tap policies for the supported depths; other depths must pass an
// explicit list.
LayerSelection select_layers(const EncoderSpec& spec);
LayerSelection select_layers(const EncoderSpec& spec, const std::vector<int>& explicit_indices);

struct FeatureLayer {
  VecF cls;      // class token, d
  MatF patches;  // N x d
};

struct FeatureStack {
  std::map<int, FeatureLayer> layers;  // keyed by 1-based encoder layer index
  int grid_h = 0;
  int grid_w = 0;
  bool recentered = false;
};

// Subtract each layer's own class token from its patch rows; class tokens are
// kept so the shift is invertible.
FeatureStack recenter(const FeatureStack& stack);
FeatureStack uncenter(const FeatureStack& stack);

// weight_id resolution: existing path, then $DINOLAB_CACHE/<id>[.dlts], then
// the host-supplied download hook.
using DownloadHook = std::function<std::string(const std::string& weight_id)>;
std::string resolve_weight_path(const std::string& weight_id, const DownloadHook& hook = nullptr);

// Frozen ViT feature extractor. Weights are parsed once at load time and
// never mutated; extraction is a pure function of (weights, image).
class VitEncoder {
 public:
  static VitEncoder from_store(const TensorStore& store);
  static VitEncoder load(const std::string& weight_id, const DownloadHook& hook = nullptr);

  const EncoderSpec& spec() const { return spec_; }

  FeatureStack extract(const ImageF& image, const LayerSelection& selection) const;

  std::uint64_t checksum() const;

 private:
  struct Block {
    RowVec<Real> ln1_w, ln1_b, ln2_w, ln2_b;
    MatF qkv_w;   // d x 3d
    RowVec<Real> qkv_b;
    MatF proj_w;  // d x d
    RowVec<Real> proj_b;
    MatF fc1_w;   // d x h
    RowVec<Real> fc1_b;
    MatF fc2_w;   // h x d
    RowVec<Real> fc2_b;
    RowVec<Real> ls1, ls2;  // layer-scale gains, ones when absent
  };

  EncoderSpec spec_;
  bool erf_gelu_ = false;
  MatF patch_w_;  // 3*p*p x d
  RowVec<Real> patch_b_;
  VecF cls_token_;
  MatF reg_tokens_;    // R x d
  VecF pos_cls_;
  MatF pos_patches_;   // G0*G0 x d
  int pos_grid_ = 0;
  std::vector<Block> blocks_;
};

}  // namespace dinolab
