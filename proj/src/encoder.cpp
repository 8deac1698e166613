#include "dinolab/encoder.hpp"

#include "dinolab/nn/ops.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <sstream>

namespace dinolab {
namespace {

namespace fs = std::filesystem;

std::array<float, 3> parse_triple(const std::string& s) {
  std::array<float, 3> out{};
  std::stringstream ss(s);
  std::string tok;
  for (int i = 0; i < 3; ++i) {
    if (!std::getline(ss, tok, ',')) throw ConfigError("expected 3 comma-separated values: " + s);
    out[static_cast<std::size_t>(i)] = std::stof(tok);
  }
  return out;
}

int meta_int(const TensorStore& ts, const std::string& key) {
  auto it = ts.meta.find(key);
  if (it == ts.meta.end()) throw IoError("encoder weights missing meta key: " + key);
  return std::stoi(it->second);
}

MatF erf_gelu(const MatF& x) {
  const float inv_sqrt2 = 0.7071067811865475f;
  return x.unaryExpr([inv_sqrt2](float v) { return 0.5f * v * (1.0f + std::erf(v * inv_sqrt2)); });
}

// Bilinear resize of a g0 x g0 positional grid (d channels) to gh x gw.
MatF resize_pos_grid(const MatF& pos, int g0, int gh, int gw) {
  MatF out(gh * gw, pos.cols());
  for (int y = 0; y < gh; ++y) {
    // align-corners mapping keeps the grid's outer positions fixed
    float fy = gh > 1 ? static_cast<float>(y) * (g0 - 1) / static_cast<float>(gh - 1) : 0.0f;
    int y0 = static_cast<int>(fy);
    int y1 = std::min(y0 + 1, g0 - 1);
    float wy = fy - static_cast<float>(y0);
    for (int x = 0; x < gw; ++x) {
      float fx = gw > 1 ? static_cast<float>(x) * (g0 - 1) / static_cast<float>(gw - 1) : 0.0f;
      int x0 = static_cast<int>(fx);
      int x1 = std::min(x0 + 1, g0 - 1);
      float wx = fx - static_cast<float>(x0);
      out.row(y * gw + x) = (1 - wy) * (1 - wx) * pos.row(y0 * g0 + x0) +
                            (1 - wy) * wx * pos.row(y0 * g0 + x1) +
                            wy * (1 - wx) * pos.row(y1 * g0 + x0) +
                            wy * wx * pos.row(y1 * g0 + x1);
    }
  }
  return out;
}

}  // namespace

void EncoderSpec::validate() const {
  if (depth < 4) throw ConfigError("encoder depth must be >= 4");
  if (embed_dim <= 0) throw ConfigError("encoder embed_dim must be positive");
  if (patch_size <= 0) throw ConfigError("encoder patch_size must be positive");
  if (num_prefix_tokens < 1) throw ConfigError("encoder needs a class token");
  if (num_heads <= 0 || embed_dim % num_heads != 0)
    throw ConfigError("encoder heads must divide embed_dim");
}

LayerSelection select_layers(const EncoderSpec& spec) {
  if (spec.depth == 12) return LayerSelection{{3, 4, 5, 6, 7, 8, 9, 10}};
  if (spec.depth == 24) return LayerSelection{{5, 7, 9, 11, 13, 15, 17, 19}};
  throw ConfigError("no built-in layer policy for depth " + std::to_string(spec.depth) +
                    "; set encoder.layers explicitly");
}

LayerSelection select_layers(const EncoderSpec& spec, const std::vector<int>& explicit_indices) {
  if (explicit_indices.empty()) return select_layers(spec);
  for (std::size_t i = 0; i < explicit_indices.size(); ++i) {
    int v = explicit_indices[i];
    if (v < 1 || v > spec.depth) throw ConfigError("layer index out of range: " + std::to_string(v));
    if (i > 0 && explicit_indices[i] <= explicit_indices[i - 1])
      throw ConfigError("layer indices must be strictly increasing");
  }
  return LayerSelection{explicit_indices};
}

FeatureStack recenter(const FeatureStack& stack) {
  require(!stack.recentered, "features are already recentered");
  FeatureStack out = stack;
  for (auto& [idx, layer] : out.layers) layer.patches.rowwise() -= layer.cls.transpose();
  out.recentered = true;
  return out;
}

FeatureStack uncenter(const FeatureStack& stack) {
  require(stack.recentered, "features are not recentered");
  FeatureStack out = stack;
  for (auto& [idx, layer] : out.layers) layer.patches.rowwise() += layer.cls.transpose();
  out.recentered = false;
  return out;
}

std::string resolve_weight_path(const std::string& weight_id, const DownloadHook& hook) {
  std::vector<std::string> tried;
  if (fs::exists(weight_id)) return weight_id;
  tried.push_back(weight_id);
  if (const char* cache = std::getenv("DINOLAB_CACHE")) {
    for (const std::string& candidate :
         {std::string(cache) + "/" + weight_id, std::string(cache) + "/" + weight_id + ".dlts"}) {
      if (fs::exists(candidate)) return candidate;
      tried.push_back(candidate);
    }
  }
  if (hook) {
    std::string fetched = hook(weight_id);
    if (!fetched.empty() && fs::exists(fetched)) return fetched;
  }
  std::string msg = "cannot resolve encoder weights '" + weight_id + "'; tried:";
  for (const auto& t : tried) msg += " " + t;
  throw IoError(msg);
}

VitEncoder VitEncoder::from_store(const TensorStore& store) {
  VitEncoder enc;
  EncoderSpec& spec = enc.spec_;
  spec.depth = meta_int(store, "depth");
  spec.embed_dim = meta_int(store, "embed_dim");
  spec.patch_size = meta_int(store, "patch_size");
  spec.num_heads = meta_int(store, "num_heads");
  int registers = meta_int(store, "num_register_tokens");
  spec.num_prefix_tokens = 1 + registers;
  if (auto it = store.meta.find("weight_id"); it != store.meta.end()) spec.weight_id = it->second;
  if (auto it = store.meta.find("image_mean"); it != store.meta.end())
    spec.image_mean = parse_triple(it->second);
  if (auto it = store.meta.find("image_std"); it != store.meta.end())
    spec.image_std = parse_triple(it->second);
  spec.validate();
  enc.erf_gelu_ = store.meta.count("activation") && store.meta.at("activation") == "gelu_erf";

  const int d = spec.embed_dim;
  // Stored in the torch (out x in) convention; transposed here so forward
  // passes are plain right-multiplications.
  enc.patch_w_ = store.matrix("patch_embed.weight").transpose();
  enc.patch_b_ = store.vector("patch_embed.bias").transpose();
  enc.cls_token_ = store.vector("cls_token");
  if (registers > 0) enc.reg_tokens_ = store.matrix("reg_tokens");
  enc.pos_cls_ = store.vector("pos_embed.cls");
  enc.pos_patches_ = store.matrix("pos_embed.patches");
  enc.pos_grid_ = meta_int(store, "pos_grid");
  if (enc.pos_patches_.rows() != Eigen::Index(enc.pos_grid_) * enc.pos_grid_)
    throw ShapeError("positional grid does not match pos_grid meta");

  enc.blocks_.resize(static_cast<std::size_t>(spec.depth));
  for (int i = 0; i < spec.depth; ++i) {
    Block& blk = enc.blocks_[static_cast<std::size_t>(i)];
    const std::string p = "blocks." + std::to_string(i);
    blk.ln1_w = store.vector(p + ".ln1.weight").transpose();
    blk.ln1_b = store.vector(p + ".ln1.bias").transpose();
    blk.qkv_w = store.matrix(p + ".attn.qkv.weight").transpose();
    blk.qkv_b = store.vector(p + ".attn.qkv.bias").transpose();
    blk.proj_w = store.matrix(p + ".attn.proj.weight").transpose();
    blk.proj_b = store.vector(p + ".attn.proj.bias").transpose();
    blk.ln2_w = store.vector(p + ".ln2.weight").transpose();
    blk.ln2_b = store.vector(p + ".ln2.bias").transpose();
    blk.fc1_w = store.matrix(p + ".mlp.fc1.weight").transpose();
    blk.fc1_b = store.vector(p + ".mlp.fc1.bias").transpose();
    blk.fc2_w = store.matrix(p + ".mlp.fc2.weight").transpose();
    blk.fc2_b = store.vector(p + ".mlp.fc2.bias").transpose();
    blk.ls1 = store.has(p + ".ls1.gamma") ? RowVec<Real>(store.vector(p + ".ls1.gamma").transpose())
                                          : RowVec<Real>(RowVec<Real>::Ones(d));
    blk.ls2 = store.has(p + ".ls2.gamma") ? RowVec<Real>(store.vector(p + ".ls2.gamma").transpose())
                                          : RowVec<Real>(RowVec<Real>::Ones(d));
  }
  return enc;
}

VitEncoder VitEncoder::load(const std::string& weight_id, const DownloadHook& hook) {
  VitEncoder enc = from_store(TensorStore::load(resolve_weight_path(weight_id, hook)));
  if (enc.spec_.weight_id.empty()) enc.spec_.weight_id = weight_id;
  return enc;
}

namespace {

MatF layernorm_rows(const MatF& x, const RowVec<Real>& w, const RowVec<Real>& b) {
  VecF mean = x.rowwise().mean();
  MatF centered = x.colwise() - mean;
  VecF inv_std = (centered.array().square().rowwise().mean() + 1e-6f).rsqrt().matrix();
  MatF xhat = (centered.array().colwise() * inv_std.array()).matrix();
  return ((xhat.array().rowwise() * w.array()).rowwise() + b.array()).matrix();
}

}  // namespace

FeatureStack VitEncoder::extract(const ImageF& image, const LayerSelection& selection) const {
  const int p = spec_.patch_size;
  const int h = static_cast<int>(image[0].rows());
  const int w = static_cast<int>(image[0].cols());
  if (h % p != 0 || w % p != 0)
    throw ShapeError("image size " + std::to_string(h) + "x" + std::to_string(w) +
                     " not divisible by patch size " + std::to_string(p));
  for (const auto& plane : image)
    if (plane.rows() != h || plane.cols() != w) throw ShapeError("image planes disagree");
  for (int idx : selection.indices)
    if (idx < 1 || idx > spec_.depth) throw ConfigError("selected layer out of range");

  const int gh = h / p, gw = w / p;
  const int n = gh * gw;
  const int d = spec_.embed_dim;
  const int prefix = spec_.num_prefix_tokens;

  // Patch extraction in (channel, y, x) flattening order, then one GEMM.
  MatF patches(n, 3 * p * p);
  for (int py = 0; py < gh; ++py) {
    for (int px = 0; px < gw; ++px) {
      Eigen::Index row = py * gw + px;
      Eigen::Index col = 0;
      for (int c = 0; c < 3; ++c)
        for (int yy = 0; yy < p; ++yy)
          for (int xx = 0; xx < p; ++xx)
            patches(row, col++) = image[static_cast<std::size_t>(c)](py * p + yy, px * p + xx);
    }
  }

  MatF tokens(prefix + n, d);
  MatF embedded = patches * patch_w_;
  embedded.rowwise() += patch_b_;
  MatF pos = (gh == pos_grid_ && gw == pos_grid_) ? pos_patches_
                                                  : resize_pos_grid(pos_patches_, pos_grid_, gh, gw);
  tokens.row(0) = (cls_token_ + pos_cls_).transpose();
  for (int r = 1; r < prefix; ++r) tokens.row(r) = reg_tokens_.row(r - 1);
  tokens.bottomRows(n) = embedded + pos;

  const int heads = spec_.num_heads;
  const int hd = d / heads;
  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
  FeatureStack stack;
  stack.grid_h = gh;
  stack.grid_w = gw;

  for (int i = 0; i < spec_.depth; ++i) {
    const Block& blk = blocks_[static_cast<std::size_t>(i)];
    MatF normed = layernorm_rows(tokens, blk.ln1_w, blk.ln1_b);
    MatF qkv = normed * blk.qkv_w;
    qkv.rowwise() += blk.qkv_b;
    MatF attn_out(tokens.rows(), d);
    for (int hh = 0; hh < heads; ++hh) {
      MatF q = qkv.middleCols(hh * hd, hd);
      MatF k = qkv.middleCols(d + hh * hd, hd);
      MatF v = qkv.middleCols(2 * d + hh * hd, hd);
      MatF logits = (q * k.transpose()) * scale;
      nn::softmax_rows_inplace(logits);
      attn_out.middleCols(hh * hd, hd) = logits * v;
    }
    MatF proj = attn_out * blk.proj_w;
    proj.rowwise() += blk.proj_b;
    tokens += (proj.array().rowwise() * blk.ls1.array()).matrix();

    MatF normed2 = layernorm_rows(tokens, blk.ln2_w, blk.ln2_b);
    MatF hidden = normed2 * blk.fc1_w;
    hidden.rowwise() += blk.fc1_b;
    hidden = erf_gelu_ ? erf_gelu(hidden) : nn::gelu(hidden);
    MatF mlp_out = hidden * blk.fc2_w;
    mlp_out.rowwise() += blk.fc2_b;
    tokens += (mlp_out.array().rowwise() * blk.ls2.array()).matrix();

    const int layer_index = i + 1;
    if (std::find(selection.indices.begin(), selection.indices.end(), layer_index) !=
        selection.indices.end()) {
      FeatureLayer fl;
      fl.cls = tokens.row(0).transpose();
      fl.patches = tokens.bottomRows(n);
      stack.layers.emplace(layer_index, std::move(fl));
    }
  }
  return stack;
}

std::uint64_t VitEncoder::checksum() const {
  std::uint64_t hsum = 0xcbf29ce484222325ull;
  auto h_mat = [&hsum](const MatF& m) {
    hsum = fnv1a64(m.data(), static_cast<std::size_t>(m.size()) * sizeof(Real), hsum);
  };
  auto h_row = [&hsum](const RowVec<Real>& v) {
    hsum = fnv1a64(v.data(), static_cast<std::size_t>(v.size()) * sizeof(Real), hsum);
  };
  h_mat(patch_w_);
  h_row(patch_b_);
  hsum = fnv1a64(cls_token_.data(), static_cast<std::size_t>(cls_token_.size()) * sizeof(Real), hsum);
  if (reg_tokens_.size() > 0) h_mat(reg_tokens_);
  hsum = fnv1a64(pos_cls_.data(), static_cast<std::size_t>(pos_cls_.size()) * sizeof(Real), hsum);
  h_mat(pos_patches_);
  for (const Block& blk : blocks_) {
    h_row(blk.ln1_w); h_row(blk.ln1_b);
    h_mat(blk.qkv_w); h_row(blk.qkv_b);
    h_mat(blk.proj_w); h_row(blk.proj_b);
    h_row(blk.ln2_w); h_row(blk.ln2_b);
    h_mat(blk.fc1_w); h_row(blk.fc1_b);
    h_mat(blk.fc2_w); h_row(blk.fc2_b);
    h_row(blk.ls1); h_row(blk.ls2);
  }
  return hsum;
}

}  // namespace dinolab
