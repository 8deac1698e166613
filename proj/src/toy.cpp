#include "dinolab/toy.hpp"

#include "dinolab/common.hpp"
#include "dinolab/nn/layers.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>

namespace dinolab {

namespace {

MatF random_matrix(Eigen::Index rows, Eigen::Index cols, float stddev, std::mt19937_64& rng) {
  MatF m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = nn::truncated_normal<float>(rng, stddev);
  return m;
}

VecF random_vector(Eigen::Index n, float stddev, std::mt19937_64& rng) {
  VecF v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = nn::truncated_normal<float>(rng, stddev);
  return v;
}

std::string triple_string(const std::array<float, 3>& t) {
  return std::to_string(t[0]) + "," + std::to_string(t[1]) + "," + std::to_string(t[2]);
}

}  // namespace

TensorStore make_toy_encoder(const ToyEncoderSpec& spec) {
  if (spec.depth < 1 || spec.embed_dim < 1 || spec.patch_size < 1 || spec.num_heads < 1 ||
      spec.embed_dim % spec.num_heads != 0)
    throw ConfigError("toy encoder: invalid architecture parameters");

  std::mt19937_64 rng = make_rng(mix_seed(spec.seed, fnv1a64("toy-encoder")));
  const Eigen::Index d = spec.embed_dim;
  const Eigen::Index in = 3ll * spec.patch_size * spec.patch_size;
  const Eigen::Index hidden = 4 * d;
  const float s = spec.init_std;

  TensorStore ts;
  ts.meta["depth"] = std::to_string(spec.depth);
  ts.meta["embed_dim"] = std::to_string(spec.embed_dim);
  ts.meta["patch_size"] = std::to_string(spec.patch_size);
  ts.meta["num_heads"] = std::to_string(spec.num_heads);
  ts.meta["num_register_tokens"] = std::to_string(spec.num_registers);
  ts.meta["pos_grid"] = std::to_string(spec.pos_grid);
  ts.meta["weight_id"] = spec.weight_id;
  ts.meta["image_mean"] = triple_string(spec.image_mean);
  ts.meta["image_std"] = triple_string(spec.image_std);

  // Stored in the torch (out x in) orientation the loader expects.
  ts.put_matrix("patch_embed.weight", random_matrix(d, in, s, rng));
  ts.put_vector("patch_embed.bias", VecF::Zero(d));
  ts.put_vector("cls_token", random_vector(d, s, rng));
  if (spec.num_registers > 0)
    ts.put_matrix("reg_tokens", random_matrix(spec.num_registers, d, s, rng));
  ts.put_vector("pos_embed.cls", random_vector(d, s, rng));
  ts.put_matrix("pos_embed.patches",
                random_matrix(static_cast<Eigen::Index>(spec.pos_grid) * spec.pos_grid, d, s, rng));

  for (int i = 0; i < spec.depth; ++i) {
    const std::string p = "blocks." + std::to_string(i);
    ts.put_vector(p + ".ln1.weight", VecF::Ones(d));
    ts.put_vector(p + ".ln1.bias", VecF::Zero(d));
    ts.put_matrix(p + ".attn.qkv.weight", random_matrix(3 * d, d, s, rng));
    ts.put_vector(p + ".attn.qkv.bias", VecF::Zero(3 * d));
    ts.put_matrix(p + ".attn.proj.weight", random_matrix(d, d, s, rng));
    ts.put_vector(p + ".attn.proj.bias", VecF::Zero(d));
    ts.put_vector(p + ".ln2.weight", VecF::Ones(d));
    ts.put_vector(p + ".ln2.bias", VecF::Zero(d));
    ts.put_matrix(p + ".mlp.fc1.weight", random_matrix(hidden, d, s, rng));
    ts.put_vector(p + ".mlp.fc1.bias", VecF::Zero(hidden));
    ts.put_matrix(p + ".mlp.fc2.weight", random_matrix(d, hidden, s, rng));
    ts.put_vector(p + ".mlp.fc2.bias", VecF::Zero(d));
  }
  return ts;
}

void write_toy_encoder(const std::string& path, const ToyEncoderSpec& spec) {
  make_toy_encoder(spec).save(path);
}

namespace {

struct Rgb {
  float r, g, b;
};

Rgb jitter(const Rgb& c, double amount, std::mt19937_64& rng) {
  auto j = [&](float v) {
    return std::clamp(v + static_cast<float>((uniform01(rng) - 0.5) * 2.0 * amount), 0.0f, 1.0f);
  };
  return {j(c.r), j(c.g), j(c.b)};
}

Rgb mix(const Rgb& a, const Rgb& b, float t) {
  return {a.r + (b.r - a.r) * t, a.g + (b.g - a.g) * t, a.b + (b.b - a.b) * t};
}

using Canvas = std::vector<Rgb>;  // row-major image_size x image_size

void paint_stripes(Canvas& img, int n, std::mt19937_64& rng) {
  const Rgb c1 = jitter({0.85f, 0.55f, 0.25f}, 0.08, rng);
  const Rgb c2 = jitter({0.45f, 0.25f, 0.10f}, 0.08, rng);
  const double angle = (20.0 + 50.0 * uniform01(rng)) * 3.14159265358979323846 / 180.0;
  const double period = 10.0 + 8.0 * uniform01(rng);
  const double phase = uniform01(rng) * period;
  const double ux = std::cos(angle), uy = std::sin(angle);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      const double t = 0.5 + 0.5 * std::sin(2.0 * 3.14159265358979323846 *
                                            ((x * ux + y * uy + phase) / period));
      img[static_cast<std::size_t>(y) * n + x] = mix(c1, c2, static_cast<float>(t));
    }
}

void paint_checker(Canvas& img, int n, std::mt19937_64& rng) {
  const Rgb c1 = jitter({0.20f, 0.45f, 0.75f}, 0.08, rng);
  const Rgb c2 = jitter({0.10f, 0.70f, 0.70f}, 0.08, rng);
  const int cell = 10 + static_cast<int>(uniform01(rng) * 10.0);
  const int ox = static_cast<int>(uniform01(rng) * cell);
  const int oy = static_cast<int>(uniform01(rng) * cell);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      const bool on = (((x + ox) / cell) + ((y + oy) / cell)) % 2 == 0;
      img[static_cast<std::size_t>(y) * n + x] = on ? c1 : c2;
    }
}

void paint_blobs(Canvas& img, int n, std::mt19937_64& rng) {
  const Rgb c1 = jitter({0.30f, 0.60f, 0.25f}, 0.08, rng);
  const Rgb c2 = jitter({0.75f, 0.80f, 0.45f}, 0.08, rng);
  const int k = 20 + static_cast<int>(uniform01(rng) * 10.0);
  std::vector<double> cx(k), cy(k), sg(k);
  for (int i = 0; i < k; ++i) {
    cx[static_cast<std::size_t>(i)] = uniform01(rng) * n;
    cy[static_cast<std::size_t>(i)] = uniform01(rng) * n;
    sg[static_cast<std::size_t>(i)] = 6.0 + 8.0 * uniform01(rng);
  }
  std::vector<double> field(static_cast<std::size_t>(n) * n, 0.0);
  double lo = 1e30, hi = -1e30;
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      double v = 0.0;
      for (int i = 0; i < k; ++i) {
        const double dx = x - cx[static_cast<std::size_t>(i)];
        const double dy = y - cy[static_cast<std::size_t>(i)];
        const double s2 = sg[static_cast<std::size_t>(i)] * sg[static_cast<std::size_t>(i)];
        v += std::exp(-(dx * dx + dy * dy) / (2.0 * s2));
      }
      field[static_cast<std::size_t>(y) * n + x] = v;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  const double span = std::max(hi - lo, 1e-9);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      const auto t = static_cast<float>((field[static_cast<std::size_t>(y) * n + x] - lo) / span);
      img[static_cast<std::size_t>(y) * n + x] = mix(c1, c2, t);
    }
}

void paint_normal(Canvas& img, const std::string& category, int n, std::mt19937_64& rng) {
  if (category == "stripes")
    paint_stripes(img, n, rng);
  else if (category == "checker")
    paint_checker(img, n, rng);
  else if (category == "blobs")
    paint_blobs(img, n, rng);
  else
    throw DataError("toy dataset: unknown category " + category);
  for (auto& px : img) {
    px.r = std::clamp(px.r + static_cast<float>(normal01(rng) * 0.02), 0.0f, 1.0f);
    px.g = std::clamp(px.g + static_cast<float>(normal01(rng) * 0.02), 0.0f, 1.0f);
    px.b = std::clamp(px.b + static_cast<float>(normal01(rng) * 0.02), 0.0f, 1.0f);
  }
}

// Elliptical patch of texture no training category produces: saturated noise
// or a fine off-palette checker.
void paste_anomaly(Canvas& img, std::vector<std::uint8_t>& mask, int n, std::mt19937_64& rng) {
  const double ax = 8.0 + 14.0 * uniform01(rng);
  const double ay = 8.0 + 14.0 * uniform01(rng);
  const double margin = std::max(ax, ay) + 2.0;
  const double cx = margin + uniform01(rng) * (n - 2.0 * margin);
  const double cy = margin + uniform01(rng) * (n - 2.0 * margin);
  const bool noisy = uniform01(rng) < 0.5;
  const Rgb base = noisy ? Rgb{0.85f, 0.15f, 0.80f} : Rgb{0.55f, 0.05f, 0.60f};
  const Rgb alt{0.95f, 0.90f, 0.95f};
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      const double dx = (x - cx) / ax;
      const double dy = (y - cy) / ay;
      if (dx * dx + dy * dy > 1.0) continue;
      Rgb px;
      if (noisy) {
        px = jitter(base, 0.35, rng);
      } else {
        const bool on = ((x / 3) + (y / 3)) % 2 == 0;
        px = on ? base : alt;
      }
      img[static_cast<std::size_t>(y) * n + x] = px;
      mask[static_cast<std::size_t>(y) * n + x] = 255;
    }
}

void write_canvas(const std::string& path, const Canvas& img, int n) {
  cv::Mat out(n, n, CV_8UC3);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      const Rgb& px = img[static_cast<std::size_t>(y) * n + x];
      out.at<cv::Vec3b>(y, x) = cv::Vec3b(static_cast<std::uint8_t>(px.b * 255.0f + 0.5f),
                                          static_cast<std::uint8_t>(px.g * 255.0f + 0.5f),
                                          static_cast<std::uint8_t>(px.r * 255.0f + 0.5f));
    }
  if (!cv::imwrite(path, out)) throw IoError("cannot write " + path);
}

void write_mask(const std::string& path, const std::vector<std::uint8_t>& mask, int n) {
  cv::Mat out(n, n, CV_8UC1);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) out.at<std::uint8_t>(y, x) = mask[static_cast<std::size_t>(y) * n + x];
  if (!cv::imwrite(path, out)) throw IoError("cannot write " + path);
}

std::string numbered(int i) {
  std::string s = std::to_string(i);
  return std::string(3 - std::min<std::size_t>(3, s.size()), '0') + s;
}

}  // namespace

void generate_toy_dataset(const ToyDatasetSpec& spec) {
  namespace fs = std::filesystem;
  if (spec.root.empty()) throw ConfigError("toy dataset: root is required");
  if (spec.image_size < 32) throw ConfigError("toy dataset: image_size too small");
  const int n = spec.image_size;

  for (const auto& cat : spec.categories) {
    const fs::path base = fs::path(spec.root) / cat;
    fs::create_directories(base / "train" / "good");
    fs::create_directories(base / "test" / "good");
    fs::create_directories(base / "test" / "defect");
    fs::create_directories(base / "ground_truth" / "defect");
    const std::uint64_t cat_seed = mix_seed(spec.seed, fnv1a64(cat));

    for (int i = 0; i < spec.train_per_class; ++i) {
      std::mt19937_64 rng = make_rng(mix_seed(cat_seed, 0x7261ull, static_cast<std::uint64_t>(i)));
      Canvas img(static_cast<std::size_t>(n) * n);
      paint_normal(img, cat, n, rng);
      write_canvas((base / "train" / "good" / (numbered(i) + ".png")).string(), img, n);
    }
    for (int i = 0; i < spec.test_normal_per_class; ++i) {
      std::mt19937_64 rng = make_rng(mix_seed(cat_seed, 0x7465ull, static_cast<std::uint64_t>(i)));
      Canvas img(static_cast<std::size_t>(n) * n);
      paint_normal(img, cat, n, rng);
      write_canvas((base / "test" / "good" / (numbered(i) + ".png")).string(), img, n);
    }
    for (int i = 0; i < spec.test_anomalous_per_class; ++i) {
      std::mt19937_64 rng = make_rng(mix_seed(cat_seed, 0xde4ull, static_cast<std::uint64_t>(i)));
      Canvas img(static_cast<std::size_t>(n) * n);
      std::vector<std::uint8_t> mask(static_cast<std::size_t>(n) * n, 0);
      paint_normal(img, cat, n, rng);
      paste_anomaly(img, mask, n, rng);
      write_canvas((base / "test" / "defect" / (numbered(i) + ".png")).string(), img, n);
      write_mask((base / "ground_truth" / "defect" / (numbered(i) + "_mask.png")).string(), mask, n);
    }
  }
}

}  // namespace dinolab
