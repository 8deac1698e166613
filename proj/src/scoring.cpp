#include "dinolab/scoring.hpp"

#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace dinolab {
namespace {

using nlohmann::json;

double top_k_mean(std::vector<float>& values, double z_percent) {
  if (values.empty()) throw ShapeError("score: empty map");
  if (z_percent <= 0.0 || z_percent > 100.0)
    throw ConfigError("z_percent must be in (0,100]");
  const auto k = std::max<std::size_t>(
      1, static_cast<std::size_t>(
             std::ceil(z_percent / 100.0 * static_cast<double>(values.size()))));
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(k - 1),
                   values.end(), std::greater<float>());
  double sum = 0.0;
  for (std::size_t i = 0; i < k; ++i) sum += static_cast<double>(values[i]);
  return sum / static_cast<double>(k);
}

// reflect-101 index (edge pixel not repeated)
int reflect(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * (n - 1) - i;
  }
  return i;
}

void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

}  // namespace

AnomalyMap anomaly_map(const std::vector<std::pair<MatF, MatF>>& pairs, int grid_h, int grid_w,
                       int out_h, int out_w, double sigma) {
  if (pairs.empty()) throw ShapeError("anomaly_map: no group pairs");
  const Eigen::Index n = pairs.front().first.rows();
  if (n != Eigen::Index(grid_h) * grid_w) throw ShapeError("anomaly_map: grid does not match tokens");
  VecF dist = VecF::Zero(n);
  for (const auto& [target, pred] : pairs) {
    if (target.rows() != n || pred.rows() != n || target.cols() != pred.cols())
      throw ShapeError("anomaly_map: pair shape mismatch");
    for (Eigen::Index r = 0; r < n; ++r) {
      const double dot = target.row(r).cast<double>().dot(pred.row(r).cast<double>());
      const double denom =
          std::max(target.row(r).cast<double>().norm() * pred.row(r).cast<double>().norm(), 1e-8);
      const double cos_sim = std::max(-1.0, std::min(1.0, dot / denom));
      dist(r) += static_cast<float>(1.0 - cos_sim);
    }
  }
  dist /= static_cast<float>(pairs.size());

  AnomalyMap map;
  map.token_map.resize(grid_h, grid_w);
  for (int y = 0; y < grid_h; ++y)
    for (int x = 0; x < grid_w; ++x) map.token_map(y, x) = dist(y * grid_w + x);
  map.full_map = gaussian_smooth(bilinear_upsample(map.token_map, out_h, out_w), sigma);
  return map;
}

MatF bilinear_upsample(const MatF& src, int out_h, int out_w) {
  const int in_h = static_cast<int>(src.rows());
  const int in_w = static_cast<int>(src.cols());
  MatF out(out_h, out_w);
  const float sy = static_cast<float>(in_h) / static_cast<float>(out_h);
  const float sx = static_cast<float>(in_w) / static_cast<float>(out_w);
  for (int y = 0; y < out_h; ++y) {
    // half-pixel centers, clamped at the borders
    float fy = (static_cast<float>(y) + 0.5f) * sy - 0.5f;
    fy = std::max(0.0f, std::min(fy, static_cast<float>(in_h - 1)));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, in_h - 1);
    const float wy = fy - static_cast<float>(y0);
    for (int x = 0; x < out_w; ++x) {
      float fx = (static_cast<float>(x) + 0.5f) * sx - 0.5f;
      fx = std::max(0.0f, std::min(fx, static_cast<float>(in_w - 1)));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, in_w - 1);
      const float wx = fx - static_cast<float>(x0);
      out(y, x) = (1 - wy) * ((1 - wx) * src(y0, x0) + wx * src(y0, x1)) +
                  wy * ((1 - wx) * src(y1, x0) + wx * src(y1, x1));
    }
  }
  return out;
}

MatF gaussian_smooth(const MatF& src, double sigma) {
  if (sigma <= 0.0) return src;
  const int radius = static_cast<int>(std::ceil(4.0 * sigma));
  VecF kernel(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
    kernel(i + radius) = static_cast<float>(v);
    sum += v;
  }
  kernel /= static_cast<float>(sum);

  const int h = static_cast<int>(src.rows());
  const int w = static_cast<int>(src.cols());
  MatF tmp(h, w), out(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      float acc = 0.0f;
      for (int i = -radius; i <= radius; ++i) acc += kernel(i + radius) * src(y, reflect(x + i, w));
      tmp(y, x) = acc;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      float acc = 0.0f;
      for (int i = -radius; i <= radius; ++i) acc += kernel(i + radius) * tmp(reflect(y + i, h), x);
      out(y, x) = acc;
    }
  return out;
}

double image_score(const AnomalyMap& map, double z_percent) {
  std::vector<float> values(map.full_map.data(), map.full_map.data() + map.full_map.size());
  return top_k_mean(values, z_percent);
}

double object_score(const std::vector<AnomalyMap>& maps, double z_percent) {
  if (maps.empty()) throw ShapeError("object_score: no views");
  std::vector<float> values;
  for (const auto& m : maps)
    values.insert(values.end(), m.full_map.data(), m.full_map.data() + m.full_map.size());
  return top_k_mean(values, z_percent);
}

FeatureStack fuse_rgb_3d(const FeatureStack& stack_rgb, const FeatureStack& stack_depth) {
  if (stack_rgb.grid_h != stack_depth.grid_h || stack_rgb.grid_w != stack_depth.grid_w)
    throw ShapeError("fuse: grids differ");
  if (stack_rgb.layers.size() != stack_depth.layers.size())
    throw ShapeError("fuse: layer counts differ");
  FeatureStack fused = stack_rgb;
  for (auto& [idx, layer] : fused.layers) {
    auto it = stack_depth.layers.find(idx);
    if (it == stack_depth.layers.end())
      throw ShapeError("fuse: depth stack missing layer " + std::to_string(idx));
    if (it->second.patches.rows() != layer.patches.rows() ||
        it->second.patches.cols() != layer.patches.cols())
      throw ShapeError("fuse: patch shapes differ at layer " + std::to_string(idx));
    layer.patches = 0.5f * (layer.patches + it->second.patches);
    layer.cls = 0.5f * (layer.cls + it->second.cls);
  }
  return fused;
}

double multimodal_score(const std::vector<double>& modality_scores) {
  if (modality_scores.empty()) throw ShapeError("multimodal_score: no modalities");
  double sum = 0.0;
  for (double s : modality_scores) sum += s;
  return sum;
}

void write_anomaly_map(const std::string& path, const MatF& full_map) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  os.write("AMAP", 4);
  write_u32(os, static_cast<std::uint32_t>(full_map.rows()));
  write_u32(os, static_cast<std::uint32_t>(full_map.cols()));
  write_u32(os, 0);
  for (Eigen::Index y = 0; y < full_map.rows(); ++y)
    for (Eigen::Index x = 0; x < full_map.cols(); ++x) {
      const float v = full_map(y, x);
      os.write(reinterpret_cast<const char*>(&v), sizeof(v));
    }
  if (!os) throw IoError("write failed: " + path);
}

MatF read_anomaly_map(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "AMAP", 4) != 0) throw IoError("not an anomaly map file: " + path);
  std::uint32_t h = 0, w = 0, reserved = 0;
  is.read(reinterpret_cast<char*>(&h), 4);
  is.read(reinterpret_cast<char*>(&w), 4);
  is.read(reinterpret_cast<char*>(&reserved), 4);
  MatF m(h, w);
  for (std::uint32_t y = 0; y < h; ++y)
    for (std::uint32_t x = 0; x < w; ++x) {
      float v = 0;
      is.read(reinterpret_cast<char*>(&v), sizeof(v));
      m(y, x) = v;
    }
  if (!is) throw IoError("truncated anomaly map: " + path);
  return m;
}

void write_map_index(const std::string& path, const std::map<std::string, MapIndexEntry>& index) {
  json root = json::object();
  for (const auto& [id, e] : index) {
    json entry = {{"file", e.file}, {"label", e.label}, {"category", e.category}};
    if (e.view) entry["view"] = *e.view;
    if (e.modality) entry["modality"] = *e.modality;
    if (e.object_id) entry["object_id"] = *e.object_id;
    root[id] = entry;
  }
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path);
  os << root.dump(2) << "\n";
}

std::map<std::string, MapIndexEntry> read_map_index(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open: " + path);
  json root = json::parse(is, nullptr, true);
  std::map<std::string, MapIndexEntry> out;
  for (auto it = root.begin(); it != root.end(); ++it) {
    MapIndexEntry e;
    e.file = it.value().at("file").get<std::string>();
    e.label = it.value().at("label").get<int>();
    e.category = it.value().at("category").get<std::string>();
    if (it.value().contains("view")) e.view = it.value()["view"].get<std::string>();
    if (it.value().contains("modality")) e.modality = it.value()["modality"].get<std::string>();
    if (it.value().contains("object_id")) e.object_id = it.value()["object_id"].get<std::string>();
    out[it.key()] = std::move(e);
  }
  return out;
}

void write_visualization(const std::string& path, const MatF& full_map) {
  const float mean = full_map.mean();
  const float maxv = full_map.maxCoeff();
  cv::Mat img(static_cast<int>(full_map.rows()), static_cast<int>(full_map.cols()), CV_8UC1);
  const float range = maxv - mean;
  for (int y = 0; y < img.rows; ++y)
    for (int x = 0; x < img.cols; ++x) {
      float v = range > 0.0f ? (full_map(y, x) - mean) / range : 0.0f;
      v = std::max(0.0f, std::min(1.0f, v));
      img.at<unsigned char>(y, x) = static_cast<unsigned char>(std::lround(v * 255.0f));
    }
  if (!cv::imwrite(path, img)) throw IoError("cannot write visualization: " + path);
}

}  // namespace dinolab
