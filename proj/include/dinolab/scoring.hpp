#pragma once

#include "dinolab/encoder.hpp"

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace dinolab {

struct AnomalyMap {
  MatF token_map;  // grid-resolution distances in [0,2]
  MatF full_map;   // upsampled and smoothed, input resolution
  std::string image_id;
};

struct ScoreRecord {
  std::string image_id;
  double image_score = 0.0;
  std::optional<double> object_score;
  std::string category;
  std::optional<std::string> view;
  std::optional<std::string> modality;
  std::optional<std::string> object_id;
  int label = 0;
};

struct ScoringConfig {
  double top_percent = 1.0;  // z; Real-IAD style datasets use 0.1
  double smooth_sigma = 4.0;

  void validate() const {
    if (top_percent <= 0.0 || top_percent > 100.0)
      throw ConfigError("scoring top_percent must be in (0,100]");
    if (smooth_sigma < 0.0) throw ConfigError("scoring smooth_sigma must be >= 0");
  }
};

// Mean over groups of per-token cosine distance, upsampled bilinearly to
// (out_h, out_w) and Gaussian smoothed.
AnomalyMap anomaly_map(const std::vector<std::pair<MatF, MatF>>& pairs, int grid_h, int grid_w,
                       int out_h, int out_w, double sigma = 4.0);

// Mean of the k largest pixels, k = max(1, ceil(z/100 * pixels)).
double image_score(const AnomalyMap& map, double z_percent);

// Multi-view: pool the pixels of all views before the top-k mean.
double object_score(const std::vector<AnomalyMap>& maps, double z_percent);

// Aligned RGB + rendered-depth fusion: elementwise average of both stacks.
FeatureStack fuse_rgb_3d(const FeatureStack& stack_rgb, const FeatureStack& stack_depth);

// Non-aligned modalities: sum of per-modality image scores.
double multimodal_score(const std::vector<double>& modality_scores);

// Upsample/smoothing primitives, exposed for tests.
MatF bilinear_upsample(const MatF& src, int out_h, int out_w);
MatF gaussian_smooth(const MatF& src, double sigma);

// Binary map file: 16-byte header (magic "AMAP", u32 height, u32 width,
// u32 reserved) followed by row-major little-endian float32.
void write_anomaly_map(const std::string& path, const MatF& full_map);
MatF read_anomaly_map(const std::string& path);

struct MapIndexEntry {
  std::string file;
  int label = 0;
  std::string category;
  std::optional<std::string> view;
  std::optional<std::string> modality;
  std::optional<std::string> object_id;
};

void write_map_index(const std::string& path, const std::map<std::string, MapIndexEntry>& index);
std::map<std::string, MapIndexEntry> read_map_index(const std::string& path);

// 8-bit grayscale visualization after per-image mean-max normalization.
void write_visualization(const std::string& path, const MatF& full_map);

}  // namespace dinolab
