#pragma once

#include "dinolab/tensor_store.hpp"

#include <array>
#include <string>
#include <vector>

namespace dinolab {

// Randomly initialized frozen backbone for desk-scale experiments and the
// end-to-end tests. Same file format as converted pretrained weights.
struct ToyEncoderSpec {
  int depth = 12;
  int embed_dim = 128;
  int patch_size = 14;
  int num_heads = 4;
  int num_registers = 0;
  int pos_grid = 8;
  float init_std = 0.05f;
  std::array<float, 3> image_mean{0.5f, 0.5f, 0.5f};
  std::array<float, 3> image_std{0.5f, 0.5f, 0.5f};
  std::string weight_id = "toy-vit";
  std::uint64_t seed = 0;
};

TensorStore make_toy_encoder(const ToyEncoderSpec& spec);
void write_toy_encoder(const std::string& path, const ToyEncoderSpec& spec);

// Procedural three-texture dataset in the mvtec directory layout. Normal
// images are per-category textures; anomalies are pasted elliptical patches
// of off-distribution texture with exact masks.
struct ToyDatasetSpec {
  std::string root;
  int image_size = 112;
  int train_per_class = 40;
  int test_normal_per_class = 10;
  int test_anomalous_per_class = 10;
  std::uint64_t seed = 0;
  std::vector<std::string> categories{"stripes", "checker", "blobs"};
};

void generate_toy_dataset(const ToyDatasetSpec& spec);

}  // namespace dinolab
