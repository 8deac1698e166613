#include "dinolab/toy.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <exception>

int main(int argc, char** argv) {
  CLI::App app{"Toy backbone and synthetic dataset generator"};
  app.require_subcommand(1);

  dinolab::ToyEncoderSpec enc;
  std::string enc_out;
  auto* enc_cmd = app.add_subcommand("encoder", "Write a randomly initialized frozen backbone");
  enc_cmd->add_option("--out", enc_out, "Output weights file")->required();
  enc_cmd->add_option("--depth", enc.depth, "Transformer depth");
  enc_cmd->add_option("--dim", enc.embed_dim, "Embedding dimension");
  enc_cmd->add_option("--patch", enc.patch_size, "Patch size");
  enc_cmd->add_option("--heads", enc.num_heads, "Attention heads");
  enc_cmd->add_option("--registers", enc.num_registers, "Register tokens");
  enc_cmd->add_option("--pos-grid", enc.pos_grid, "Positional embedding grid side");
  enc_cmd->add_option("--init-std", enc.init_std, "Weight init standard deviation");
  enc_cmd->add_option("--weight-id", enc.weight_id, "Identifier stored in the weights");
  enc_cmd->add_option("--seed", enc.seed, "Init seed");

  dinolab::ToyDatasetSpec data;
  auto* data_cmd = app.add_subcommand("dataset", "Write the procedural texture dataset");
  data_cmd->add_option("--out", data.root, "Dataset root directory")->required();
  data_cmd->add_option("--image-size", data.image_size, "Square image side");
  data_cmd->add_option("--train", data.train_per_class, "Training images per category");
  data_cmd->add_option("--test-normal", data.test_normal_per_class, "Normal test images per category");
  data_cmd->add_option("--test-anomalous", data.test_anomalous_per_class,
                       "Anomalous test images per category");
  data_cmd->add_option("--seed", data.seed, "Generation seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (enc_cmd->parsed()) {
      dinolab::write_toy_encoder(enc_out, enc);
      std::printf("wrote backbone %s (depth %d, dim %d, patch %d)\n", enc_out.c_str(), enc.depth,
                  enc.embed_dim, enc.patch_size);
    }
    if (data_cmd->parsed()) {
      dinolab::generate_toy_dataset(data);
      std::printf("wrote dataset %s (%d categories)\n", data.root.c_str(),
                  static_cast<int>(data.categories.size()));
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
