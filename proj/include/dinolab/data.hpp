#pragma once

#include "dinolab/encoder.hpp"
#include "dinolab/metrics.hpp"

#include <optional>
#include <string>
#include <vector>

namespace dinolab {

enum class Split { Train, Test };
enum class Modality { Rgb, Depth, Ir };

Modality modality_from_string(const std::string& s);
std::string to_string(Modality m);

struct SampleRecord {
  std::string image_path;  // absolute path on disk
  std::string image_id;    // root-relative identifier, stable across runs
  std::string category;
  Split split = Split::Train;
  int label = 0;  // 0 normal, 1 anomalous
  std::optional<std::string> mask_path;
  std::optional<std::string> view;
  Modality modality = Modality::Rgb;
  std::optional<std::string> object_id;
};

enum class DatasetLayout { Mvtec, FlatCsv };

DatasetLayout layout_from_string(const std::string& s);

// mvtec: <class>/train/good, <class>/test/<defect>, <class>/ground_truth/<defect>.
// flat_csv: an index file with columns image_path, category, split, label,
// mask_path, view, modality, object_id (root may be the csv itself or a
// directory holding index.csv).
std::vector<SampleRecord> scan_dataset(const std::string& root, DatasetLayout layout);

// Default dataset root when a config leaves data.root empty.
std::string default_data_root();

struct PreprocessSpec {
  int image_size = 392;
  std::array<float, 3> mean{0.485f, 0.456f, 0.406f};
  std::array<float, 3> std{0.229f, 0.224f, 0.225f};
  enum class Interp { Bilinear, Nearest, Bicubic } interpolation = Interp::Bilinear;
};

// Decode, square-resize, replicate single-channel inputs to 3 channels, and
// normalize per channel.
ImageF preprocess(const std::string& image_path, const PreprocessSpec& spec);

struct AugmentParams {
  bool hflip = false;
  bool vflip = false;
  double angle_deg = 0.0;
  double tx_frac = 0.0;
  double ty_frac = 0.0;
};

ImageF preprocess_augmented(const std::string& image_path, const PreprocessSpec& spec,
                            const AugmentParams& params);

// Ground-truth mask resized (nearest) to the evaluation resolution.
MaskU8 load_mask(const std::string& mask_path, int image_size);

struct FewShotSpec {
  int shots_per_class = 0;  // 0 disables subsetting
  std::uint64_t seed = 0;
  bool hflip = true;  // orientation-safe classes only; config flag
  bool vflip = true;
  double rotate_deg = 15.0;
  double translate_frac = 0.1;
};

// Seeded choice of K train records per class; test records pass through.
std::vector<SampleRecord> few_shot_subset(const std::vector<SampleRecord>& records,
                                          const FewShotSpec& spec);

AugmentParams sample_augment_params(const FewShotSpec& spec, std::mt19937_64& rng);

struct ObjectGroup {
  std::string object_id;
  std::string category;
  int label = 0;  // max over members
  std::vector<SampleRecord> members;
};

// Group records sharing object_id; records without one form singletons.
std::vector<ObjectGroup> group_views(const std::vector<SampleRecord>& records);

// Deterministic uniform sampler over the pooled train set: an infinite
// stream of per-epoch permutations, sliced into batches. batch(iter) is a
// pure function of (seed, iter), which is what makes resume bit-exact.
class BatchSampler {
 public:
  BatchSampler(std::size_t num_records, int batch_size, std::uint64_t seed);

  std::vector<std::size_t> batch(long iter) const;
  int batch_size() const { return batch_size_; }

 private:
  std::vector<std::size_t> permutation(std::uint64_t epoch) const;

  std::size_t n_;
  int batch_size_;
  std::uint64_t seed_;
};

}  // namespace dinolab
