#pragma once

#include "dinolab/bottleneck.hpp"
#include "dinolab/config.hpp"
#include "dinolab/data.hpp"
#include "dinolab/decoder.hpp"
#include "dinolab/metrics.hpp"
#include "dinolab/objective.hpp"
#include "dinolab/scoring.hpp"

#include <memory>
#include <string>
#include <vector>

namespace dinolab {

struct TrainConfig {
  double lr_peak = 2e-3;
  double lr_floor = 2e-4;
  long warmup_iters = 100;
  long total_iters = 0;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-10;
  double clip_threshold = 1.0;
  int batch_size = 16;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(lr_floor > 0.0) || lr_floor > lr_peak)
      throw ConfigError("learning rate must satisfy 0 < lr_floor <= lr_peak");
    if (warmup_iters < 0 || warmup_iters >= total_iters)
      throw ConfigError("warmup_iters must be in [0, total_iters)");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
      throw ConfigError("betas must be in [0,1)");
  }
};

// Linear warmup from zero, then cosine from lr_peak down to lr_floor.
double lr_schedule(long iter, const TrainConfig& cfg);

// AdamW with a per-tensor learning-rate clip: the step size is divided by
// max(1, RMS / clip_threshold) where RMS = sqrt(mean(g^2 / max(v_hat, 1e-30))).
// Decoupled decay multiplies parameters by (1 - lr_t * wd) before the update.
class StableAdamW {
 public:
  StableAdamW(std::vector<nn::ParamView<Real>> params, const TrainConfig& cfg);

  void step(double lr);
  long step_count() const { return t_; }

  void save_state(TensorStore& ts) const;
  void load_state(const TensorStore& ts);

 private:
  std::vector<nn::ParamView<Real>> params_;
  TrainConfig cfg_;
  std::vector<VecF> m_, v_;
  long t_ = 0;
};

// Everything needed to run one model: the frozen encoder plus the trainable
// bottleneck/decoder pair and the resolved objective/scoring settings.
class Pipeline {
 public:
  static Pipeline build(const Config& cfg, const DownloadHook& hook = nullptr);

  VitEncoder encoder;
  LayerSelection selection;
  bool recenter_enabled = true;
  std::unique_ptr<Bottleneck<Real>> bottleneck;
  std::unique_ptr<Decoder<Real>> decoder;
  GroupingScheme scheme;
  bool loose_objective = true;
  LooseLossConfig loss_cfg;
  ScoringConfig scoring;
  PreprocessSpec prep;
  std::string fusion = "none";  // none | rgb_3d
  double fpr_limit = 0.3;
  TrainConfig train_cfg;
  std::uint64_t config_digest = 0;

  std::vector<nn::ParamView<Real>> trainable();

  // Extraction as the rest of the pipeline consumes it (recentered when the
  // recentering stage is enabled).
  FeatureStack features(const ImageF& image) const;

 private:
  Pipeline() = default;
};

struct CheckpointInfo {
  long iteration = 0;
  std::string encoder_weight_id;
  std::uint64_t config_digest = 0;
};

void save_checkpoint(const std::string& path, const Pipeline& pipe, long iteration,
                     const StableAdamW* opt = nullptr);
CheckpointInfo read_checkpoint_info(const std::string& path);
// Restores trainable weights (and optimizer state when opt is given) after
// verifying the checkpoint matches this pipeline's config digest and backbone.
CheckpointInfo load_checkpoint(const std::string& path, Pipeline& pipe,
                               StableAdamW* opt = nullptr);

struct TrainOptions {
  std::string checkpoint_path;  // written at the end (and every checkpoint_every iters)
  long checkpoint_every = 0;
  std::string log_path;  // line-delimited JSON, one record per iteration
  std::string resume_from;
  long stop_after = 0;         // pause once this absolute iteration is reached (0 = run to the end)
  bool cache_features = true;  // precompute targets once; disabled by augmentation
  FewShotSpec few_shot;        // shots_per_class > 0 turns on train-time augmentation
};

struct TrainResult {
  std::vector<double> losses;  // one entry per executed iteration
  long skipped_batches = 0;
  long start_iteration = 0;
  long end_iteration = 0;
};

TrainResult train(Pipeline& pipe, const std::vector<SampleRecord>& train_records,
                  const TrainOptions& opts);

struct PredictResult {
  std::vector<AnomalyMap> maps;       // parallel to scores
  std::vector<ScoreRecord> scores;
};

// Eval-mode scoring of test records. Multi-view groups receive a pooled
// object score, mixed-modality groups a summed one; fusion = rgb_3d instead
// merges each aligned pair into a single scored unit.
PredictResult predict(Pipeline& pipe, const std::vector<SampleRecord>& records,
                      bool keep_maps = true);

// Join predictions with ground-truth masks for the evaluation module.
std::vector<EvalItem> make_eval_items(const std::vector<SampleRecord>& records,
                                      const PredictResult& pred, int image_size);

}  // namespace dinolab
