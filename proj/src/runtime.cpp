#include "dinolab/runtime.hpp"

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <utility>

namespace dinolab {

double lr_schedule(long iter, const TrainConfig& cfg) {
  if (iter <= cfg.warmup_iters) {
    if (cfg.warmup_iters == 0) return cfg.lr_peak;
    return cfg.lr_peak * static_cast<double>(iter) / static_cast<double>(cfg.warmup_iters);
  }
  const double progress = static_cast<double>(iter - cfg.warmup_iters) /
                          static_cast<double>(cfg.total_iters - cfg.warmup_iters);
  return cfg.lr_floor +
         (cfg.lr_peak - cfg.lr_floor) * (1.0 + std::cos(3.14159265358979323846 * progress)) / 2.0;
}

StableAdamW::StableAdamW(std::vector<nn::ParamView<Real>> params, const TrainConfig& cfg)
    : params_(std::move(params)), cfg_(cfg) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.push_back(VecF::Zero(p.size));
    v_.push_back(VecF::Zero(p.size));
  }
}

void StableAdamW::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const Eigen::Index n = params_[i].size;
    Eigen::Map<VecF> p(params_[i].value, n);
    Eigen::Map<const VecF> g(params_[i].grad, n);
    VecF& m = m_[i];
    VecF& v = v_[i];
    double rms_acc = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      const double gj = static_cast<double>(g(j));
      const double mj = cfg_.beta1 * static_cast<double>(m(j)) + (1.0 - cfg_.beta1) * gj;
      const double vj = cfg_.beta2 * static_cast<double>(v(j)) + (1.0 - cfg_.beta2) * gj * gj;
      m(j) = static_cast<Real>(mj);
      v(j) = static_cast<Real>(vj);
      rms_acc += gj * gj / std::max(vj / bc2, 1e-30);
    }
    const double rms = std::sqrt(rms_acc / static_cast<double>(n));
    const double lr_t = lr / std::max(1.0, rms / cfg_.clip_threshold);
    for (Eigen::Index j = 0; j < n; ++j) {
      double pj = static_cast<double>(p(j)) * (1.0 - lr_t * cfg_.weight_decay);
      pj -= lr_t * (static_cast<double>(m(j)) / bc1) /
            (std::sqrt(static_cast<double>(v(j)) / bc2) + cfg_.epsilon);
      p(j) = static_cast<Real>(pj);
    }
  }
}

void StableAdamW::save_state(TensorStore& ts) const {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    ts.put_vector("opt.m." + params_[i].name, m_[i]);
    ts.put_vector("opt.v." + params_[i].name, v_[i]);
  }
  ts.put_scalar("opt.step", static_cast<float>(t_));
}

void StableAdamW::load_state(const TensorStore& ts) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    VecF m = ts.vector("opt.m." + params_[i].name);
    VecF v = ts.vector("opt.v." + params_[i].name);
    require(m.size() == params_[i].size && v.size() == params_[i].size,
            "optimizer state size mismatch for " + params_[i].name);
    m_[i] = std::move(m);
    v_[i] = std::move(v);
  }
  t_ = static_cast<long>(ts.scalar("opt.step"));
}

Pipeline Pipeline::build(const Config& cfg, const DownloadHook& hook) {
  Pipeline p;

  const std::string weight_id = cfg.get_string("encoder.weight_id", "");
  if (weight_id.empty()) throw ConfigError("encoder.weight_id is required");
  p.encoder = VitEncoder::load(weight_id, hook);
  const EncoderSpec& es = p.encoder.spec();

  p.selection = select_layers(es, cfg.get_int_list("encoder.layers"));
  p.recenter_enabled = cfg.get_bool("encoder.recenter", true);

  BottleneckConfig bc;
  bc.num_layers = static_cast<int>(cfg.get_int("bottleneck.num_layers", 3));
  bc.hidden_dim = static_cast<int>(cfg.get_int("bottleneck.hidden_dim", 0));
  bc.dropout_rate = cfg.get_real("bottleneck.dropout_rate", 0.2);
  bc.noise_mode = noise_mode_from_string(cfg.get_string("bottleneck.noise_mode", "dropout"));
  bc.jitter_scale = cfg.get_real("bottleneck.jitter_scale", 20.0);

  DecoderConfig dc;
  dc.num_layers = static_cast<int>(cfg.get_int("decoder.num_layers", 8));
  dc.embed_dim = es.embed_dim;
  dc.num_heads = static_cast<int>(cfg.get_int("decoder.num_heads", 0));
  dc.mixer = nn::mixer_kind_from_string(cfg.get_string("decoder.mixer", "linear_attention"));
  dc.mlp_ratio = cfg.get_real("decoder.mlp_ratio", 4.0);

  p.train_cfg.lr_peak = cfg.get_real("train.lr_peak", 2e-3);
  p.train_cfg.lr_floor = cfg.get_real("train.lr_floor", 2e-4);
  p.train_cfg.warmup_iters = cfg.get_int("train.warmup_iters", 100);
  p.train_cfg.total_iters = cfg.get_int("train.total_iters", 0);
  p.train_cfg.weight_decay = cfg.get_real("train.weight_decay", 1e-4);
  p.train_cfg.batch_size = static_cast<int>(cfg.get_int("train.batch_size", 16));
  p.train_cfg.seed = static_cast<std::uint64_t>(cfg.get_int("train.seed", 0));

  std::mt19937_64 rng_b = make_rng(mix_seed(p.train_cfg.seed, 0xb07ull));
  p.bottleneck = std::make_unique<Bottleneck<Real>>(es.embed_dim, bc, rng_b);
  std::mt19937_64 rng_d = make_rng(mix_seed(p.train_cfg.seed, 0xdecull));
  p.decoder = std::make_unique<Decoder<Real>>(dc, rng_d);

  const GroupingMode mode = grouping_mode_from_string(cfg.get_string("objective.scheme", "group2"));
  p.scheme = make_grouping(mode, p.selection);
  validate_scheme(p.scheme, p.selection, dc.num_layers);

  const std::string loss = cfg.get_string("objective.loss", "loose");
  if (loss == "loose")
    p.loose_objective = true;
  else if (loss == "plain")
    p.loose_objective = false;
  else
    throw ConfigError("objective.loss must be loose or plain, got " + loss);
  p.loss_cfg.discard_rate_final = cfg.get_real("objective.discard_rate_final", 0.9);
  p.loss_cfg.warmup_iters = cfg.get_int("objective.warmup_iters", 1000);
  p.loss_cfg.grad_scale = cfg.get_real("objective.grad_scale", 0.1);
  p.loss_cfg.validate();

  p.scoring.top_percent = cfg.get_real("scoring.top_percent", 1.0);
  p.scoring.smooth_sigma = cfg.get_real("scoring.smooth_sigma", 4.0);
  p.scoring.validate();
  p.fpr_limit = cfg.get_real("scoring.fpr_limit", 0.3);

  p.prep.image_size = static_cast<int>(cfg.get_int("data.image_size", 392));
  p.prep.mean = es.image_mean;
  p.prep.std = es.image_std;
  if (p.prep.image_size <= 0 || p.prep.image_size % es.patch_size != 0)
    throw ConfigError("data.image_size must be a positive multiple of the encoder patch size");

  p.fusion = cfg.get_string("data.fusion", "none");
  if (p.fusion != "none" && p.fusion != "rgb_3d")
    throw ConfigError("data.fusion must be none or rgb_3d, got " + p.fusion);

  p.config_digest = cfg.digest();
  return p;
}

std::vector<nn::ParamView<Real>> Pipeline::trainable() {
  std::vector<nn::ParamView<Real>> out;
  bottleneck->collect(out);
  decoder->collect(out);
  return out;
}

FeatureStack Pipeline::features(const ImageF& image) const {
  FeatureStack stack = encoder.extract(image, selection);
  return recenter_enabled ? recenter(stack) : stack;
}

void save_checkpoint(const std::string& path, const Pipeline& pipe, long iteration,
                     const StableAdamW* opt) {
  TensorStore ts;
  ts.meta["kind"] = "checkpoint";
  ts.meta["version"] = "1";
  ts.meta["iteration"] = std::to_string(iteration);
  ts.meta["encoder_weight_id"] = pipe.encoder.spec().weight_id;
  ts.meta["config_digest"] = std::to_string(pipe.config_digest);
  pipe.bottleneck->save(ts);
  pipe.decoder->save(ts);
  if (opt) opt->save_state(ts);
  ts.save(path);
}

namespace {

CheckpointInfo info_from_meta(const TensorStore& ts, const std::string& path) {
  auto kind = ts.meta.find("kind");
  if (kind == ts.meta.end() || kind->second != "checkpoint")
    throw IoError("not a checkpoint file: " + path);
  CheckpointInfo info;
  info.iteration = std::stol(ts.meta.at("iteration"));
  info.encoder_weight_id = ts.meta.at("encoder_weight_id");
  info.config_digest = std::stoull(ts.meta.at("config_digest"));
  return info;
}

}  // namespace

CheckpointInfo read_checkpoint_info(const std::string& path) {
  return info_from_meta(TensorStore::load(path), path);
}

CheckpointInfo load_checkpoint(const std::string& path, Pipeline& pipe, StableAdamW* opt) {
  TensorStore ts = TensorStore::load(path);
  CheckpointInfo info = info_from_meta(ts, path);
  if (info.encoder_weight_id != pipe.encoder.spec().weight_id)
    throw ConfigError("checkpoint " + path + " was trained against backbone '" +
                      info.encoder_weight_id + "' but this pipeline uses '" +
                      pipe.encoder.spec().weight_id + "'");
  if (info.config_digest != pipe.config_digest)
    throw ConfigError("checkpoint " + path +
                      " was produced under a different model configuration (digest " +
                      std::to_string(info.config_digest) + " vs " +
                      std::to_string(pipe.config_digest) +
                      "); adjust the config or retrain");
  pipe.bottleneck->load(ts);
  pipe.decoder->load(ts);
  if (opt) opt->load_state(ts);
  return info;
}

namespace {

struct SampleFeatures {
  MatF z0;                   // aggregated bottleneck input
  std::vector<MatF> targets; // summed per-group reconstruction targets
};

SampleFeatures make_sample_features(const Pipeline& pipe, const SampleRecord& rec,
                                    const AugmentParams* aug, int& gh, int& gw) {
  ImageF img = aug ? preprocess_augmented(rec.image_path, pipe.prep, *aug)
                   : preprocess(rec.image_path, pipe.prep);
  FeatureStack stack = pipe.features(img);
  SampleFeatures f;
  f.z0 = aggregate(stack);
  f.targets.reserve(pipe.scheme.encoder_sets.size());
  for (const auto& set : pipe.scheme.encoder_sets) {
    MatF t;
    for (int li : set) {
      const MatF& patches = stack.layers.at(li).patches;
      t = t.size() ? MatF(t + patches) : patches;
    }
    f.targets.push_back(std::move(t));
  }
  gh = stack.grid_h;
  gw = stack.grid_w;
  return f;
}

}  // namespace

TrainResult train(Pipeline& pipe, const std::vector<SampleRecord>& train_records,
                  const TrainOptions& opts) {
  const TrainConfig& cfg = pipe.train_cfg;
  cfg.validate();
  if (train_records.empty()) throw DataError("train: no training records");
  for (const auto& r : train_records)
    if (r.split != Split::Train || r.label != 0)
      throw DataError("train: refusing non-normal record in the train set: " + r.image_id);

  const bool augment = opts.few_shot.shots_per_class > 0;
  const bool cache = opts.cache_features && !augment;

  int gh = 0, gw = 0;
  std::vector<SampleFeatures> cached;
  if (cache) {
    cached.reserve(train_records.size());
    for (const auto& rec : train_records)
      cached.push_back(make_sample_features(pipe, rec, nullptr, gh, gw));
  }

  BatchSampler sampler(train_records.size(), cfg.batch_size, cfg.seed);
  std::vector<nn::ParamView<Real>> params = pipe.trainable();
  StableAdamW opt(params, cfg);

  TrainResult result;
  if (!opts.resume_from.empty()) {
    CheckpointInfo info = load_checkpoint(opts.resume_from, pipe, &opt);
    result.start_iteration = info.iteration;
  }

  std::ofstream log;
  if (!opts.log_path.empty()) {
    log.open(opts.log_path, result.start_iteration > 0 ? std::ios::app : std::ios::trunc);
    if (!log) throw IoError("cannot open training log: " + opts.log_path);
  }

  const auto t_start = std::chrono::steady_clock::now();
  const std::size_t num_groups = pipe.scheme.encoder_sets.size();
  const int B = cfg.batch_size;
  const int num_blocks = pipe.decoder->config().num_layers;
  long consecutive_bad = 0;

  const long stop =
      opts.stop_after > 0 ? std::min(opts.stop_after, cfg.total_iters) : cfg.total_iters;
  for (long iter = result.start_iteration; iter < stop; ++iter) {
    const std::vector<std::size_t> idx = sampler.batch(iter);

    std::vector<SampleFeatures> fresh;
    if (!cache) {
      fresh.reserve(idx.size());
      for (std::size_t slot = 0; slot < idx.size(); ++slot) {
        const SampleRecord& rec = train_records[idx[slot]];
        if (augment) {
          std::mt19937_64 rng = make_rng(mix_seed(
              cfg.seed, 0xa46ull,
              static_cast<std::uint64_t>(iter) * static_cast<std::uint64_t>(B) + slot));
          AugmentParams ap = sample_augment_params(opts.few_shot, rng);
          fresh.push_back(make_sample_features(pipe, rec, &ap, gh, gw));
        } else {
          fresh.push_back(make_sample_features(pipe, rec, nullptr, gh, gw));
        }
      }
    }
    auto slot_features = [&](std::size_t slot) -> const SampleFeatures& {
      return cache ? cached[idx[slot]] : fresh[slot];
    };

    const Eigen::Index n_tokens = slot_features(0).z0.rows();
    const Eigen::Index dim = slot_features(0).z0.cols();
    MatF z0(static_cast<Eigen::Index>(B) * n_tokens, dim);
    std::vector<MatF> targets(num_groups, MatF(static_cast<Eigen::Index>(B) * n_tokens, dim));
    for (int slot = 0; slot < B; ++slot) {
      const SampleFeatures& f = slot_features(static_cast<std::size_t>(slot));
      z0.middleRows(slot * n_tokens, n_tokens) = f.z0;
      for (std::size_t k = 0; k < num_groups; ++k)
        targets[k].middleRows(slot * n_tokens, n_tokens) = f.targets[k];
    }

    MatF z = pipe.bottleneck->forward(z0, true,
                                      mix_seed(cfg.seed, 0xb0ull, static_cast<std::uint64_t>(iter)));
    nn::BatchShape shape{B, n_tokens, gh, gw};
    std::vector<MatF> outs = pipe.decoder->forward(z, shape, true);

    std::vector<std::pair<MatF, MatF>> pairs;
    pairs.reserve(num_groups);
    for (std::size_t k = 0; k < num_groups; ++k) {
      MatF pred;
      for (int j : pipe.scheme.decoder_sets[k]) {
        const MatF& o = outs[static_cast<std::size_t>(j - 1)];
        pred = pred.size() ? MatF(pred + o) : o;
      }
      pairs.emplace_back(std::move(targets[k]), std::move(pred));
    }

    LossResult<Real> res = pipe.loose_objective
                               ? loose_loss(pairs, B, iter, pipe.loss_cfg)
                               : plain_cosine_loss(pairs, B);

    std::vector<MatF> g_outputs(static_cast<std::size_t>(num_blocks),
                                MatF::Zero(static_cast<Eigen::Index>(B) * n_tokens, dim));
    for (std::size_t k = 0; k < num_groups; ++k)
      for (int j : pipe.scheme.decoder_sets[k])
        g_outputs[static_cast<std::size_t>(j - 1)] += res.grad_pred[k];

    pipe.bottleneck->zero_grad();
    pipe.decoder->zero_grad();
    MatF gz = pipe.decoder->backward(g_outputs);
    pipe.bottleneck->backward(gz);

    bool finite = true;
    for (const auto& pv : params) {
      Eigen::Map<const VecF> g(pv.grad, pv.size);
      if (!g.allFinite()) {
        finite = false;
        break;
      }
    }
    if (finite) {
      consecutive_bad = 0;
      opt.step(lr_schedule(iter + 1, cfg));
    } else {
      ++result.skipped_batches;
      ++consecutive_bad;
      if (consecutive_bad > 10)
        throw NumericError("train: over 10 consecutive non-finite gradient batches, last at iteration " +
                           std::to_string(iter));
    }

    result.losses.push_back(res.value);

    if (log.is_open()) {
      const double wall =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
      nlohmann::json line;
      line["iter"] = iter;
      line["loss"] = res.value;
      line["lr"] = lr_schedule(iter + 1, cfg);
      line["discard_rate"] = pipe.loose_objective ? discard_rate(iter, pipe.loss_cfg) : 0.0;
      line["wall_time"] = wall;
      log << line.dump() << "\n";
    }

    if (!opts.checkpoint_path.empty() && opts.checkpoint_every > 0 &&
        (iter + 1) % opts.checkpoint_every == 0 && iter + 1 < cfg.total_iters)
      save_checkpoint(opts.checkpoint_path, pipe, iter + 1, &opt);
  }

  if (!opts.checkpoint_path.empty()) save_checkpoint(opts.checkpoint_path, pipe, stop, &opt);
  result.end_iteration = stop;
  return result;
}

namespace {

struct ScoreUnit {
  SampleRecord primary;
  std::optional<SampleRecord> partner;  // second modality of a fused pair
};

std::vector<ScoreUnit> make_units(const Pipeline& pipe, const std::vector<SampleRecord>& records) {
  std::vector<ScoreUnit> units;
  if (pipe.fusion != "rgb_3d") {
    units.reserve(records.size());
    for (const auto& r : records) units.push_back({r, std::nullopt});
    return units;
  }
  for (const auto& g : group_views(records)) {
    if (g.members.size() == 1) {
      units.push_back({g.members[0], std::nullopt});
      continue;
    }
    if (g.members.size() != 2)
      throw DataError("rgb_3d fusion expects one aligned pair per object, got " +
                      std::to_string(g.members.size()) + " records for object " + g.object_id);
    const SampleRecord* rgb = nullptr;
    const SampleRecord* other = nullptr;
    for (const auto& m : g.members)
      (m.modality == Modality::Rgb ? rgb : other) = &m;
    if (!rgb || !other)
      throw DataError("rgb_3d fusion needs one rgb and one non-rgb record for object " +
                      g.object_id);
    units.push_back({*rgb, *other});
  }
  return units;
}

}  // namespace

PredictResult predict(Pipeline& pipe, const std::vector<SampleRecord>& records, bool keep_maps) {
  PredictResult out;
  const std::vector<ScoreUnit> units = make_units(pipe, records);
  out.maps.reserve(units.size());
  out.scores.reserve(units.size());

  for (const auto& unit : units) {
    FeatureStack stack;
    if (unit.partner) {
      FeatureStack a = pipe.encoder.extract(preprocess(unit.primary.image_path, pipe.prep),
                                            pipe.selection);
      FeatureStack b = pipe.encoder.extract(preprocess(unit.partner->image_path, pipe.prep),
                                            pipe.selection);
      stack = fuse_rgb_3d(a, b);
      if (pipe.recenter_enabled) stack = recenter(stack);
    } else {
      stack = pipe.features(preprocess(unit.primary.image_path, pipe.prep));
    }

    MatF z0 = aggregate(stack);
    MatF z = pipe.bottleneck->forward(z0, false, 0);
    std::vector<MatF> outs = pipe.decoder->decode(z, stack.grid_h, stack.grid_w);
    auto pairs = build_groups<Real>(stack, outs, pipe.scheme);
    AnomalyMap amap = anomaly_map(pairs, stack.grid_h, stack.grid_w, pipe.prep.image_size,
                                  pipe.prep.image_size, pipe.scoring.smooth_sigma);
    amap.image_id = unit.primary.image_id;

    ScoreRecord sr;
    sr.image_id = unit.primary.image_id;
    sr.image_score = image_score(amap, pipe.scoring.top_percent);
    sr.category = unit.primary.category;
    sr.view = unit.primary.view;
    sr.object_id = unit.primary.object_id;
    if (unit.partner) {
      sr.label = std::max(unit.primary.label, unit.partner->label);
      sr.object_score = sr.image_score;
    } else {
      sr.label = unit.primary.label;
      sr.modality = to_string(unit.primary.modality);
    }
    out.maps.push_back(std::move(amap));
    out.scores.push_back(std::move(sr));
  }

  if (pipe.fusion != "rgb_3d") {
    std::map<std::string, std::vector<std::size_t>> by_object;
    for (std::size_t i = 0; i < out.scores.size(); ++i)
      if (out.scores[i].object_id) by_object[*out.scores[i].object_id].push_back(i);
    for (const auto& [oid, members] : by_object) {
      std::set<std::string> modalities;
      int label = 0;
      for (std::size_t i : members) {
        if (out.scores[i].modality) modalities.insert(*out.scores[i].modality);
        label = std::max(label, out.scores[i].label);
      }
      double score = 0.0;
      if (modalities.size() <= 1) {
        std::vector<AnomalyMap> maps;
        maps.reserve(members.size());
        for (std::size_t i : members) maps.push_back(out.maps[i]);
        score = object_score(maps, pipe.scoring.top_percent);
      } else {
        std::vector<double> scores;
        scores.reserve(members.size());
        for (std::size_t i : members) scores.push_back(out.scores[i].image_score);
        score = multimodal_score(scores);
      }
      for (std::size_t i : members) {
        out.scores[i].object_score = score;
        out.scores[i].label = label;
      }
    }
  }

  if (!keep_maps) out.maps.clear();
  return out;
}

std::vector<EvalItem> make_eval_items(const std::vector<SampleRecord>& records,
                                      const PredictResult& pred, int image_size) {
  std::map<std::string, const SampleRecord*> by_id;
  for (const auto& r : records) by_id[r.image_id] = &r;

  std::vector<EvalItem> items;
  items.reserve(pred.scores.size());
  for (std::size_t i = 0; i < pred.scores.size(); ++i) {
    const ScoreRecord& sr = pred.scores[i];
    EvalItem it;
    it.image_id = sr.image_id;
    it.category = sr.category;
    it.label = sr.label;
    it.image_score = sr.image_score;
    it.object_score = sr.object_score;
    it.object_id = sr.object_id;
    if (i < pred.maps.size() && pred.maps[i].full_map.size() != 0) it.map = pred.maps[i].full_map;
    auto rec = by_id.find(sr.image_id);
    if (rec != by_id.end() && rec->second->mask_path)
      it.mask = load_mask(*rec->second->mask_path, image_size);
    items.push_back(std::move(it));
  }
  return items;
}

}  // namespace dinolab
