#include "dinolab/runtime.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>

namespace {

using namespace dinolab;

Config load_config(const std::string& path, const std::vector<std::string>& overrides) {
  Config cfg = Config::from_file(path);
  for (const auto& o : overrides) cfg.apply_override(o);
  return cfg;
}

std::vector<SampleRecord> scan_from_config(const Config& cfg) {
  std::string root = cfg.get_string("data.root", "");
  if (root.empty()) root = default_data_root();
  if (root.empty())
    throw ConfigError("set data.root in the config or export DINOLAB_DATA");
  const DatasetLayout layout = layout_from_string(cfg.get_string("data.layout", "mvtec"));
  return scan_dataset(root, layout);
}

std::vector<SampleRecord> split_records(const std::vector<SampleRecord>& all, Split split) {
  std::vector<SampleRecord> out;
  for (const auto& r : all)
    if (r.split == split) out.push_back(r);
  return out;
}

std::string safe_id(const std::string& image_id) {
  std::string s = image_id;
  std::size_t pos = 0;
  while ((pos = s.find('/', pos)) != std::string::npos) {
    s.replace(pos, 1, "__");
    pos += 2;
  }
  return s;
}

nlohmann::json score_to_json(const ScoreRecord& sr) {
  nlohmann::json j;
  j["image_id"] = sr.image_id;
  j["image_score"] = sr.image_score;
  j["category"] = sr.category;
  j["label"] = sr.label;
  if (sr.object_score) j["object_score"] = *sr.object_score;
  if (sr.view) j["view"] = *sr.view;
  if (sr.modality) j["modality"] = *sr.modality;
  if (sr.object_id) j["object_id"] = *sr.object_id;
  return j;
}

void write_scores(const std::string& path, const std::vector<ScoreRecord>& scores) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& sr : scores) arr.push_back(score_to_json(sr));
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  os << arr.dump(2) << "\n";
}

void export_maps(const std::string& out_dir, const PredictResult& pred, bool viz) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(out_dir) / "maps");
  if (viz) fs::create_directories(fs::path(out_dir) / "viz");
  std::map<std::string, MapIndexEntry> index;
  for (std::size_t i = 0; i < pred.maps.size(); ++i) {
    const AnomalyMap& m = pred.maps[i];
    const ScoreRecord& sr = pred.scores[i];
    const std::string rel = "maps/" + safe_id(m.image_id) + ".amap";
    write_anomaly_map((fs::path(out_dir) / rel).string(), m.full_map);
    if (viz)
      write_visualization((fs::path(out_dir) / "viz" / (safe_id(m.image_id) + ".png")).string(),
                          m.full_map);
    MapIndexEntry entry;
    entry.file = rel;
    entry.label = sr.label;
    entry.category = sr.category;
    entry.view = sr.view;
    entry.modality = sr.modality;
    entry.object_id = sr.object_id;
    index[m.image_id] = entry;
  }
  write_map_index((fs::path(out_dir) / "index.json").string(), index);
  write_scores((fs::path(out_dir) / "scores.json").string(), pred.scores);
}

void print_report(const EvalReport& report) {
  auto print_set = [](const std::string& name, const MetricSet& set) {
    for (const auto& [metric, value] : set)
      std::printf("%-16s %-14s %.6f\n", name.c_str(), metric.c_str(), value);
  };
  for (const auto& [cat, set] : report.per_category) print_set(cat, set);
  print_set("mean", report.mean);
  if (report.unified) print_set("unified", *report.unified);
}

int run(int argc, char** argv) {
  CLI::App app{"Reconstruction-based anomaly detection"};
  app.require_subcommand(1);

  std::string config_path, checkpoint, out_dir, resume, log_path, report_json, report_csv;
  std::vector<std::string> overrides;
  long checkpoint_every = 0;
  int shots = 0;
  std::uint64_t shot_seed = 0;
  bool unified = false, viz = false, no_maps = false;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "Config file")->required();
    cmd->add_option("overrides", overrides, "section.key=value overrides");
  };

  auto* train_cmd = app.add_subcommand("train", "Train bottleneck and decoder");
  add_common(train_cmd);
  train_cmd->add_option("--checkpoint", checkpoint, "Checkpoint output path");
  train_cmd->add_option("--checkpoint-every", checkpoint_every, "Also checkpoint every N iterations");
  train_cmd->add_option("--log", log_path, "Training log (JSON lines)");
  train_cmd->add_option("--resume", resume, "Resume from this checkpoint");
  train_cmd->add_option("--shots", shots, "Few-shot: normal images per class");
  train_cmd->add_option("--shot-seed", shot_seed, "Few-shot selection seed");

  auto* predict_cmd = app.add_subcommand("predict", "Score the test split");
  add_common(predict_cmd);
  predict_cmd->add_option("--checkpoint", checkpoint, "Trained checkpoint")->required();
  predict_cmd->add_option("--out", out_dir, "Output directory")->required();
  predict_cmd->add_flag("--no-maps", no_maps, "Skip anomaly map export");

  auto* eval_cmd = app.add_subcommand("evaluate", "Score the test split and compute metrics");
  add_common(eval_cmd);
  eval_cmd->add_option("--checkpoint", checkpoint, "Trained checkpoint")->required();
  eval_cmd->add_flag("--unified", unified, "Also pool all categories into one metric set");
  eval_cmd->add_option("--json", report_json, "Write the report as JSON");
  eval_cmd->add_option("--csv", report_csv, "Write the report as CSV");

  auto* export_cmd = app.add_subcommand("export-maps", "Write anomaly maps for the test split");
  add_common(export_cmd);
  export_cmd->add_option("--checkpoint", checkpoint, "Trained checkpoint")->required();
  export_cmd->add_option("--out", out_dir, "Output directory")->required();
  export_cmd->add_flag("--viz", viz, "Also write grayscale visualizations");

  CLI11_PARSE(app, argc, argv);

  Config cfg = load_config(config_path, overrides);
  Pipeline pipe = Pipeline::build(cfg);
  const std::vector<SampleRecord> all = scan_from_config(cfg);

  if (train_cmd->parsed()) {
    std::vector<SampleRecord> records = split_records(all, Split::Train);
    TrainOptions opts;
    opts.checkpoint_path = checkpoint;
    opts.checkpoint_every = checkpoint_every;
    opts.log_path = log_path;
    opts.resume_from = resume;
    if (shots > 0) {
      opts.few_shot.shots_per_class = shots;
      opts.few_shot.seed = shot_seed;
      std::vector<SampleRecord> subset = few_shot_subset(all, opts.few_shot);
      records = split_records(subset, Split::Train);
    }
    TrainResult res = train(pipe, records, opts);
    const double last = res.losses.empty() ? 0.0 : res.losses.back();
    std::printf("trained %ld iterations (skipped %ld), final loss %.6f\n",
                res.end_iteration - res.start_iteration, res.skipped_batches, last);
    if (!checkpoint.empty()) std::printf("checkpoint: %s\n", checkpoint.c_str());
    return 0;
  }

  load_checkpoint(checkpoint, pipe);
  const std::vector<SampleRecord> test = split_records(all, Split::Test);
  if (test.empty()) throw DataError("dataset has no test records");

  if (predict_cmd->parsed() || export_cmd->parsed()) {
    PredictResult pred = predict(pipe, test, !no_maps || export_cmd->parsed());
    std::filesystem::create_directories(out_dir);
    if (export_cmd->parsed() || !no_maps) {
      export_maps(out_dir, pred, viz);
    } else {
      write_scores((std::filesystem::path(out_dir) / "scores.json").string(), pred.scores);
    }
    std::printf("scored %zu test images -> %s\n", pred.scores.size(), out_dir.c_str());
    return 0;
  }

  PredictResult pred = predict(pipe, test, true);
  std::vector<EvalItem> items = make_eval_items(test, pred, pipe.prep.image_size);
  EvalOptions opts;
  opts.mode = unified ? EvalMode::Unified : EvalMode::PerCategory;
  opts.fpr_limit = pipe.fpr_limit;
  EvalReport report = evaluate(items, opts);
  print_report(report);
  if (!report_json.empty()) write_report_json(report_json, report);
  if (!report_csv.empty()) write_report_csv(report_csv, report);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
