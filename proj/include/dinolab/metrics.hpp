#pragma once

#include "dinolab/common.hpp"

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace dinolab {

struct LabeledScores {
  std::vector<double> scores;
  std::vector<int> labels;  // 0 or 1
};

// Mann-Whitney AUROC: P(score_pos > score_neg) + half credit for ties.
double auroc(const LabeledScores& data);

// AP = sum over the descending threshold sweep of (R_n - R_{n-1}) * P_n.
double average_precision(const LabeledScores& data);

// Max F1 over all distinct-score thresholds (predict positive at score >= t).
double f1_max(const LabeledScores& data);

using MaskU8 = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>;

struct PixelEvalItem {
  MatF map;
  MaskU8 mask;
};

// Area under the per-region-overlap curve vs pooled false-positive rate,
// integrated to fpr_limit and normalized by it. Components use 8-connectivity.
double aupro(const std::vector<PixelEvalItem>& items, double fpr_limit = 0.3);

using MetricSet = std::map<std::string, double>;

struct EvalReport {
  std::map<std::string, MetricSet> per_category;
  MetricSet mean;
  std::optional<MetricSet> unified;
};

struct EvalItem {
  std::string image_id;
  std::string category;
  int label = 0;
  double image_score = 0.0;
  std::optional<double> object_score;
  std::optional<std::string> object_id;
  std::optional<MatF> map;
  std::optional<MaskU8> mask;
};

enum class EvalMode { PerCategory, Unified };

struct EvalOptions {
  EvalMode mode = EvalMode::PerCategory;
  double fpr_limit = 0.3;
};

// Per-category metrics plus their arithmetic mean; in unified mode also one
// pooled metric set over all categories mixed together.
EvalReport evaluate(const std::vector<EvalItem>& items, const EvalOptions& opts);

void write_report_json(const std::string& path, const EvalReport& report);
void write_report_csv(const std::string& path, const EvalReport& report);

}  // namespace dinolab
