#include "dinolab/metrics.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace dinolab {
namespace {

using nlohmann::json;

void check_binary_labels(const LabeledScores& data) {
  if (data.scores.size() != data.labels.size())
    throw ShapeError("labeled scores: size mismatch");
  if (data.scores.empty()) throw MetricError("empty score set");
  for (int l : data.labels)
    if (l != 0 && l != 1) throw MetricError("labels must be 0/1");
}

// Descending-threshold precision/recall sweep shared by AP and F1-max.
// Calls fn(tp, fp, n_pos) after each distinct score value.
template <typename Fn>
void threshold_sweep(const LabeledScores& data, Fn&& fn) {
  std::vector<std::size_t> order(data.scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return data.scores[a] > data.scores[b]; });
  std::size_t n_pos = 0;
  for (int l : data.labels) n_pos += static_cast<std::size_t>(l);
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double v = data.scores[order[i]];
    for (; i < order.size() && data.scores[order[i]] == v; ++i) {
      if (data.labels[order[i]] == 1)
        ++tp;
      else
        ++fp;
    }
    fn(tp, fp, n_pos);
  }
}

}  // namespace

double auroc(const LabeledScores& data) {
  check_binary_labels(data);
  std::size_t n_pos = 0;
  for (int l : data.labels) n_pos += static_cast<std::size_t>(l);
  const std::size_t n_neg = data.labels.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw MetricError("auroc needs both classes");

  std::vector<std::size_t> order(data.scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return data.scores[a] < data.scores[b]; });

  // Rank-sum with average ranks over tied runs.
  double rank_sum_pos = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && data.scores[order[j]] == data.scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // ranks are 1-based
    for (std::size_t k = i; k < j; ++k)
      if (data.labels[order[k]] == 1) rank_sum_pos += avg_rank;
    i = j;
  }
  const double u = rank_sum_pos - 0.5 * static_cast<double>(n_pos) * static_cast<double>(n_pos + 1);
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double average_precision(const LabeledScores& data) {
  check_binary_labels(data);
  std::size_t total_pos = 0;
  for (int l : data.labels) total_pos += static_cast<std::size_t>(l);
  if (total_pos == 0) throw MetricError("average_precision needs at least one positive");

  double ap = 0.0;
  double prev_recall = 0.0;
  threshold_sweep(data, [&](std::size_t tp, std::size_t fp, std::size_t n_pos) {
    const double recall = static_cast<double>(tp) / static_cast<double>(n_pos);
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
  });
  return ap;
}

double f1_max(const LabeledScores& data) {
  check_binary_labels(data);
  std::size_t total_pos = 0;
  for (int l : data.labels) total_pos += static_cast<std::size_t>(l);
  if (total_pos == 0) throw MetricError("f1_max needs at least one positive");

  double best = 0.0;
  threshold_sweep(data, [&](std::size_t tp, std::size_t fp, std::size_t n_pos) {
    const double recall = static_cast<double>(tp) / static_cast<double>(n_pos);
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    if (precision + recall > 0.0) best = std::max(best, 2.0 * precision * recall / (precision + recall));
  });
  return best;
}

namespace {

// 8-connected component labeling; returns per-pixel component id (-1 outside)
// and appends component sizes.
std::vector<int> label_components(const MaskU8& mask, std::vector<std::size_t>& sizes) {
  const int h = static_cast<int>(mask.rows());
  const int w = static_cast<int>(mask.cols());
  std::vector<int> labels(static_cast<std::size_t>(h) * w, -1);
  std::vector<std::pair<int, int>> stack;
  const int base = static_cast<int>(sizes.size());
  int next = base;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (mask(y, x) == 0 || labels[static_cast<std::size_t>(y) * w + x] >= 0) continue;
      const int id = next++;
      sizes.push_back(0);
      stack.push_back({y, x});
      labels[static_cast<std::size_t>(y) * w + x] = id;
      while (!stack.empty()) {
        auto [cy, cx] = stack.back();
        stack.pop_back();
        ++sizes[static_cast<std::size_t>(id)];
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            if (dy == 0 && dx == 0) continue;
            const int ny = cy + dy, nx = cx + dx;
            if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
            if (mask(ny, nx) == 0) continue;
            int& lab = labels[static_cast<std::size_t>(ny) * w + nx];
            if (lab < 0) {
              lab = id;
              stack.push_back({ny, nx});
            }
          }
      }
    }
  }
  return labels;
}

}  // namespace

double aupro(const std::vector<PixelEvalItem>& items, double fpr_limit) {
  if (fpr_limit <= 0.0 || fpr_limit > 1.0) throw ConfigError("aupro fpr_limit must be in (0,1]");
  struct Pixel {
    float value;
    int component;  // -1 for negatives
  };
  std::vector<Pixel> pixels;
  std::vector<std::size_t> comp_sizes;
  std::size_t n_neg = 0;
  for (const auto& item : items) {
    if (item.map.rows() != item.mask.rows() || item.map.cols() != item.mask.cols())
      throw ShapeError("aupro: map/mask shape mismatch");
    std::vector<int> labels = label_components(item.mask, comp_sizes);
    const int w = static_cast<int>(item.mask.cols());
    for (int y = 0; y < item.mask.rows(); ++y)
      for (int x = 0; x < w; ++x) {
        const int comp = labels[static_cast<std::size_t>(y) * w + x];
        if (comp < 0) ++n_neg;
        pixels.push_back({item.map(y, x), comp});
      }
  }
  if (comp_sizes.empty()) throw MetricError("aupro: no anomalous regions in ground truth");
  if (n_neg == 0) throw MetricError("aupro: no negative pixels");

  std::sort(pixels.begin(), pixels.end(),
            [](const Pixel& a, const Pixel& b) { return a.value > b.value; });

  double pro_sum = 0.0;  // sum over components of covered-fraction
  std::size_t fp = 0;
  double prev_fpr = 0.0, prev_pro = 0.0, area = 0.0;
  bool done = false;
  for (std::size_t i = 0; i < pixels.size() && !done;) {
    const float v = pixels[i].value;
    for (; i < pixels.size() && pixels[i].value == v; ++i) {
      const int comp = pixels[i].component;
      if (comp < 0) {
        ++fp;
      } else {
        pro_sum += 1.0 / static_cast<double>(comp_sizes[static_cast<std::size_t>(comp)]);
      }
    }
    const double fpr = static_cast<double>(fp) / static_cast<double>(n_neg);
    const double pro = pro_sum / static_cast<double>(comp_sizes.size());
    if (fpr >= fpr_limit) {
      // interpolate the curve at the integration limit
      const double t = (fpr_limit - prev_fpr) / (fpr - prev_fpr);
      const double pro_at_limit = prev_pro + t * (pro - prev_pro);
      area += 0.5 * (prev_pro + pro_at_limit) * (fpr_limit - prev_fpr);
      done = true;
    } else {
      area += 0.5 * (prev_pro + pro) * (fpr - prev_fpr);
      prev_fpr = fpr;
      prev_pro = pro;
    }
  }
  return area / fpr_limit;
}

namespace {

MetricSet image_level_metrics(const std::vector<const EvalItem*>& items, const std::string& prefix) {
  LabeledScores data;
  for (const auto* it : items) {
    data.scores.push_back(it->image_score);
    data.labels.push_back(it->label);
  }
  MetricSet out;
  out[prefix + "_auroc"] = auroc(data);
  out[prefix + "_ap"] = average_precision(data);
  out[prefix + "_f1max"] = f1_max(data);
  return out;
}

void add_pixel_metrics(const std::vector<const EvalItem*>& items, double fpr_limit, MetricSet& out) {
  bool any_map = false;
  for (const auto* it : items) any_map |= it->map.has_value();
  if (!any_map) return;

  std::vector<std::string> missing;
  for (const auto* it : items) {
    if (!it->map) missing.push_back(it->image_id);
    if (it->label == 1 && !it->mask) missing.push_back(it->image_id + " (mask)");
  }
  if (!missing.empty()) {
    std::string msg = "evaluate: missing maps or ground truth for:";
    for (const auto& m : missing) msg += " " + m;
    throw MetricError(msg);
  }

  LabeledScores pooled;
  std::vector<PixelEvalItem> pro_items;
  for (const auto* it : items) {
    const MatF& m = *it->map;
    MaskU8 mask;
    if (it->mask) {
      mask = *it->mask;
      if (mask.rows() != m.rows() || mask.cols() != m.cols())
        throw ShapeError("evaluate: map/mask shape mismatch for " + it->image_id);
    } else {
      mask = MaskU8::Zero(m.rows(), m.cols());
    }
    for (Eigen::Index y = 0; y < m.rows(); ++y)
      for (Eigen::Index x = 0; x < m.cols(); ++x) {
        pooled.scores.push_back(static_cast<double>(m(y, x)));
        pooled.labels.push_back(mask(y, x) ? 1 : 0);
      }
    pro_items.push_back({m, std::move(mask)});
  }
  out["pixel_auroc"] = auroc(pooled);
  out["pixel_ap"] = average_precision(pooled);
  out["pixel_f1max"] = f1_max(pooled);
  out["aupro"] = aupro(pro_items, fpr_limit);
}

void add_object_metrics(const std::vector<const EvalItem*>& items, MetricSet& out) {
  std::map<std::string, std::pair<double, int>> objects;  // id -> (score, label)
  for (const auto* it : items) {
    if (!it->object_id || !it->object_score) continue;
    auto [obj, inserted] = objects.try_emplace(*it->object_id, *it->object_score, it->label);
    if (!inserted) obj->second.second = std::max(obj->second.second, it->label);
  }
  if (objects.empty()) return;
  LabeledScores data;
  for (const auto& [id, sl] : objects) {
    data.scores.push_back(sl.first);
    data.labels.push_back(sl.second);
  }
  out["object_auroc"] = auroc(data);
  out["object_ap"] = average_precision(data);
  out["object_f1max"] = f1_max(data);
}

MetricSet metric_set_for(const std::vector<const EvalItem*>& items, double fpr_limit) {
  MetricSet out = image_level_metrics(items, "image");
  add_pixel_metrics(items, fpr_limit, out);
  add_object_metrics(items, out);
  return out;
}

}  // namespace

EvalReport evaluate(const std::vector<EvalItem>& items, const EvalOptions& opts) {
  if (items.empty()) throw MetricError("evaluate: no items");
  std::map<std::string, std::vector<const EvalItem*>> by_category;
  std::vector<const EvalItem*> all;
  for (const auto& item : items) {
    by_category[item.category].push_back(&item);
    all.push_back(&item);
  }

  EvalReport report;
  std::map<std::string, double> sums;
  std::map<std::string, int> counts;
  for (const auto& [cat, members] : by_category) {
    MetricSet ms = metric_set_for(members, opts.fpr_limit);
    for (const auto& [k, v] : ms) {
      sums[k] += v;
      counts[k] += 1;
    }
    report.per_category[cat] = std::move(ms);
  }
  for (const auto& [k, v] : sums) report.mean[k] = v / counts[k];
  if (opts.mode == EvalMode::Unified) report.unified = metric_set_for(all, opts.fpr_limit);
  return report;
}

void write_report_json(const std::string& path, const EvalReport& report) {
  json root;
  for (const auto& [cat, ms] : report.per_category) {
    for (const auto& [k, v] : ms) root["per_category"][cat][k] = v;
  }
  for (const auto& [k, v] : report.mean) root["mean"][k] = v;
  if (report.unified)
    for (const auto& [k, v] : *report.unified) root["unified"][k] = v;
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path);
  os << root.dump(2) << "\n";
}

void write_report_csv(const std::string& path, const EvalReport& report) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path);
  os << "category,metric,value\n";
  os.precision(10);
  for (const auto& [cat, ms] : report.per_category)
    for (const auto& [k, v] : ms) os << cat << "," << k << "," << v << "\n";
  for (const auto& [k, v] : report.mean) os << "mean," << k << "," << v << "\n";
  if (report.unified)
    for (const auto& [k, v] : *report.unified) os << "unified," << k << "," << v << "\n";
}

}  // namespace dinolab
