#include "dinolab/data.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

namespace dinolab {
namespace {

namespace fs = std::filesystem;

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp" || ext == ".tif" ||
         ext == ".tiff";
}

std::vector<fs::path> sorted_images(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && is_image_file(e.path())) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<fs::path> sorted_subdirs(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory()) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

std::optional<std::string> find_mask(const fs::path& gt_dir, const fs::path& image) {
  const std::string stem = image.stem().string();
  for (const std::string& candidate : {stem + "_mask.png", stem + ".png", stem + "_mask.bmp"}) {
    fs::path p = gt_dir / candidate;
    if (fs::exists(p)) return p.string();
  }
  return std::nullopt;
}

std::vector<SampleRecord> scan_mvtec(const fs::path& root) {
  std::vector<SampleRecord> records;
  for (const fs::path& class_dir : sorted_subdirs(root)) {
    const std::string category = class_dir.filename().string();
    if (!fs::is_directory(class_dir / "train") && !fs::is_directory(class_dir / "test")) continue;

    std::vector<fs::path> train = sorted_images(class_dir / "train" / "good");
    if (train.empty())
      throw DataError("empty train split for class '" + category + "' under " + root.string());
    for (const auto& img : train) {
      SampleRecord r;
      r.image_path = img.string();
      r.image_id = fs::relative(img, root).generic_string();
      r.category = category;
      r.split = Split::Train;
      r.label = 0;
      records.push_back(std::move(r));
    }

    for (const fs::path& defect_dir : sorted_subdirs(class_dir / "test")) {
      const std::string defect = defect_dir.filename().string();
      const bool anomalous = defect != "good";
      for (const auto& img : sorted_images(defect_dir)) {
        SampleRecord r;
        r.image_path = img.string();
        r.image_id = fs::relative(img, root).generic_string();
        r.category = category;
        r.split = Split::Test;
        r.label = anomalous ? 1 : 0;
        if (anomalous) {
          r.mask_path = find_mask(class_dir / "ground_truth" / defect, img);
          if (!r.mask_path)
            std::cerr << "warning: no ground-truth mask for " << r.image_id << "\n";
        }
        records.push_back(std::move(r));
      }
    }
  }
  if (records.empty()) throw DataError("no classes found under " + root.string());
  return records;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::stringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(field);
  // trailing empty field after a final comma
  if (!line.empty() && line.back() == ',') out.push_back("");
  return out;
}

std::vector<SampleRecord> scan_flat_csv(const fs::path& root) {
  fs::path csv = fs::is_directory(root) ? root / "index.csv" : root;
  std::ifstream is(csv);
  if (!is) throw DataError("cannot open index csv: " + csv.string());
  const fs::path base = csv.parent_path();

  std::string header;
  if (!std::getline(is, header)) throw DataError("empty index csv: " + csv.string());
  std::vector<std::string> cols = split_csv_line(header);
  auto col = [&](const std::string& name) -> int {
    auto it = std::find(cols.begin(), cols.end(), name);
    return it == cols.end() ? -1 : static_cast<int>(it - cols.begin());
  };
  const int c_path = col("image_path"), c_cat = col("category"), c_split = col("split"),
            c_label = col("label"), c_mask = col("mask_path"), c_view = col("view"),
            c_mod = col("modality"), c_obj = col("object_id");
  if (c_path < 0 || c_cat < 0 || c_split < 0 || c_label < 0)
    throw DataError("index csv missing required columns (image_path, category, split, label)");

  std::vector<SampleRecord> records;
  std::string line;
  int line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f = split_csv_line(line);
    auto get = [&](int idx) -> std::string {
      return (idx >= 0 && idx < static_cast<int>(f.size())) ? f[static_cast<std::size_t>(idx)] : "";
    };
    SampleRecord r;
    const std::string rel = get(c_path);
    if (rel.empty())
      throw DataError("index csv line " + std::to_string(line_no) + ": empty image_path");
    fs::path p = fs::path(rel).is_absolute() ? fs::path(rel) : base / rel;
    r.image_path = p.string();
    r.image_id = rel;
    r.category = get(c_cat);
    const std::string split = get(c_split);
    if (split == "train")
      r.split = Split::Train;
    else if (split == "test")
      r.split = Split::Test;
    else
      throw DataError("index csv line " + std::to_string(line_no) + ": bad split '" + split + "'");
    r.label = std::stoi(get(c_label));
    if (r.split == Split::Train && r.label != 0)
      throw DataError("index csv line " + std::to_string(line_no) +
                      ": anomalous sample in train split");
    if (std::string m = get(c_mask); !m.empty())
      r.mask_path = (fs::path(m).is_absolute() ? fs::path(m) : base / m).string();
    if (std::string v = get(c_view); !v.empty()) r.view = v;
    if (std::string m = get(c_mod); !m.empty()) r.modality = modality_from_string(m);
    if (std::string o = get(c_obj); !o.empty()) r.object_id = o;
    records.push_back(std::move(r));
  }
  if (records.empty()) throw DataError("index csv has no records: " + csv.string());
  bool any_train = false;
  for (const auto& r : records) any_train |= (r.split == Split::Train);
  if (!any_train) throw DataError("empty train split in " + csv.string());
  return records;
}

cv::Mat load_image_any(const std::string& path) {
  cv::Mat img = cv::imread(path, cv::IMREAD_UNCHANGED);
  if (img.empty()) throw DataError("cannot decode image: " + path);
  return img;
}

int interp_flag(PreprocessSpec::Interp i) {
  switch (i) {
    case PreprocessSpec::Interp::Bilinear: return cv::INTER_LINEAR;
    case PreprocessSpec::Interp::Nearest: return cv::INTER_NEAREST;
    case PreprocessSpec::Interp::Bicubic: return cv::INTER_CUBIC;
  }
  return cv::INTER_LINEAR;
}

ImageF finish_preprocess(cv::Mat img, const PreprocessSpec& spec, const AugmentParams* aug) {
  // Normalize channel count first: gray and gray+alpha replicate, BGRA drops
  // alpha, BGR converts to RGB.
  cv::Mat rgb;
  if (img.channels() == 1) {
    cv::cvtColor(img, rgb, cv::COLOR_GRAY2RGB);
  } else if (img.channels() == 4) {
    cv::cvtColor(img, rgb, cv::COLOR_BGRA2RGB);
  } else if (img.channels() == 3) {
    cv::cvtColor(img, rgb, cv::COLOR_BGR2RGB);
  } else {
    throw DataError("unsupported channel count in image");
  }

  cv::Mat scaled;
  const double value_scale = rgb.depth() == CV_16U ? 1.0 / 65535.0 : 1.0 / 255.0;
  rgb.convertTo(scaled, CV_32FC3, value_scale);

  cv::Mat resized;
  cv::resize(scaled, resized, cv::Size(spec.image_size, spec.image_size), 0, 0,
             interp_flag(spec.interpolation));

  if (aug) {
    cv::Mat out = resized;
    if (aug->hflip) cv::flip(out, out, 1);
    if (aug->vflip) cv::flip(out, out, 0);
    if (aug->angle_deg != 0.0 || aug->tx_frac != 0.0 || aug->ty_frac != 0.0) {
      cv::Point2f center(static_cast<float>(out.cols) / 2.0f, static_cast<float>(out.rows) / 2.0f);
      cv::Mat m = cv::getRotationMatrix2D(center, aug->angle_deg, 1.0);
      m.at<double>(0, 2) += aug->tx_frac * out.cols;
      m.at<double>(1, 2) += aug->ty_frac * out.rows;
      cv::Mat warped;
      cv::warpAffine(out, warped, m, out.size(), cv::INTER_LINEAR, cv::BORDER_REFLECT_101);
      out = warped;
    }
    resized = out;
  }

  ImageF planes;
  for (auto& p : planes) p.resize(spec.image_size, spec.image_size);
  for (int y = 0; y < spec.image_size; ++y)
    for (int x = 0; x < spec.image_size; ++x) {
      const cv::Vec3f& v = resized.at<cv::Vec3f>(y, x);
      for (int c = 0; c < 3; ++c)
        planes[static_cast<std::size_t>(c)](y, x) =
            (v[c] - spec.mean[static_cast<std::size_t>(c)]) / spec.std[static_cast<std::size_t>(c)];
    }
  return planes;
}

}  // namespace

Modality modality_from_string(const std::string& s) {
  if (s == "rgb") return Modality::Rgb;
  if (s == "depth") return Modality::Depth;
  if (s == "ir") return Modality::Ir;
  throw DataError("unknown modality: " + s);
}

std::string to_string(Modality m) {
  switch (m) {
    case Modality::Rgb: return "rgb";
    case Modality::Depth: return "depth";
    case Modality::Ir: return "ir";
  }
  return "?";
}

DatasetLayout layout_from_string(const std::string& s) {
  if (s == "mvtec") return DatasetLayout::Mvtec;
  if (s == "flat_csv") return DatasetLayout::FlatCsv;
  throw ConfigError("unknown dataset layout: " + s);
}

std::vector<SampleRecord> scan_dataset(const std::string& root, DatasetLayout layout) {
  if (!fs::exists(root)) throw DataError("dataset root does not exist: " + root);
  return layout == DatasetLayout::Mvtec ? scan_mvtec(root) : scan_flat_csv(root);
}

std::string default_data_root() {
  const char* env = std::getenv("DINOLAB_DATA");
  return env ? env : "";
}

ImageF preprocess(const std::string& image_path, const PreprocessSpec& spec) {
  return finish_preprocess(load_image_any(image_path), spec, nullptr);
}

ImageF preprocess_augmented(const std::string& image_path, const PreprocessSpec& spec,
                            const AugmentParams& params) {
  return finish_preprocess(load_image_any(image_path), spec, &params);
}

MaskU8 load_mask(const std::string& mask_path, int image_size) {
  cv::Mat img = cv::imread(mask_path, cv::IMREAD_GRAYSCALE);
  if (img.empty()) throw DataError("cannot decode mask: " + mask_path);
  cv::Mat resized;
  cv::resize(img, resized, cv::Size(image_size, image_size), 0, 0, cv::INTER_NEAREST);
  MaskU8 mask(image_size, image_size);
  for (int y = 0; y < image_size; ++y)
    for (int x = 0; x < image_size; ++x) mask(y, x) = resized.at<unsigned char>(y, x) > 0 ? 1 : 0;
  return mask;
}

std::vector<SampleRecord> few_shot_subset(const std::vector<SampleRecord>& records,
                                          const FewShotSpec& spec) {
  if (spec.shots_per_class <= 0) return records;
  std::map<std::string, std::vector<std::size_t>> train_by_class;
  for (std::size_t i = 0; i < records.size(); ++i)
    if (records[i].split == Split::Train) train_by_class[records[i].category].push_back(i);

  std::vector<bool> keep(records.size(), true);
  for (auto& [category, indices] : train_by_class) {
    if (static_cast<int>(indices.size()) < spec.shots_per_class)
      throw DataError("class '" + category + "' has " + std::to_string(indices.size()) +
                      " train records, fewer than the requested " +
                      std::to_string(spec.shots_per_class) + " shots");
    std::mt19937_64 rng = make_rng(mix_seed(spec.seed, fnv1a64(category)));
    // Fisher-Yates on the index list, then keep the first K.
    for (std::size_t i = indices.size(); i-- > 1;) {
      const auto j = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i + 1));
      std::swap(indices[i], indices[std::min(j, i)]);
    }
    for (std::size_t i = static_cast<std::size_t>(spec.shots_per_class); i < indices.size(); ++i)
      keep[indices[i]] = false;
  }
  std::vector<SampleRecord> out;
  for (std::size_t i = 0; i < records.size(); ++i)
    if (keep[i]) out.push_back(records[i]);
  return out;
}

AugmentParams sample_augment_params(const FewShotSpec& spec, std::mt19937_64& rng) {
  AugmentParams p;
  p.hflip = spec.hflip && uniform01(rng) < 0.5;
  p.vflip = spec.vflip && uniform01(rng) < 0.5;
  p.angle_deg = (uniform01(rng) * 2.0 - 1.0) * spec.rotate_deg;
  p.tx_frac = (uniform01(rng) * 2.0 - 1.0) * spec.translate_frac;
  p.ty_frac = (uniform01(rng) * 2.0 - 1.0) * spec.translate_frac;
  return p;
}

std::vector<ObjectGroup> group_views(const std::vector<SampleRecord>& records) {
  std::map<std::string, ObjectGroup> groups;
  std::vector<std::string> order;
  for (const auto& r : records) {
    const std::string key = r.object_id ? ("obj:" + *r.object_id) : ("img:" + r.image_id);
    auto it = groups.find(key);
    if (it == groups.end()) {
      ObjectGroup g;
      g.object_id = r.object_id ? *r.object_id : r.image_id;
      g.category = r.category;
      it = groups.emplace(key, std::move(g)).first;
      order.push_back(key);
    } else if (it->second.category != r.category) {
      throw DataError("object '" + it->second.object_id + "' mixes categories '" +
                      it->second.category + "' and '" + r.category + "'");
    }
    it->second.label = std::max(it->second.label, r.label);
    it->second.members.push_back(r);
  }
  std::vector<ObjectGroup> out;
  out.reserve(order.size());
  for (const auto& key : order) out.push_back(std::move(groups[key]));
  return out;
}

BatchSampler::BatchSampler(std::size_t num_records, int batch_size, std::uint64_t seed)
    : n_(num_records), batch_size_(batch_size), seed_(seed) {
  if (n_ == 0) throw DataError("batch sampler over empty record set");
  if (batch_size_ <= 0) throw ConfigError("batch_size must be positive");
}

std::vector<std::size_t> BatchSampler::permutation(std::uint64_t epoch) const {
  std::vector<std::size_t> perm(n_);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng = make_rng(mix_seed(seed_, 0x7365656bull, epoch));
  for (std::size_t i = n_; i-- > 1;) {
    const auto j = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i + 1));
    std::swap(perm[i], perm[std::min(j, i)]);
  }
  return perm;
}

std::vector<std::size_t> BatchSampler::batch(long iter) const {
  if (iter < 0) throw ConfigError("batch iteration must be >= 0");
  std::vector<std::size_t> out;
  out.reserve(static_cast<std::size_t>(batch_size_));
  const std::uint64_t start = static_cast<std::uint64_t>(iter) * static_cast<std::uint64_t>(batch_size_);
  std::uint64_t epoch = start / n_;
  std::vector<std::size_t> perm = permutation(epoch);
  for (int k = 0; k < batch_size_; ++k) {
    const std::uint64_t pos = start + static_cast<std::uint64_t>(k);
    if (pos / n_ != epoch) {
      epoch = pos / n_;
      perm = permutation(epoch);
    }
    out.push_back(perm[pos % n_]);
  }
  return out;
}

}  // namespace dinolab
