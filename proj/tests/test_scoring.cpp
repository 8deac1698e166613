#include "dinolab/scoring.hpp"

#include "test_support.hpp"

#include <doctest.h>

#include <algorithm>
#include <fstream>

using namespace dinolab;

namespace {

// Token grid whose per-token distances are known in closed form: unit target
// rows against rotated prediction rows.
std::vector<std::pair<MatF, MatF>> known_pairs() {
  MatF t = MatF::Zero(4, 2);
  t.col(0).setOnes();
  MatF p_same = t;
  MatF p_orth = MatF::Zero(4, 2);
  p_orth.col(1).setOnes();
  return {{t, p_same}, {t, p_orth}};
}

AnomalyMap map_from(const MatF& full) {
  AnomalyMap m;
  m.full_map = full;
  m.token_map = full;
  return m;
}

double brute_top_mean(std::vector<float> v, double z) {
  const auto k = static_cast<std::size_t>(
      std::max<long>(1, static_cast<long>(std::ceil(z / 100.0 * static_cast<double>(v.size())))));
  std::sort(v.begin(), v.end(), std::greater<float>());
  double s = 0.0;
  for (std::size_t i = 0; i < k; ++i) s += v[i];
  return s / static_cast<double>(k);
}

}  // namespace

TEST_CASE("token map averages per-token distance over groups") {
  // Group one matches exactly (distance 0), group two is orthogonal
  // (distance 1), so every token lands at 0.5.
  AnomalyMap m = anomaly_map(known_pairs(), 2, 2, 2, 2, 0.0);
  REQUIRE(m.token_map.rows() == 2);
  REQUIRE(m.token_map.cols() == 2);
  for (Eigen::Index r = 0; r < 2; ++r)
    for (Eigen::Index c = 0; c < 2; ++c)
      CHECK(m.token_map(r, c) == doctest::Approx(0.5).epsilon(1e-6));
}

TEST_CASE("antiparallel tokens reach the distance ceiling") {
  MatF t = MatF::Ones(1, 3);
  MatF p = -t;
  AnomalyMap m = anomaly_map({{t, p}}, 1, 1, 1, 1, 0.0);
  CHECK(m.token_map(0, 0) == doctest::Approx(2.0).epsilon(1e-6));
}

TEST_CASE("token distances stay inside the closed interval") {
  auto rng = make_rng(80);
  for (int trial = 0; trial < 10; ++trial) {
    MatF t = test::random_mat<float>(16, 8, rng);
    MatF p = test::random_mat<float>(16, 8, rng);
    AnomalyMap m = anomaly_map({{t, p}}, 4, 4, 8, 8, 0.0);
    CHECK(m.token_map.minCoeff() >= 0.0f);
    CHECK(m.token_map.maxCoeff() <= 2.0f + 1e-6f);
    CHECK(m.full_map.minCoeff() >= -1e-6f);
    CHECK(m.full_map.maxCoeff() <= 2.0f + 1e-6f);
  }
}

TEST_CASE("bilinear upsampling interpolates between cell centers") {
  MatF src(2, 2);
  src << 0.0f, 1.0f, 2.0f, 3.0f;
  MatF up = bilinear_upsample(src, 4, 4);
  REQUIRE(up.rows() == 4);
  REQUIRE(up.cols() == 4);
  // Half-pixel alignment: output centers 0.25 and 0.75 in source units,
  // clamped at the border. Corners replicate the source corners.
  CHECK(up(0, 0) == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(up(0, 3) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(up(3, 0) == doctest::Approx(2.0).epsilon(1e-6));
  CHECK(up(3, 3) == doctest::Approx(3.0).epsilon(1e-6));
  // Interior sample at source coordinate (0.25, 0.25) mixes all four cells.
  CHECK(up(1, 1) ==
        doctest::Approx(0.75 * 0.25 * 1.0 + 0.25 * 0.75 * 2.0 + 0.25 * 0.25 * 3.0).epsilon(1e-5));
  // Row interpolation only, between the two top cells.
  CHECK(up(0, 1) == doctest::Approx(0.25).epsilon(1e-6));
  CHECK(up(0, 2) == doctest::Approx(0.75).epsilon(1e-6));
}

TEST_CASE("upsampling a constant map is exact") {
  MatF src = MatF::Constant(3, 5, 0.7f);
  MatF up = bilinear_upsample(src, 17, 23);
  CHECK((up.array() - 0.7f).abs().maxCoeff() < 1e-6f);
}

TEST_CASE("identity upsample returns the source") {
  auto rng = make_rng(81);
  MatF src = test::random_mat<float>(5, 7, rng);
  MatF up = bilinear_upsample(src, 5, 7);
  CHECK((up - src).cwiseAbs().maxCoeff() < 1e-6f);
}

TEST_CASE("gaussian smoothing preserves constants and mass direction") {
  MatF flat = MatF::Constant(9, 9, 1.25f);
  MatF s = gaussian_smooth(flat, 4.0);
  CHECK((s.array() - 1.25f).abs().maxCoeff() < 1e-5f);

  MatF spike = MatF::Zero(21, 21);
  spike(10, 10) = 1.0f;
  MatF blurred = gaussian_smooth(spike, 2.0);
  CHECK(blurred(10, 10) < 1.0f);
  CHECK(blurred(10, 10) > blurred(10, 9));
  CHECK(blurred(10, 9) == doctest::Approx(blurred(10, 11)).epsilon(1e-5));
  CHECK(blurred(9, 10) == doctest::Approx(blurred(11, 10)).epsilon(1e-5));
  CHECK(blurred.sum() == doctest::Approx(1.0).epsilon(1e-3));

  MatF zero_sigma = gaussian_smooth(spike, 0.0);
  CHECK((zero_sigma - spike).cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("top percent image score on the single-hot map") {
  // 28x28 = 784 pixels, one pixel at 1, the rest at 0.125 - ish baseline:
  // with z=1 the pool is k=ceil(7.84)=8 pixels, one hot pixel at 1 and seven
  // zeros, so the mean is exactly 0.125.
  MatF full = MatF::Zero(28, 28);
  full(3, 4) = 1.0f;
  CHECK(image_score(map_from(full), 1.0) == doctest::Approx(0.125).epsilon(1e-9));
}

TEST_CASE("full pool percentage reduces to the plain mean") {
  auto rng = make_rng(82);
  MatF full = test::random_mat<float>(6, 6, rng).cwiseAbs();
  double got = image_score(map_from(full), 100.0);
  CHECK(got == doctest::Approx(full.cast<double>().mean()).epsilon(1e-6));
}

TEST_CASE("image score matches a brute-force sort") {
  auto rng = make_rng(83);
  MatF full = test::random_mat<float>(13, 9, rng);
  std::vector<float> v(full.data(), full.data() + full.size());
  for (double z : {0.5, 1.0, 7.0, 33.3, 100.0})
    CHECK(image_score(map_from(full), z) == doctest::Approx(brute_top_mean(v, z)).epsilon(1e-9));
}

TEST_CASE("image score is permutation invariant and monotone") {
  auto rng = make_rng(84);
  MatF a = test::random_mat<float>(8, 8, rng);
  MatF b = a;
  std::reverse(b.data(), b.data() + b.size());
  CHECK(image_score(map_from(a), 5.0) == doctest::Approx(image_score(map_from(b), 5.0)));

  MatF raised = a.array() + 0.25f;
  CHECK(image_score(map_from(raised), 5.0) > image_score(map_from(a), 5.0));
}

TEST_CASE("object score pools every view before the top-k mean") {
  auto rng = make_rng(85);
  MatF v1 = test::random_mat<float>(7, 5, rng);
  MatF v2 = test::random_mat<float>(7, 5, rng);
  std::vector<AnomalyMap> views{map_from(v1), map_from(v2)};

  std::vector<float> pooled(v1.data(), v1.data() + v1.size());
  pooled.insert(pooled.end(), v2.data(), v2.data() + v2.size());
  for (double z : {1.0, 10.0, 100.0})
    CHECK(object_score(views, z) == doctest::Approx(brute_top_mean(pooled, z)).epsilon(1e-9));
}

TEST_CASE("identical views score exactly like a single view") {
  auto rng = make_rng(86);
  MatF v = test::random_mat<float>(10, 10, rng);
  std::vector<AnomalyMap> one{map_from(v)};
  std::vector<AnomalyMap> three{map_from(v), map_from(v), map_from(v)};
  CHECK(object_score(three, 2.0) == object_score(one, 2.0));
  CHECK(object_score(one, 2.0) == image_score(map_from(v), 2.0));
}

TEST_CASE("modality fusion averages both stacks elementwise") {
  auto rng = make_rng(87);
  FeatureStack a, b;
  a.grid_h = b.grid_h = 2;
  a.grid_w = b.grid_w = 2;
  for (int i : {1, 2}) {
    FeatureLayer la, lb;
    la.cls = test::random_mat<float>(3, 1, rng).col(0);
    lb.cls = test::random_mat<float>(3, 1, rng).col(0);
    la.patches = test::random_mat<float>(4, 3, rng);
    lb.patches = test::random_mat<float>(4, 3, rng);
    a.layers[i] = la;
    b.layers[i] = lb;
  }

  FeatureStack fused = fuse_rgb_3d(a, b);
  for (int i : {1, 2}) {
    MatF want = 0.5f * (a.layers.at(i).patches + b.layers.at(i).patches);
    CHECK((fused.layers.at(i).patches - want).cwiseAbs().maxCoeff() < 1e-7f);
    VecF want_cls = 0.5f * (a.layers.at(i).cls + b.layers.at(i).cls);
    CHECK((fused.layers.at(i).cls - want_cls).cwiseAbs().maxCoeff() < 1e-7f);
  }

  FeatureStack self = fuse_rgb_3d(a, a);
  for (int i : {1, 2})
    CHECK((self.layers.at(i).patches - a.layers.at(i).patches).cwiseAbs().maxCoeff() == 0.0f);

  FeatureStack opposite = a;
  for (auto& [idx, layer] : opposite.layers) {
    layer.patches = -layer.patches;
    layer.cls = -layer.cls;
  }
  FeatureStack cancelled = fuse_rgb_3d(a, opposite);
  for (int i : {1, 2})
    CHECK(cancelled.layers.at(i).patches.cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("fusion rejects mismatched stacks") {
  FeatureStack a, b;
  a.grid_h = a.grid_w = 2;
  b.grid_h = b.grid_w = 2;
  FeatureLayer l;
  l.cls = VecF::Zero(2);
  l.patches = MatF::Zero(4, 2);
  a.layers[1] = l;
  b.layers[2] = l;
  CHECK_THROWS_AS(fuse_rgb_3d(a, b), ShapeError);

  b = a;
  b.layers[1].patches = MatF::Zero(4, 3);
  b.layers[1].cls = VecF::Zero(3);
  CHECK_THROWS_AS(fuse_rgb_3d(a, b), ShapeError);
}

TEST_CASE("independent modality scores add up") {
  CHECK(multimodal_score({0.3, 0.2}) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(multimodal_score({0.7}) == doctest::Approx(0.7));
  CHECK_THROWS_AS(multimodal_score({}), ShapeError);
}

TEST_CASE("anomaly map files round trip") {
  test::TempDir dir("amap");
  auto rng = make_rng(88);
  MatF full = test::random_mat<float>(14, 10, rng);
  const std::string path = dir.file("x.amap");
  write_anomaly_map(path, full);
  MatF back = read_anomaly_map(path);
  REQUIRE(back.rows() == 14);
  REQUIRE(back.cols() == 10);
  CHECK((back - full).cwiseAbs().maxCoeff() == 0.0f);

  CHECK_THROWS_AS(read_anomaly_map(dir.file("missing.amap")), IoError);
}

TEST_CASE("map index survives serialization with optional fields") {
  test::TempDir dir("index");
  std::map<std::string, MapIndexEntry> index;
  MapIndexEntry plain;
  plain.file = "maps/a.amap";
  plain.label = 0;
  plain.category = "bolt";
  index["bolt/test/good/000"] = plain;

  MapIndexEntry rich;
  rich.file = "maps/b.amap";
  rich.label = 1;
  rich.category = "bolt";
  rich.view = "C2";
  rich.modality = "rgb";
  rich.object_id = "bolt/test/defect/007";
  index["bolt/test/defect/007_C2"] = rich;

  const std::string path = dir.file("index.json");
  write_map_index(path, index);
  auto back = read_map_index(path);
  REQUIRE(back.size() == 2);
  CHECK(back.at("bolt/test/good/000").file == "maps/a.amap");
  CHECK_FALSE(back.at("bolt/test/good/000").view.has_value());
  CHECK(back.at("bolt/test/defect/007_C2").label == 1);
  CHECK(back.at("bolt/test/defect/007_C2").view.value() == "C2");
  CHECK(back.at("bolt/test/defect/007_C2").modality.value() == "rgb");
  CHECK(back.at("bolt/test/defect/007_C2").object_id.value() == "bolt/test/defect/007");
}

TEST_CASE("visualization files are written") {
  test::TempDir dir("viz");
  MatF full = MatF::Zero(16, 16);
  full(8, 8) = 2.0f;
  const std::string path = dir.file("v.png");
  write_visualization(path, full);
  std::ifstream in(path, std::ios::binary);
  CHECK(in.good());
  char sig[8] = {};
  in.read(sig, 8);
  CHECK(static_cast<unsigned char>(sig[1]) == 'P');
  CHECK(sig[2] == 'N');
  CHECK(sig[3] == 'G');
}

TEST_CASE("scoring config bounds are enforced") {
  ScoringConfig cfg;
  cfg.validate();
  cfg.top_percent = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = ScoringConfig{};
  cfg.top_percent = 101.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = ScoringConfig{};
  cfg.smooth_sigma = -1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("upsampled map tracks the hot token region") {
  MatF t = MatF::Zero(4, 2);
  t.col(0).setOnes();
  MatF p = t;
  p.row(3) = -t.row(3);  // last token antiparallel: bottom-right grid cell
  AnomalyMap m = anomaly_map({{t, p}}, 2, 2, 16, 16, 1.0);
  Eigen::Index mr, mc;
  m.full_map.maxCoeff(&mr, &mc);
  CHECK(mr >= 8);
  CHECK(mc >= 8);
  CHECK(m.full_map.maxCoeff() > 3.0f * m.full_map.minCoeff() + 1e-3f);
}
