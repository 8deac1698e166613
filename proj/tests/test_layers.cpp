#include "dinolab/nn/block.hpp"

#include "test_support.hpp"

#include <doctest.h>

#include <functional>

using namespace dinolab;

namespace {

// Central-difference check of every parameter reachable through the views
// plus the input matrix, against one analytic backward pass.
struct GradResult {
  double max_rel = 0.0;
};

double scalar_loss(const MatD& y, const MatD& weight) {
  return (y.array() * weight.array()).sum();
}

GradResult check_grads(MatD& x, std::vector<nn::ParamView<double>> params,
                       const std::function<MatD()>& fwd_train,
                       const std::function<MatD()>& fwd_eval,
                       const std::function<MatD(const MatD&)>& bwd,
                       const std::function<void()>& zero, const MatD& weight) {
  zero();
  (void)fwd_train();
  MatD gx = bwd(weight);

  GradResult res;
  const double h = 1e-6;
  auto probe = [&](double* slot, double analytic) {
    const double keep = *slot;
    *slot = keep + h;
    const double hi = scalar_loss(fwd_eval(), weight);
    *slot = keep - h;
    const double lo = scalar_loss(fwd_eval(), weight);
    *slot = keep;
    const double numeric = (hi - lo) / (2.0 * h);
    const double denom = std::max(std::abs(numeric), 1e-4);
    res.max_rel = std::max(res.max_rel, std::abs(analytic - numeric) / denom);
  };

  for (Eigen::Index i = 0; i < x.size(); ++i) probe(x.data() + i, gx.data()[i]);
  for (auto& p : params)
    for (Eigen::Index i = 0; i < p.size; ++i) probe(p.value + i, p.grad[i]);
  return res;
}

}  // namespace

TEST_CASE("truncated normal init stays inside two deviations") {
  auto rng = make_rng(31);
  for (int i = 0; i < 2000; ++i) CHECK(std::abs(nn::truncated_normal<double>(rng, 0.02)) <= 0.04);
}

TEST_CASE("linear layer gradients match finite differences") {
  auto rng = make_rng(32);
  nn::Linear<double> lin(5, 7, rng);
  MatD x = test::random_mat<double>(4, 5, rng);
  MatD weight = test::random_mat<double>(4, 7, rng);

  std::vector<nn::ParamView<double>> params;
  lin.collect(params, "lin");
  auto res = check_grads(
      x, params, [&] { return lin.forward(x, true); }, [&] { return lin.forward(x, false); },
      [&](const MatD& w) { return lin.backward(w); }, [&] { lin.zero_grad(); }, weight);
  CHECK(res.max_rel < 1e-6);
}

TEST_CASE("layer norm gradients match finite differences") {
  auto rng = make_rng(33);
  nn::LayerNorm<double> ln(6);
  ln.gamma = test::random_mat<double>(1, 6, rng).row(0);
  ln.beta = test::random_mat<double>(1, 6, rng).row(0);
  MatD x = test::random_mat<double>(5, 6, rng);
  MatD weight = test::random_mat<double>(5, 6, rng);

  std::vector<nn::ParamView<double>> params;
  ln.collect(params, "ln");
  auto res = check_grads(
      x, params, [&] { return ln.forward(x, true); }, [&] { return ln.forward(x, false); },
      [&](const MatD& w) { return ln.backward(w); }, [&] { ln.zero_grad(); }, weight);
  CHECK(res.max_rel < 1e-5);
}

TEST_CASE("layer norm output rows are standardized") {
  auto rng = make_rng(34);
  nn::LayerNorm<double> ln(16);
  MatD x = test::random_mat<double>(8, 16, rng, 3.0);
  MatD y = ln.forward(x, false);
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    CHECK(std::abs(y.row(i).mean()) < 1e-10);
    double var = (y.row(i).array() - y.row(i).mean()).square().mean();
    CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("mlp gradients match finite differences") {
  auto rng = make_rng(35);
  nn::Mlp<double> mlp(5, 9, rng);
  MatD x = test::random_mat<double>(4, 5, rng);
  MatD weight = test::random_mat<double>(4, 5, rng);

  std::vector<nn::ParamView<double>> params;
  mlp.collect(params, "mlp");
  auto res = check_grads(
      x, params, [&] { return mlp.forward(x, true); }, [&] { return mlp.forward(x, false); },
      [&](const MatD& w) { return mlp.backward(w); }, [&] { mlp.zero_grad(); }, weight);
  CHECK(res.max_rel < 1e-5);
}

TEST_CASE("transformer block gradients match finite differences") {
  const nn::BatchShape shape{2, 4, 2, 2};
  MatD weight;
  for (auto kind : {nn::MixerKind::LinearAttention, nn::MixerKind::SoftmaxAttention}) {
    auto rng = make_rng(36);
    nn::TransformerBlock<double> block(8, 2, kind, 2.0, rng);
    MatD x = test::random_mat<double>(shape.batch * shape.tokens, 8, rng);
    weight = test::random_mat<double>(x.rows(), 8, rng);

    std::vector<nn::ParamView<double>> params;
    block.collect(params, "block");
    auto res = check_grads(
        x, params, [&] { return block.forward(x, shape, true); },
        [&] { return block.forward(x, shape, false); },
        [&](const MatD& w) { return block.backward(w); }, [&] { block.zero_grad(); }, weight);
    CHECK(res.max_rel < 1e-4);
  }
}

TEST_CASE("depthwise conv mixer gradients match finite differences") {
  const nn::BatchShape shape{2, 16, 4, 4};
  auto rng = make_rng(37);
  nn::DepthwiseConvMixer<double> conv(3, 3, rng);
  MatD x = test::random_mat<double>(shape.batch * shape.tokens, 3, rng);
  MatD weight = test::random_mat<double>(x.rows(), 3, rng);

  std::vector<nn::ParamView<double>> params;
  conv.collect(params, "conv");
  auto res = check_grads(
      x, params, [&] { return conv.forward(x, shape, true); },
      [&] { return conv.forward(x, shape, false); },
      [&](const MatD& w) { return conv.backward(w); }, [&] { conv.zero_grad(); }, weight);
  CHECK(res.max_rel < 1e-5);
}

TEST_CASE("conv mixer with 1x1 kernel acts per token") {
  const nn::BatchShape shape{1, 4, 2, 2};
  auto rng = make_rng(38);
  nn::DepthwiseConvMixer<double> conv(2, 1, rng);
  MatD x = test::random_mat<double>(4, 2, rng);
  MatD y = conv.forward(x, shape, false);
  for (Eigen::Index t = 0; t < 4; ++t)
    for (Eigen::Index c = 0; c < 2; ++c)
      CHECK(y(t, c) == doctest::Approx(conv.W(c, 0) * x(t, c) + conv.b(c)));
}

TEST_CASE("zeroed output projections turn a block into the identity") {
  auto rng = make_rng(39);
  nn::TransformerBlock<Real> block(8, 2, nn::MixerKind::LinearAttention, 4.0, rng);
  auto* attn = dynamic_cast<nn::MultiHeadAttentionMixer<Real>*>(block.mixer.get());
  REQUIRE(attn != nullptr);
  attn->wo.W.setZero();
  block.mlp.fc2.W.setZero();
  auto rng_x = make_rng(40);
  Mat<Real> x = test::random_mat<Real>(6, 8, rng_x);
  Mat<Real> y = block.forward(x, nn::BatchShape{1, 6, 2, 3}, false);
  CHECK((y - x).cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("block parameters survive a save and load round trip") {
  auto rng_a = make_rng(41);
  nn::TransformerBlock<Real> a(8, 2, nn::MixerKind::LinearAttention, 2.0, rng_a);
  auto rng_b = make_rng(99);
  nn::TransformerBlock<Real> b(8, 2, nn::MixerKind::LinearAttention, 2.0, rng_b);

  TensorStore ts;
  a.save(ts, "blk");
  b.load(ts, "blk");

  auto rng_x = make_rng(42);
  Mat<Real> x = test::random_mat<Real>(5, 8, rng_x);
  const nn::BatchShape shape{1, 5, 1, 5};
  Mat<Real> ya = a.forward(x, shape, false);
  Mat<Real> yb = b.forward(x, shape, false);
  CHECK((ya - yb).cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("loading a mismatched linear shape is rejected") {
  auto rng = make_rng(43);
  nn::Linear<Real> lin(4, 4, rng);
  TensorStore ts;
  nn::Linear<Real> other(4, 6, rng);
  other.save(ts, "lin");
  CHECK_THROWS_AS(lin.load(ts, "lin"), ShapeError);
}

TEST_CASE("collected views point at live storage") {
  auto rng = make_rng(44);
  nn::Linear<Real> lin(3, 3, rng);
  std::vector<nn::ParamView<Real>> params;
  lin.collect(params, "lin");
  REQUIRE(params.size() == 2);
  CHECK(params[0].name == "lin.weight");
  CHECK(params[1].name == "lin.bias");
  params[0].value[0] = 7.5f;
  CHECK(lin.W(0, 0) == 7.5f);
  CHECK(params[0].size == 9);
  CHECK(params[1].size == 3);
}
