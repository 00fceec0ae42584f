#include <Eigen/Dense>

#include "doctest.h"
#include "rff/nn/gradcheck.hpp"
#include "rff/nn/ops.hpp"

using namespace rff;
using nn::TensorD;

namespace {

// identity [D,3D] so that q = k = v = x
TensorD identity_qkv(int d) {
  auto w = TensorD::zeros({d, 3 * d});
  for (int i = 0; i < d; ++i)
    for (int part = 0; part < 3; ++part) w.data()[i * 3 * d + part * d + i] = 1.0;
  return w;
}

TensorD identity(int d) {
  auto w = TensorD::zeros({d, d});
  for (int i = 0; i < d; ++i) w.data()[i * d + i] = 1.0;
  return w;
}

}  // namespace

TEST_CASE("single token with identity projections passes through") {
  Rng rng(2);
  const int d = 4;
  auto x = TensorD::randn({1, 1, d}, rng);
  auto y = nn::multi_head_self_attention(x, identity_qkv(d), {}, identity(d),
                                         TensorD::zeros({d}), 2);
  // softmax over one key is 1, so output = value = x
  CHECK((y.flat() - x.flat()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("zero query weights give uniform attention = mean of values") {
  Rng rng(4);
  const int d = 4, t = 5;
  auto x = TensorD::randn({1, t, d}, rng);
  auto w = identity_qkv(d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) w.data()[i * 3 * d + j] = 0.0;  // zero the Q block
  TensorD probs;
  auto y = nn::multi_head_self_attention(x, w, {}, identity(d), TensorD::zeros({d}), 1, 0.0,
                                         false, nullptr, &probs);
  // every attention weight is 1/t
  for (long i = 0; i < probs.size(); ++i)
    CHECK(probs.data()[i] == doctest::Approx(1.0 / t).epsilon(1e-9));
  Eigen::RowVectorXd mean_v = x.as_matrix(d).colwise().mean();
  for (int tok = 0; tok < t; ++tok)
    for (int j = 0; j < d; ++j)
      CHECK(y.data()[tok * d + j] == doctest::Approx(mean_v[j]).epsilon(1e-9));
}

TEST_CASE("attention rows sum to 1 on random inputs") {
  Rng rng(8);
  const int b = 2, t = 6, d = 8, heads = 4;
  auto x = TensorD::randn({b, t, d}, rng);
  auto wqkv = TensorD::randn({d, 3 * d}, rng, 0.3);
  auto wo = TensorD::randn({d, d}, rng, 0.3);
  TensorD probs;
  nn::multi_head_self_attention(x, wqkv, {}, wo, TensorD::zeros({d}), heads, 0.0, false,
                                nullptr, &probs);
  auto rows = probs.as_matrix(t);  // [b*heads*t, t]
  for (long r = 0; r < rows.rows(); ++r)
    CHECK(std::abs(rows.row(r).sum() - 1.0) < 1e-6);
}

TEST_CASE("mhsa rejects emb dim not divisible by heads") {
  auto x = TensorD::zeros({1, 2, 6});
  auto wqkv = TensorD::zeros({6, 18});
  auto wo = TensorD::zeros({6, 6});
  CHECK_THROWS_AS(
      nn::multi_head_self_attention(x, wqkv, {}, wo, TensorD::zeros({6}), 4),
      UsageError);
}

TEST_CASE("mhsa gradients match finite differences") {
  Rng rng(16);
  const int b = 2, t = 4, d = 6, heads = 3;
  auto x = TensorD::randn({b, t, d}, rng);
  auto wqkv = TensorD::randn({d, 3 * d}, rng, 0.4);
  auto bqkv = TensorD::randn({3 * d}, rng, 0.1);
  auto wo = TensorD::randn({d, d}, rng, 0.4);
  auto bo = TensorD::randn({d}, rng, 0.1);
  auto head_loss = [&](const TensorD& xx, const TensorD& wq, const TensorD& w2) {
    auto y = nn::multi_head_self_attention(xx, wq, bqkv, w2, bo, heads);
    return nn::mean(nn::gelu(y));
  };
  double ex = nn::finite_difference_check<double>(
      [&](const TensorD& v) { return head_loss(v, wqkv, wo); }, x);
  CHECK(ex < 1e-4);
  double ew = nn::finite_difference_check<double>(
      [&](const TensorD& v) { return head_loss(x, v, wo); }, wqkv);
  CHECK(ew < 1e-4);
  double eo = nn::finite_difference_check<double>(
      [&](const TensorD& v) { return head_loss(x, wqkv, v); }, wo);
  CHECK(eo < 1e-4);
}

TEST_CASE("qkv_bias=false means no bias tensor in the projection") {
  // with a null bias handle the projection is purely x W
  auto x = TensorD::from({1, 1, 2}, {1.0, 2.0});
  auto w = TensorD::zeros({2, 6});
  auto y = nn::linear(x, w, {});
  CHECK(y.flat().cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("assemble_tokens broadcasts shared slots and adds positions") {
  const int b = 2, d = 3;
  auto cls = TensorD::from({d}, {1, 1, 1}, true);
  auto e0 = TensorD::from({b, d}, {1, 2, 3, 4, 5, 6}, true);
  auto pos = TensorD::from({2, d}, {10, 20, 30, 40, 50, 60}, true);
  auto y = nn::assemble_tokens<double>({cls, e0}, pos, b);
  CHECK(y.shape() == nn::Shape{b, 2, d});
  CHECK(y.data()[0] == 11.0);               // sample 0, slot 0 = cls + pos0
  CHECK(y.data()[3] == 41.0);               // sample 0, slot 1 = e0 + pos1
  CHECK(y.data()[6 + 3 + 0] == 44.0);       // sample 1, slot 1
  auto loss = nn::sum(y);
  nn::backward(loss);
  CHECK(cls.grad()[0] == 2.0);  // summed over batch
  CHECK(e0.grad()[0] == 1.0);
  CHECK(pos.grad()[0] == 2.0);
}

TEST_CASE("select_token extracts and routes gradient") {
  auto x = TensorD::from({2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8}, true);
  auto y = nn::select_token(x, 1);
  CHECK(y.data()[0] == 3.0);
  CHECK(y.data()[3] == 8.0);
  nn::backward(nn::sum(y));
  CHECK(x.grad()[0] == 0.0);
  CHECK(x.grad()[2] == 1.0);
  CHECK(x.grad()[7] == 1.0);
}

TEST_CASE("scale_rows applies per-sample factors") {
  auto x = TensorD::from({2, 3}, {1, 1, 1, 2, 2, 2}, true);
  auto y = nn::scale_rows(x, std::vector<double>{2.0, 0.0});
  CHECK(y.data()[0] == 2.0);
  CHECK(y.data()[5] == 0.0);
  nn::backward(nn::sum(y));
  CHECK(x.grad()[0] == 2.0);
  CHECK(x.grad()[5] == 0.0);
}
