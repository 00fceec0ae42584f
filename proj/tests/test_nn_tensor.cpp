#include <Eigen/Dense>

#include "doctest.h"
#include "rff/nn/gradcheck.hpp"
#include "rff/nn/ops.hpp"
#include "rff/nn/tensor.hpp"

using namespace rff;
using nn::Tensor;
using nn::TensorD;

TEST_CASE("tensor construction and invariants") {
  auto t = TensorD::from({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.size() == 6);
  CHECK(t.shape() == nn::Shape{2, 3});
  CHECK(t.as_matrix(3)(1, 2) == 6.0);

  CHECK_THROWS_AS(TensorD::from({2, 2}, {1, 2, 3}), UsageError);
}

TEST_CASE("backward accumulates into leaves and rejects non-scalars") {
  auto x = TensorD::from({3}, {1, 2, 3}, true);
  auto y = nn::sum(nn::scale(x, 2.0));
  nn::backward(y);
  CHECK(x.grad()[0] == doctest::Approx(2.0));
  CHECK(x.grad()[2] == doctest::Approx(2.0));

  // second sweep accumulates
  auto y2 = nn::sum(x);
  nn::backward(y2);
  CHECK(x.grad()[0] == doctest::Approx(3.0));

  auto v = nn::scale(x, 1.0);
  CHECK_THROWS_AS(nn::backward(v), UsageError);
}

TEST_CASE("linear identity case") {
  auto x = TensorD::from({1, 2}, {1, 2});
  auto w = TensorD::from({2, 2}, {1, 0, 0, 1});
  auto b = TensorD::from({2}, {0, 0});
  auto y = nn::linear(x, w, b);
  CHECK(y.data()[0] == 1.0);
  CHECK(y.data()[1] == 2.0);
}

TEST_CASE("linear hand-computed matrix multiply") {
  auto x = TensorD::from({2, 2}, {1, 0, 0, 1});
  auto w = TensorD::from({2, 2}, {3, 4, 5, 6});
  auto b = TensorD::from({2}, {1, 1});
  auto y = nn::linear(x, w, b);
  CHECK(y.data()[0] == 4.0);
  CHECK(y.data()[1] == 5.0);
  CHECK(y.data()[2] == 6.0);
  CHECK(y.data()[3] == 7.0);
}

TEST_CASE("linear rejects mismatched shapes naming both") {
  auto x = TensorD::zeros({2, 3});
  auto w = TensorD::zeros({4, 2});
  try {
    nn::linear(x, w);
    FAIL("expected UsageError");
  } catch (const UsageError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[4,2]") != std::string::npos);
  }
}

TEST_CASE("linear gradient matches finite differences on random 3x4") {
  Rng rng(11);
  auto x = TensorD::randn({3, 4}, rng);
  auto b = TensorD::randn({5}, rng);
  auto w0 = TensorD::randn({4, 5}, rng);
  double err = nn::finite_difference_check<double>(
      [&](const TensorD& w) { return nn::sum(nn::linear(x, w, b)); }, w0);
  CHECK(err < 1e-4);

  // and wrt the input
  double err_x = nn::finite_difference_check<double>(
      [&](const TensorD& xx) { return nn::sum(nn::linear(xx, w0, b)); }, x);
  CHECK(err_x < 1e-4);
}

TEST_CASE("sum of squares finite-difference baseline is tight") {
  Rng rng(5);
  auto x = TensorD::randn({4, 3}, rng);
  double err = nn::finite_difference_check<double>(
      [](const TensorD& t) {
        auto sq = nn::make_op<double>(
            t.shape(), {t},
            [](nn::Node<double>& self) {
              auto& p = self.parents[0];
              if (!p->requires_grad) return;
              p->ensure_grad();
              p->grad.array() += self.grad.array() * 2.0 * p->value.array();
            },
            "square");
        sq.flat() = t.flat().array().square();
        return nn::sum(sq);
      },
      x, 1e-4);
  CHECK(err < 1e-6);
}

TEST_CASE("gelu and relu gradients") {
  Rng rng(17);
  auto x = TensorD::randn({2, 7}, rng);
  double err = nn::finite_difference_check<double>(
      [](const TensorD& t) { return nn::sum(nn::gelu(t)); }, x);
  CHECK(err < 1e-4);
  // keep relu inputs away from the kink
  auto xr = TensorD::from({5}, {-2.0, -0.5, 0.3, 1.0, 2.5});
  double err_r = nn::finite_difference_check<double>(
      [](const TensorD& t) { return nn::sum(nn::relu(t)); }, xr);
  CHECK(err_r < 1e-4);
}

TEST_CASE("dropout is an exact identity in eval mode") {
  Rng rng(3);
  auto x = TensorD::randn({4, 4}, rng);
  auto y = nn::dropout(x, 0.5, /*train=*/false, nullptr);
  CHECK(y.node().get() == x.node().get());
}

TEST_CASE("dropout train mode masks and rescales") {
  Rng rng(3);
  auto x = TensorD::full({1000}, 1.0);
  auto y = nn::dropout(x, 0.25, true, &rng);
  int zeros = 0;
  double kept_value = 0;
  for (long i = 0; i < y.size(); ++i) {
    if (y.data()[i] == 0.0)
      ++zeros;
    else
      kept_value = y.data()[i];
  }
  CHECK(zeros > 180);
  CHECK(zeros < 320);
  CHECK(kept_value == doctest::Approx(1.0 / 0.75));
}

TEST_CASE("reshape and slice round trip gradients") {
  Rng rng(23);
  auto x = TensorD::randn({2, 6}, rng);
  double err = nn::finite_difference_check<double>(
      [](const TensorD& t) {
        auto r = nn::reshape(t, {3, 4});
        auto s = nn::slice_last(r, 1, 2);
        return nn::mean(s);
      },
      x);
  CHECK(err < 1e-4);
}

TEST_CASE("l1 loss value and gradient") {
  auto p = TensorD::from({2, 2}, {1, 2, 3, 4}, true);
  auto t = TensorD::from({2, 2}, {1.5, 2.5, 3.5, 4.5});
  auto l = nn::l1_loss(p, t);
  CHECK(l.item() == doctest::Approx(0.5));
  nn::backward(l);
  CHECK(p.grad()[0] == doctest::Approx(-0.25));
}
