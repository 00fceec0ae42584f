#include <Eigen/Dense>

#include "doctest.h"
#include "rff/nn/ops.hpp"
#include "rff/nn/optim.hpp"

using namespace rff;
using nn::TensorD;
using nn::TensorF;

TEST_CASE("adamw zero gradient applies pure decoupled decay") {
  auto w = TensorD::from({3}, {1.0, -2.0, 0.5}, true);
  w.zero_grad();
  nn::AdamW<double>::Hyper h;
  h.lr = 0.1;
  h.weight_decay = 0.01;
  nn::AdamW<double> opt({{"w", w}}, h);
  opt.step();
  CHECK(w.data()[0] == doctest::Approx(0.999).epsilon(1e-15));
  CHECK(w.data()[1] == doctest::Approx(-1.998).epsilon(1e-15));
  CHECK(w.data()[2] == doctest::Approx(0.4995).epsilon(1e-15));
}

TEST_CASE("adamw single step matches hand evaluation of the update rule") {
  auto w = TensorD::from({1}, {1.0}, true);
  w.grad()[0] = 1.0;
  nn::AdamW<double>::Hyper h;
  h.lr = 0.1;
  h.weight_decay = 0.0;
  nn::AdamW<double> opt({{"w", w}}, h);
  opt.step();
  // m_hat = 1, v_hat = 1 -> w = 1 - 0.1 * 1/(1 + eps) ~= 0.9
  CHECK(w.data()[0] == doctest::Approx(0.9).epsilon(1e-7));
}

TEST_CASE("adamw step_count increments by one per update") {
  auto w = TensorD::from({1}, {1.0}, true);
  w.zero_grad();
  nn::AdamW<double> opt({{"w", w}});
  CHECK(opt.step_count() == 0);
  opt.step();
  CHECK(opt.step_count() == 1);
  opt.step();
  CHECK(opt.step_count() == 2);
}

TEST_CASE("adamw is deterministic: identical twins stay bit-identical over 100 steps") {
  Rng rng(5);
  auto wa = TensorF::randn({16}, rng, 1.0, true);
  auto wb = wa.detached_copy();
  wb.set_requires_grad(true);
  nn::AdamW<float>::Hyper h;
  h.lr = 1e-3;
  h.weight_decay = 0.0;
  nn::AdamW<float> oa({{"w", wa}}, h), ob({{"w", wb}}, h);
  Rng grads(77);
  for (int s = 0; s < 100; ++s) {
    std::vector<float> g(16);
    for (auto& v : g) v = static_cast<float>(grads.normal());
    oa.zero_grad();
    ob.zero_grad();
    for (int i = 0; i < 16; ++i) {
      wa.grad()[i] = g[static_cast<size_t>(i)];
      wb.grad()[i] = g[static_cast<size_t>(i)];
    }
    oa.step();
    ob.step();
  }
  for (int i = 0; i < 16; ++i) CHECK(wa.data()[i] == wb.data()[i]);
}

TEST_CASE("adamw rejects non-finite gradients naming the parameter") {
  auto w = TensorD::from({2}, {1.0, 2.0}, true);
  w.zero_grad();
  w.grad()[1] = std::numeric_limits<double>::quiet_NaN();
  nn::AdamW<double> opt({{"encoder.conv1.weight", w}});
  try {
    opt.step();
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("encoder.conv1.weight") != std::string::npos);
  }
}

TEST_CASE("lr_at_epoch step schedule: paper values") {
  auto s = nn::LrSchedule::step(1e-4, 1, 0.5);
  CHECK(nn::lr_at_epoch(s, 0) == doctest::Approx(1e-4));
  CHECK(nn::lr_at_epoch(s, 2) == doctest::Approx(2.5e-5));
}

TEST_CASE("lr_at_epoch warmup: paper values") {
  auto s = nn::LrSchedule::multi_step(5e-4, {}, 0.1).with_warmup(10);
  CHECK(nn::lr_at_epoch(s, 0) == doctest::Approx(5e-5));
  CHECK(nn::lr_at_epoch(s, 9) == doctest::Approx(5e-4));
  CHECK(nn::lr_at_epoch(s, 10) == doctest::Approx(5e-4));
}

TEST_CASE("lr_at_epoch multi-step milestones") {
  auto s = nn::LrSchedule::multi_step(1e-3, {300, 400}, 0.1);
  CHECK(nn::lr_at_epoch(s, 350) == doctest::Approx(1e-4));
  CHECK(nn::lr_at_epoch(s, 299) == doctest::Approx(1e-3));
  CHECK(nn::lr_at_epoch(s, 400) == doctest::Approx(1e-5));
}

TEST_CASE("lr schedules: strictly increasing during warmup, non-increasing after") {
  std::vector<nn::LrSchedule> schedules = {
      nn::LrSchedule::step(1e-4, 1, 0.5).with_warmup(5),
      nn::LrSchedule::step(2e-4, 3, 0.7),
      nn::LrSchedule::multi_step(5e-4, {30, 60, 80}, 0.1).with_warmup(10),
      nn::LrSchedule::constant(1e-3).with_warmup(10),
  };
  for (const auto& s : schedules) {
    for (int e = 0; e + 1 < s.warmup_epochs; ++e)
      CHECK(nn::lr_at_epoch(s, e) < nn::lr_at_epoch(s, e + 1));
    for (int e = s.warmup_epochs; e < 100; ++e)
      CHECK(nn::lr_at_epoch(s, e + 1) <= nn::lr_at_epoch(s, e));
  }
}
