#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "rff/nn/tensor.hpp"

namespace rff::nn {

/// Piecewise learning-rate schedule with an optional linear warmup:
///   epoch <  warmup: base * (epoch+1) / warmup
///   epoch >= warmup, step kind:       base * gamma^floor(epoch / step_size)
///   epoch >= warmup, multi-step kind: base * gamma^(#milestones <= epoch)
struct LrSchedule {
  enum class Kind { Step, MultiStep };

  Kind kind = Kind::Step;
  double base_lr = 1e-4;
  double gamma = 0.5;
  int step_size = 1;
  std::vector<int> milestones;
  int warmup_epochs = 0;

  static LrSchedule step(double base, int step_size, double gamma) {
    LrSchedule s;
    s.kind = Kind::Step;
    s.base_lr = base;
    s.step_size = step_size;
    s.gamma = gamma;
    return s;
  }

  static LrSchedule multi_step(double base, std::vector<int> milestones, double gamma) {
    LrSchedule s;
    s.kind = Kind::MultiStep;
    s.base_lr = base;
    s.milestones = std::move(milestones);
    s.gamma = gamma;
    return s;
  }

  static LrSchedule constant(double base) { return multi_step(base, {}, 1.0); }

  LrSchedule with_warmup(int epochs) const {
    LrSchedule s = *this;
    s.warmup_epochs = epochs;
    return s;
  }
};

inline double lr_at_epoch(const LrSchedule& s, int epoch) {
  if (epoch < 0) throw UsageError("lr_at_epoch: negative epoch");
  if (epoch < s.warmup_epochs) return s.base_lr * (epoch + 1) / s.warmup_epochs;
  switch (s.kind) {
    case LrSchedule::Kind::Step:
      return s.base_lr * std::pow(s.gamma, std::floor(double(epoch) / s.step_size));
    case LrSchedule::Kind::MultiStep: {
      int hits = 0;
      for (int m : s.milestones)
        if (m <= epoch) ++hits;
      return s.base_lr * std::pow(s.gamma, hits);
    }
  }
  return s.base_lr;
}

/// AdamW with decoupled weight decay: w -= lr*wd*w, applied separately from
/// the bias-corrected moment update.
template <typename S>
class AdamW {
 public:
  struct Hyper {
    double lr = 1e-4;
    double beta1 = 0.90;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
  };

  AdamW(std::vector<std::pair<std::string, Tensor<S>>> params, Hyper hyper = {})
      : params_(std::move(params)), hyper_(hyper) {
    if (hyper_.lr <= 0) throw UsageError("AdamW: learning rate must be positive");
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (auto& [name, p] : params_) {
      m_.emplace_back(Vec::Zero(p.size()));
      v_.emplace_back(Vec::Zero(p.size()));
    }
  }

  void set_lr(double lr) {
    if (lr <= 0) throw UsageError("AdamW: learning rate must be positive");
    hyper_.lr = lr;
  }
  double lr() const { return hyper_.lr; }
  long step_count() const { return step_count_; }

  void zero_grad() {
    for (auto& [name, p] : params_) p.zero_grad();
  }

  void step() {
    ++step_count_;
    const S lr = static_cast<S>(hyper_.lr);
    const S b1 = static_cast<S>(hyper_.beta1);
    const S b2 = static_cast<S>(hyper_.beta2);
    const S eps = static_cast<S>(hyper_.eps);
    const S wd = static_cast<S>(hyper_.weight_decay);
    const S bc1 = S(1) - std::pow(b1, static_cast<S>(step_count_));
    const S bc2 = S(1) - std::pow(b2, static_cast<S>(step_count_));
    for (size_t i = 0; i < params_.size(); ++i) {
      auto& [name, p] = params_[i];
      if (!p.has_grad()) continue;
      auto g = p.grad();
      if (!g.allFinite())
        throw NumericError("AdamW: non-finite gradient for parameter '" + name + "'");
      auto w = p.flat();
      if (wd != S(0)) w -= (lr * wd) * w;
      m_[i] = b1 * m_[i] + (S(1) - b1) * g;
      v_[i].array() = b2 * v_[i].array() + (S(1) - b2) * g.array().square();
      w.array() -= lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + eps);
    }
  }

  const std::vector<std::pair<std::string, Tensor<S>>>& params() const { return params_; }

 private:
  using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;
  std::vector<std::pair<std::string, Tensor<S>>> params_;
  std::vector<Vec> m_, v_;
  Hyper hyper_;
  long step_count_ = 0;
};

}  // namespace rff::nn
