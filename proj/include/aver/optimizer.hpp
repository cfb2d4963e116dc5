#pragma once

// In-place parameter updates from accumulated gradients. The optimizer keys
// its per-parameter state (momentum and Adam moments) by position in the
// parameter list, so the list must be stable across steps.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "aver/errors.hpp"
#include "aver/tensor.hpp"

namespace aver {

template <typename T = float>
class OptimizerT {
 public:
  static OptimizerT sgd(T lr, T momentum) {
    OptimizerT o;
    o.kind_ = Kind::kSgd;
    o.lr_ = lr;
    o.momentum_ = momentum;
    return o;
  }

  static OptimizerT adam(T lr, T beta1 = T(0.9), T beta2 = T(0.999), T eps = T(1e-8)) {
    OptimizerT o;
    o.kind_ = Kind::kAdam;
    o.lr_ = lr;
    o.beta1_ = beta1;
    o.beta2_ = beta2;
    o.eps_ = eps;
    return o;
  }

  T learning_rate() const { return lr_; }
  void set_learning_rate(T lr) { lr_ = lr; }
  std::int64_t steps_taken() const { return step_; }

  // Applies one update using each parameter's grad buffer, then leaves the
  // grads untouched (the next backward pass overwrites leaf grads anyway).
  void step(const std::vector<TensorT<T>*>& params) {
    if (state_.empty()) {
      state_.resize(params.size());
      for (std::size_t i = 0; i < params.size(); ++i) sizes_.push_back(params[i]->numel());
    }
    require(params.size() == state_.size(), "optimizer: parameter list size changed from ",
            state_.size(), " to ", params.size());
    ++step_;
    for (std::size_t i = 0; i < params.size(); ++i) {
      TensorT<T>& p = *params[i];
      require(p.numel() == sizes_[i], "optimizer: parameter ", i, " changed size");
      require(p.has_grad(), "optimizer: parameter ", i, " has no gradient");
      const std::vector<T>& g = p.grad();
      std::vector<T> v(p.data());
      Slot& slot = state_[i];
      if (kind_ == Kind::kSgd) {
        if (slot.m.empty()) slot.m.assign(p.numel(), T(0));
        for (std::size_t j = 0; j < v.size(); ++j) {
          slot.m[j] = momentum_ * slot.m[j] + g[j];
          v[j] -= lr_ * slot.m[j];
        }
      } else {
        if (slot.m.empty()) {
          slot.m.assign(p.numel(), T(0));
          slot.v.assign(p.numel(), T(0));
        }
        const T bc1 = T(1) - std::pow(beta1_, static_cast<T>(step_));
        const T bc2 = T(1) - std::pow(beta2_, static_cast<T>(step_));
        for (std::size_t j = 0; j < v.size(); ++j) {
          slot.m[j] = beta1_ * slot.m[j] + (T(1) - beta1_) * g[j];
          slot.v[j] = beta2_ * slot.v[j] + (T(1) - beta2_) * g[j] * g[j];
          const T mhat = slot.m[j] / bc1;
          const T vhat = slot.v[j] / bc2;
          v[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
      }
      p = TensorT<T>(p.shape(), std::move(v));
    }
  }

 private:
  enum class Kind { kSgd, kAdam };
  struct Slot {
    std::vector<T> m;
    std::vector<T> v;
  };

  Kind kind_ = Kind::kSgd;
  T lr_ = T(0.01);
  T momentum_ = T(0);
  T beta1_ = T(0.9), beta2_ = T(0.999), eps_ = T(1e-8);
  std::int64_t step_ = 0;
  std::vector<Slot> state_;
  std::vector<std::size_t> sizes_;
};

using Optimizer = OptimizerT<float>;

}  // namespace aver
