// AdamW with bias correction and decoupled weight decay.

#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "lbr/tensor.hpp"

namespace lbr {

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.01;

  void validate() const {
    if (lr < 0) throw std::invalid_argument("optimizer: lr must be >= 0");
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
      throw std::invalid_argument("optimizer: betas must be in [0,1)");
    if (eps <= 0) throw std::invalid_argument("optimizer: eps must be > 0");
    if (weight_decay < 0) throw std::invalid_argument("optimizer: weight decay must be >= 0");
  }

  bool operator==(const AdamConfig&) const = default;
};

// Per-parameter first/second moment buffers plus a shared step counter.
template <class T>
class AdamW {
 public:
  explicit AdamW(AdamConfig cfg = {}) : cfg_(cfg) { cfg_.validate(); }

  const AdamConfig& config() const { return cfg_; }
  std::int64_t step_count() const { return step_; }

  void register_params(const std::vector<Tensor<T>>& params) {
    params_ = params;
    m_.clear();
    v_.clear();
    for (const auto& p : params_) {
      m_.emplace_back(p.value().size(), T(0));
      v_.emplace_back(p.value().size(), T(0));
    }
    step_ = 0;
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  // One update at learning rate lr (callers own the schedule).
  void step(double lr) {
    if (params_.empty()) throw std::logic_error("optimizer: no parameters registered");
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
      auto& value = params_[pi].mutable_value();
      const auto& grad = params_[pi].grad();
      if (grad.size() != value.size())
        throw ShapeError("optimizer: grad/param shape mismatch for parameter " +
                         std::to_string(pi));
      auto& m = m_[pi];
      auto& v = v_[pi];
      for (std::size_t i = 0; i < value.size(); ++i) {
        const double g = static_cast<double>(grad[i]);
        if (!std::isfinite(g))
          throw NumericError("optimizer: non-finite gradient at step " + std::to_string(step_));
        const double mi = cfg_.beta1 * static_cast<double>(m[i]) + (1.0 - cfg_.beta1) * g;
        const double vi = cfg_.beta2 * static_cast<double>(v[i]) + (1.0 - cfg_.beta2) * g * g;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        const double mhat = mi / bc1;
        const double vhat = vi / bc2;
        double p = static_cast<double>(value[i]);
        p -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * p);
        value[i] = static_cast<T>(p);
      }
    }
  }

  void step() { step(cfg_.lr); }

  // Moment buffers, exposed for checkpointing.
  const std::vector<std::vector<T>>& first_moments() const { return m_; }
  const std::vector<std::vector<T>>& second_moments() const { return v_; }
  std::vector<std::vector<T>>& mutable_first_moments() { return m_; }
  std::vector<std::vector<T>>& mutable_second_moments() { return v_; }
  void set_step_count(std::int64_t s) {
    if (s < 0) throw std::invalid_argument("optimizer: negative step count");
    step_ = s;
  }

 private:
  AdamConfig cfg_;
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<T>> m_;
  std::vector<std::vector<T>> v_;
  std::int64_t step_ = 0;
};

using AdamWF = AdamW<float>;

}  // namespace lbr
