#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "aml/error.hpp"
#include "aml/matrix.hpp"

namespace aml {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

enum class StepOutcome { Applied, SkippedNonFiniteGradient, RejectedNonFiniteResult };

/// Adam over a fixed list of parameter matrices. Moments are allocated on the
/// first step and must keep the same shapes afterwards.
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  const AdamConfig& config() const { return config_; }
  void set_lr(double lr) { config_.lr = lr; }
  std::size_t steps() const { return t_; }
  std::size_t skipped() const { return skipped_; }
  std::size_t rejected() const { return rejected_; }

  StepOutcome step(std::span<Matrix* const> params, std::span<const Matrix> grads) {
    if (params.size() != grads.size()) throw ContractError("Adam::step: parameter/gradient count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params[i]->size() != grads[i].size())
        throw ContractError("Adam::step: gradient shape does not match parameter");
      if (!grads[i].all_finite()) {
        ++skipped_;
        return StepOutcome::SkippedNonFiniteGradient;
      }
    }
    if (m_.empty()) {
      for (const Matrix* p : params) {
        m_.emplace_back(p->rows(), p->cols());
        v_.emplace_back(p->rows(), p->cols());
      }
    }
    if (m_.size() != params.size()) throw ContractError("Adam::step: parameter list changed between steps");

    std::vector<Matrix> previous;
    previous.reserve(params.size());
    for (const Matrix* p : params) previous.push_back(*p);
    auto m_prev = m_;
    auto v_prev = v_;

    ++t_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    bool finite = true;
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto p = params[i]->flat();
      auto g = grads[i].flat();
      auto m = m_[i].flat();
      auto v = v_[i].flat();
      for (std::size_t k = 0; k < p.size(); ++k) {
        m[k] = config_.beta1 * m[k] + (1.0 - config_.beta1) * g[k];
        v[k] = config_.beta2 * v[k] + (1.0 - config_.beta2) * g[k] * g[k];
        p[k] -= config_.lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + config_.eps);
        finite = finite && std::isfinite(p[k]);
      }
    }
    if (!finite) {
      for (std::size_t i = 0; i < params.size(); ++i) *params[i] = std::move(previous[i]);
      m_ = std::move(m_prev);
      v_ = std::move(v_prev);
      --t_;
      ++rejected_;
      return StepOutcome::RejectedNonFiniteResult;
    }
    return StepOutcome::Applied;
  }

 private:
  AdamConfig config_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  std::size_t t_ = 0;
  std::size_t skipped_ = 0;
  std::size_t rejected_ = 0;
};

}  // namespace aml
