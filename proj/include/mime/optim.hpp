#pragma once

#include <cmath>
#include <functional>
#include <iostream>
#include <vector>

#include "mime/tensor.hpp"

namespace mime {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction. One state per parameter store; step() applies
// the accumulated gradients and leaves clearing them to the caller.
template <typename S>
class Adam {
 public:
  Adam(ParameterStore<S>& params, AdamConfig cfg = {}) : params_(&params), cfg_(cfg) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      const size_t n = static_cast<size_t>(params.at(i).shape.numel());
      m_[i].assign(n, 0.0);
      v_[i].assign(n, 0.0);
    }
  }

  int64_t steps() const { return t_; }

  // Returns false (and applies nothing) when any gradient is non-finite,
  // so one bad batch cannot poison the weights.
  bool step() {
    for (size_t i = 0; i < params_->size(); ++i) {
      for (S g : params_->at(i).grad) {
        if (!std::isfinite(static_cast<double>(g))) {
          std::cerr << "adam: skipping update, non-finite gradient in "
                    << params_->at(i).name << "\n";
          return false;
        }
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (size_t i = 0; i < params_->size(); ++i) {
      Parameter<S>& p = params_->at(i);
      double* m = m_[i].data();
      double* v = v_[i].data();
      for (size_t j = 0; j < p.value.size(); ++j) {
        const double g = static_cast<double>(p.grad[j]);
        m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
        v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
        const double mh = m[j] / bc1;
        const double vh = v[j] / bc2;
        p.value[j] -= static_cast<S>(cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps));
      }
    }
    return true;
  }

 private:
  ParameterStore<S>* params_;
  AdamConfig cfg_;
  int64_t t_ = 0;
  // first/second moments kept in double regardless of S
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

// Scales all gradients so their global L2 norm is at most max_norm.
template <typename S>
double clip_global_norm(ParameterStore<S>& params, double max_norm) {
  double sq = 0.0;
  for (size_t i = 0; i < params.size(); ++i)
    for (S g : params.at(i).grad) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const S scale = static_cast<S>(max_norm / norm);
    for (size_t i = 0; i < params.size(); ++i)
      for (S& g : params.at(i).grad) g *= scale;
  }
  return norm;
}

struct GradCheckResult {
  double max_abs_err = 0.0;
  double max_rel_err = 0.0;
  std::string worst_param;
  int64_t worst_index = -1;
  int64_t checked = 0;
};

// Central-difference check of d(loss)/d(param) for every element of every
// parameter in the store. `loss_fn` must rebuild the graph from the current
// parameter values and return the scalar loss; it is invoked 2N+1 times.
// Relative error uses |a - n| / max(|a|, |n|, eps_floor).
template <typename S>
GradCheckResult grad_check(ParameterStore<S>& params,
                           const std::function<S()>& loss_fn,
                           double h = 1e-5, double eps_floor = 1e-8) {
  static_assert(std::is_same_v<S, double>,
                "grad_check needs double precision to be meaningful");
  // Analytic pass: loss_fn runs backward, accumulating into params.grad.
  params.zero_grad();
  (void)loss_fn();
  std::vector<std::vector<S>> analytic;
  analytic.reserve(params.size());
  for (size_t i = 0; i < params.size(); ++i) analytic.push_back(params.at(i).grad);

  GradCheckResult res;
  for (size_t i = 0; i < params.size(); ++i) {
    Parameter<S>& p = params.at(i);
    for (size_t j = 0; j < p.value.size(); ++j) {
      const S saved = p.value[j];
      p.value[j] = saved + static_cast<S>(h);
      params.zero_grad();
      const double up = static_cast<double>(loss_fn());
      p.value[j] = saved - static_cast<S>(h);
      params.zero_grad();
      const double down = static_cast<double>(loss_fn());
      p.value[j] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = static_cast<double>(analytic[i][j]);
      const double abs_err = std::abs(a - numeric);
      const double rel_err = abs_err / std::max({std::abs(a), std::abs(numeric), eps_floor});
      ++res.checked;
      if (abs_err > res.max_abs_err) res.max_abs_err = abs_err;
      if (rel_err > res.max_rel_err) {
        res.max_rel_err = rel_err;
        res.worst_param = p.name;
        res.worst_index = static_cast<int64_t>(j);
      }
    }
  }
  params.zero_grad();
  for (size_t i = 0; i < params.size(); ++i) params.at(i).grad = analytic[i];
  return res;
}

}  // namespace mime
