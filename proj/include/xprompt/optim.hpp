#pragma once

#include <cmath>
#include <numbers>
#include <string>

#include "error.hpp"
#include "model.hpp"

namespace xprompt {

struct ScheduleConfig {
  double base_lr = 3e-4;
  int warmup_steps = 100;
  int total_steps = 2000;
};

// Linear warmup from 0 to base_lr, then half-cosine decay to 0 at total_steps.
inline double cosine_lr(int step, const ScheduleConfig& cfg) {
  if (cfg.warmup_steps < 0 || cfg.total_steps <= 0 || cfg.warmup_steps > cfg.total_steps)
    throw ConfigError("schedule needs 0 <= warmup_steps <= total_steps and total_steps > 0");
  if (step < 0 || step > cfg.total_steps)
    throw ConfigError("step " + std::to_string(step) + " outside [0, " + std::to_string(cfg.total_steps) + "]");
  if (step <= cfg.warmup_steps && cfg.warmup_steps > 0)
    return cfg.base_lr * static_cast<double>(step) / cfg.warmup_steps;
  const double progress =
      static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(cfg.total_steps - cfg.warmup_steps);
  return cfg.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled
};

template <typename T>
struct OptimState {
  long step = 0;
  ModelParams<T> m;
  ModelParams<T> v;
  AdamConfig hp;

  OptimState() = default;
  OptimState(const ModelParams<T>& params, AdamConfig cfg) : m(params.zeros_like()), v(params.zeros_like()), hp(cfg) {}
};

// Global L2 norm across every gradient tensor.
template <typename T>
double global_norm(const ModelParams<T>& grads) {
  double s = 0;
  grads.visit([&](const std::string&, const Mat<T>& g) { s += g.template cast<double>().squaredNorm(); });
  return std::sqrt(s);
}

// Rescales grads so their global norm is at most max_norm; returns the norm
// before clipping. Throws on a non-finite gradient, naming the tensor.
template <typename T>
double clip_grad_norm(ModelParams<T>& grads, double max_norm) {
  grads.visit([&](const std::string& name, const Mat<T>& g) {
    if (!g.allFinite()) throw NumericError("non-finite gradient in " + name);
  });
  const double norm = global_norm(grads);
  if (max_norm > 0 && norm > max_norm) {
    const T f = static_cast<T>(max_norm / (norm + 1e-12));
    grads.visit([&](const std::string&, Mat<T>& g) { g *= f; });
  }
  return norm;
}

// Bias-corrected Adam with decoupled weight decay.
template <typename T>
void adam_step(ModelParams<T>& params, const ModelParams<T>& grads, OptimState<T>& st, double lr) {
  st.step += 1;
  const double b1 = st.hp.beta1;
  const double b2 = st.hp.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.step));
  std::vector<const Mat<T>*> g;
  std::vector<Mat<T>*> m, v;
  grads.visit([&](const std::string&, const Mat<T>& x) { g.push_back(&x); });
  st.m.visit([&](const std::string&, Mat<T>& x) { m.push_back(&x); });
  st.v.visit([&](const std::string&, Mat<T>& x) { v.push_back(&x); });
  std::size_t k = 0;
  params.visit([&](const std::string& name, Mat<T>& p) {
    const Mat<T>& gk = *g[k];
    Mat<T>& mk = *m[k];
    Mat<T>& vk = *v[k];
    ++k;
    if (gk.rows() != p.rows() || gk.cols() != p.cols()) throw ConfigError("gradient shape mismatch for " + name);
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      const double gi = static_cast<double>(gk.data()[i]);
      const double mi = b1 * static_cast<double>(mk.data()[i]) + (1.0 - b1) * gi;
      const double vi = b2 * static_cast<double>(vk.data()[i]) + (1.0 - b2) * gi * gi;
      mk.data()[i] = static_cast<T>(mi);
      vk.data()[i] = static_cast<T>(vi);
      const double update = (mi / c1) / (std::sqrt(vi / c2) + st.hp.eps);
      const double pi = static_cast<double>(p.data()[i]);
      p.data()[i] = static_cast<T>(pi - lr * (update + st.hp.weight_decay * pi));
    }
  });
}

}  // namespace xprompt
