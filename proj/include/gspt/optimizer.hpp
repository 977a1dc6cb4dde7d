#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "gspt/error.hpp"
#include "gspt/transformer.hpp"

namespace gspt {

struct ScheduleConfig {
  double peak_lr = 1e-4;
  double end_lr = 1e-5;
  std::size_t warmup_updates = 10000;

  void validate() const {
    if (!(end_lr > 0 && end_lr <= peak_lr)) throw ConfigError("learning rates must satisfy 0 < end_lr <= peak_lr");
  }
};

/// Linear warmup 0 -> peak over [0, warmup], then linear decay peak -> end
/// over (warmup, total].
inline double lr_at_step(const ScheduleConfig& cfg, std::size_t t, std::size_t total) {
  if (total < cfg.warmup_updates) throw ConfigError("total steps " + std::to_string(total) + " < warmup_updates " + std::to_string(cfg.warmup_updates));
  if (t > total) throw ConfigError("lr_at_step: step beyond schedule");
  const double w = static_cast<double>(cfg.warmup_updates);
  const double x = static_cast<double>(t);
  if (t <= cfg.warmup_updates) return cfg.warmup_updates == 0 ? cfg.peak_lr : cfg.peak_lr * x / w;
  const double span = static_cast<double>(total) - w;
  return cfg.peak_lr + (cfg.end_lr - cfg.peak_lr) * (x - w) / span;
}

/// Weight matrices decay; biases, norms and embedding tables do not. A tensor
/// counts as a weight when the last segment of its name starts with 'w'.
inline bool decays(std::string_view name) {
  const auto dot = name.rfind('.');
  const auto leaf = dot == std::string_view::npos ? name : name.substr(dot + 1);
  return !leaf.empty() && leaf.front() == 'w';
}

template <class T>
struct TensorRef {
  std::string name;
  Mat<T>* tensor;
};

/// Flattens anything with a `visit(f(name, Mat&))` member.
template <class T, class P>
std::vector<TensorRef<T>> tensor_refs(P& params) {
  std::vector<TensorRef<T>> out;
  params.visit([&](const std::string& name, Mat<T>& m) { out.push_back({name, &m}); });
  return out;
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Adaptive moments with decoupled weight decay (w <- w - lr*lambda*w applied
/// before the moment step).
template <class T>
class AdamW {
 public:
  explicit AdamW(AdamConfig cfg = {}) : cfg_(cfg) {}

  std::size_t steps() const noexcept { return t_; }

  void step(const std::vector<TensorRef<T>>& params, const std::vector<TensorRef<T>>& grads, double lr) {
    if (params.size() != grads.size()) throw DataError("AdamW: parameter/gradient count mismatch");
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.push_back(Mat<T>::Zero(p.tensor->rows(), p.tensor->cols()));
        v_.push_back(Mat<T>::Zero(p.tensor->rows(), p.tensor->cols()));
      }
    }
    if (m_.size() != params.size()) throw DataError("AdamW: parameter set changed between steps");
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      Mat<T>& w = *params[k].tensor;
      const Mat<T>& g = *grads[k].tensor;
      if (g.rows() != w.rows() || g.cols() != w.cols()) throw DataError("AdamW: gradient shape mismatch for " + params[k].name);
      const double decay = decays(params[k].name) ? lr * cfg_.weight_decay : 0.0;
      T* wp = w.data();
      T* mp = m_[k].data();
      T* vp = v_[k].data();
      const T* gp = g.data();
      for (Eigen::Index i = 0; i < w.size(); ++i) {
        const double gi = static_cast<double>(gp[i]);
        const double mi = cfg_.beta1 * static_cast<double>(mp[i]) + (1.0 - cfg_.beta1) * gi;
        const double vi = cfg_.beta2 * static_cast<double>(vp[i]) + (1.0 - cfg_.beta2) * gi * gi;
        mp[i] = static_cast<T>(mi);
        vp[i] = static_cast<T>(vi);
        double wi = static_cast<double>(wp[i]);
        wi -= decay * wi;
        wi -= lr * (mi / c1) / (std::sqrt(vi / c2) + cfg_.eps);
        wp[i] = static_cast<T>(wi);
      }
    }
  }

  const std::vector<Mat<T>>& first_moments() const noexcept { return m_; }
  const std::vector<Mat<T>>& second_moments() const noexcept { return v_; }

 private:
  AdamConfig cfg_;
  std::size_t t_ = 0;
  std::vector<Mat<T>> m_, v_;
};

}  // namespace gspt
