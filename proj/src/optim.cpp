#include "rsfm/optim.hpp"

#include <cmath>
#include <numbers>

namespace rsfm::optim {

template <typename T>
AdamW<T>::AdamW(std::vector<model::Param<T>> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto& p : params_) {
    m_.emplace_back(p.var.shape());
    v_.emplace_back(p.var.shape());
  }
}

template <typename T>
void AdamW<T>::step(double lr) {
  ++steps_;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& var = params_[k].var;
    if (!var.has_grad()) continue;
    Tensor<T>& w = var.value_mut();
    const Tensor<T>& g = var.grad();
    Tensor<T>& m = m_[k];
    Tensor<T>& v = v_[k];
    const double decay = params_[k].decay ? cfg_.weight_decay : 0.0;
    for (Index i = 0; i < w.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      const double mi = b1 * static_cast<double>(m[i]) + (1.0 - b1) * gi;
      const double vi = b2 * static_cast<double>(v[i]) + (1.0 - b2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double update = (mi / c1) / (std::sqrt(vi / c2) + cfg_.eps) + decay * static_cast<double>(w[i]);
      w[i] = static_cast<T>(static_cast<double>(w[i]) - lr * update);
    }
  }
}

template <typename T>
void AdamW<T>::zero_grad() {
  for (auto& p : params_) p.var.zero_grad();
}

double warmup_cosine_lr(long step, long total, long warmup, double peak, double min_lr) {
  if (warmup > 0 && step < warmup) return peak * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const long span = std::max(1L, total - warmup);
  const double progress = std::min(1.0, static_cast<double>(step - warmup) / static_cast<double>(span));
  return min_lr + 0.5 * (peak - min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

template class AdamW<float>;
template class AdamW<double>;

}  // namespace rsfm::optim
