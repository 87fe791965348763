#pragma once

#include <vector>

#include "rsfm/model.hpp"

namespace rsfm::optim {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

// Decoupled weight decay Adam. Holds its parameters by shared handle, so
// updates land in the owning model.
template <typename T>
class AdamW {
 public:
  AdamW(std::vector<model::Param<T>> params, AdamWConfig cfg);

  // Parameters without a gradient are skipped (their moments stay put).
  void step(double lr);
  void zero_grad();

  long steps() const { return steps_; }
  const std::vector<model::Param<T>>& params() const { return params_; }
  const AdamWConfig& config() const { return cfg_; }

  // Moments in parameter order, for checkpointing.
  std::vector<Tensor<T>>& first_moments() { return m_; }
  std::vector<Tensor<T>>& second_moments() { return v_; }
  const std::vector<Tensor<T>>& first_moments() const { return m_; }
  const std::vector<Tensor<T>>& second_moments() const { return v_; }
  void set_steps(long s) { steps_ = s; }

 private:
  std::vector<model::Param<T>> params_;
  AdamWConfig cfg_;
  std::vector<Tensor<T>> m_, v_;
  long steps_ = 0;
};

// Linear warmup from 0 over `warmup` steps, then cosine decay to min_lr at `total`.
double warmup_cosine_lr(long step, long total, long warmup, double peak, double min_lr = 0.0);

}  // namespace rsfm::optim
