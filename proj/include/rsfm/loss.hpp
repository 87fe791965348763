#pragma once

#include <span>
#include <stdexcept>
#include <vector>

#include "rsfm/autograd.hpp"
#include "rsfm/masking.hpp"

namespace rsfm::loss {

class LossError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct LossOptions {
  bool include_pimask = false;  // count PIMask-visible patches as reconstruction targets
};

struct LossReport {
  double total = 0.0;
  double spectral_term = 0.0;
  double spatial_term = 0.0;
  Index m = 0;               // loss-contributing elements
  std::vector<Index> c;      // valid channels per sample
};

// [B, T, C, H, W], 1 where a pixel is reconstructed and scored. One plan and
// one band-validity vector per sample.
Tensor<std::uint8_t> loss_mask(std::span<const masking::MaskPlan> plans,
                               std::span<const std::vector<std::uint8_t>> band_valid, const masking::PatchGrid& grid,
                               const LossOptions& opts = {});

// Per-channel term (1/m) sum mask (x - xhat)^2; zero with m = 0 when nothing is scored.
template <typename T>
double spectral_loss(const Tensor<T>& x, const Tensor<T>& xhat, const Tensor<std::uint8_t>& mask, Index* m = nullptr);
// Channel-summed term sum_b (c_b / m) sum_{t,h,w} (sum_c mask x - sum_c mask xhat)^2.
template <typename T>
double spatial_loss(const Tensor<T>& x, const Tensor<T>& xhat, const Tensor<std::uint8_t>& mask,
                    std::span<const Index> c);

// Both terms as one differentiable scalar; gradients flow into xhat only.
template <typename T>
Var<T> total_loss(const Tensor<T>& x, const Var<T>& xhat, const Tensor<std::uint8_t>& mask, std::span<const Index> c,
                  LossReport* report = nullptr);

template <typename T>
Var<T> total_loss(const Tensor<T>& x, const Var<T>& xhat, std::span<const masking::MaskPlan> plans,
                  std::span<const std::vector<std::uint8_t>> band_valid, const masking::PatchGrid& grid,
                  LossReport* report = nullptr, const LossOptions& opts = {});

std::vector<Index> valid_counts(std::span<const std::vector<std::uint8_t>> band_valid);

}  // namespace rsfm::loss
