#include "rsfm/loss.hpp"

#include <memory>

namespace rsfm::loss {

namespace {

template <typename T>
void check_shapes(const Tensor<T>& x, const Tensor<T>& xhat, const Tensor<std::uint8_t>& mask) {
  if (x.rank() != 5) throw LossError("loss: expected [B, T, C, H, W] tensors, got " + shape_str(x.shape()));
  if (xhat.shape() != x.shape() || mask.shape() != x.shape()) {
    throw LossError("loss: shapes " + shape_str(x.shape()) + ", " + shape_str(xhat.shape()) + " and mask " +
                    shape_str(mask.shape()) + " differ");
  }
}

void check_counts(const Shape& s, std::span<const Index> c) {
  if (static_cast<Index>(c.size()) != s[0]) {
    throw LossError("loss: " + std::to_string(c.size()) + " channel counts for batch of " + std::to_string(s[0]));
  }
}

Index count(const Tensor<std::uint8_t>& mask) {
  Index m = 0;
  for (Index i = 0; i < mask.size(); ++i) m += mask[i] != 0;
  return m;
}

// Masked channel sums of x - xhat per (b, t, h, w).
template <typename T>
std::vector<double> channel_residuals(const Tensor<T>& x, const Tensor<T>& xhat, const Tensor<std::uint8_t>& mask) {
  const Shape& s = x.shape();
  const Index BT = s[0] * s[1], C = s[2], HW = s[3] * s[4];
  std::vector<double> r(static_cast<std::size_t>(BT * HW));
#pragma omp parallel for schedule(static)
  for (Index bt = 0; bt < BT; ++bt)
    for (Index c = 0; c < C; ++c) {
      const Index base = (bt * C + c) * HW;
      for (Index i = 0; i < HW; ++i) {
        if (mask[base + i]) {
          r[static_cast<std::size_t>(bt * HW + i)] +=
              static_cast<double>(x[base + i]) - static_cast<double>(xhat[base + i]);
        }
      }
    }
  return r;
}

}  // namespace

std::vector<Index> valid_counts(std::span<const std::vector<std::uint8_t>> band_valid) {
  std::vector<Index> c;
  for (const auto& v : band_valid) {
    Index n = 0;
    for (auto b : v) n += b != 0;
    c.push_back(n);
  }
  return c;
}

Tensor<std::uint8_t> loss_mask(std::span<const masking::MaskPlan> plans,
                               std::span<const std::vector<std::uint8_t>> band_valid, const masking::PatchGrid& grid,
                               const LossOptions& opts) {
  if (plans.size() != band_valid.size()) throw LossError("loss_mask: one plan and one band mask per sample required");
  const Index B = static_cast<Index>(plans.size()), T = grid.frames, C = grid.channels, H = grid.height,
              W = grid.width, p = grid.p;
  Tensor<std::uint8_t> out(Shape{B, T, C, H, W});
  for (Index b = 0; b < B; ++b) {
    const auto& plan = plans[static_cast<std::size_t>(b)];
    const auto& valid = band_valid[static_cast<std::size_t>(b)];
    if (plan.nh != grid.nh || plan.nw != grid.nw) {
      throw LossError("loss_mask: plan grid " + std::to_string(plan.nh) + "x" + std::to_string(plan.nw) +
                      " does not match patch grid " + std::to_string(grid.nh) + "x" + std::to_string(grid.nw));
    }
    if (static_cast<Index>(valid.size()) != C) {
      throw LossError("loss_mask: band mask has " + std::to_string(valid.size()) + " entries for " +
                      std::to_string(C) + " channels");
    }
    std::vector<std::uint8_t> scored(static_cast<std::size_t>(H * W));
    for (Index y = 0; y < H; ++y)
      for (Index x = 0; x < W; ++x) {
        const Index py = y / p, px = x / p;
        scored[static_cast<std::size_t>(y * W + x)] =
            opts.include_pimask ? plan.window_masked(py / plan.window.h, px / plan.window.w) : plan.masked(py, px);
      }
    for (Index t = 0; t < T; ++t)
      for (Index c = 0; c < C; ++c) {
        if (!valid[static_cast<std::size_t>(c)]) continue;
        std::uint8_t* dst = out.data() + ((b * T + t) * C + c) * H * W;
        std::copy(scored.begin(), scored.end(), dst);
      }
  }
  return out;
}

template <typename T>
double spectral_loss(const Tensor<T>& x, const Tensor<T>& xhat, const Tensor<std::uint8_t>& mask, Index* m_out) {
  check_shapes(x, xhat, mask);
  const Index m = count(mask);
  if (m_out) *m_out = m;
  if (m == 0) return 0.0;
  double s = 0;
  for (Index i = 0; i < x.size(); ++i) {
    if (mask[i]) {
      const double d = static_cast<double>(x[i]) - static_cast<double>(xhat[i]);
      s += d * d;
    }
  }
  return s / static_cast<double>(m);
}

template <typename T>
double spatial_loss(const Tensor<T>& x, const Tensor<T>& xhat, const Tensor<std::uint8_t>& mask,
                    std::span<const Index> c) {
  check_shapes(x, xhat, mask);
  check_counts(x.shape(), c);
  const Index m = count(mask);
  if (m == 0) return 0.0;
  const auto r = channel_residuals(x, xhat, mask);
  const Index per_sample = static_cast<Index>(r.size()) / x.dim(0);
  double s = 0;
  for (Index b = 0; b < x.dim(0); ++b) {
    double sb = 0;
    for (Index i = 0; i < per_sample; ++i) sb += r[static_cast<std::size_t>(b * per_sample + i)] * r[static_cast<std::size_t>(b * per_sample + i)];
    s += static_cast<double>(c[static_cast<std::size_t>(b)]) * sb;
  }
  return s / static_cast<double>(m);
}

template <typename T>
Var<T> total_loss(const Tensor<T>& x, const Var<T>& xhat, const Tensor<std::uint8_t>& mask, std::span<const Index> c,
                  LossReport* report) {
  check_shapes(x, xhat.value(), mask);
  check_counts(x.shape(), c);
  Index m = 0;
  const double spectral = spectral_loss(x, xhat.value(), mask, &m);
  const double spatial = spatial_loss(x, xhat.value(), mask, c);
  if (report) {
    report->spectral_term = spectral;
    report->spatial_term = spatial;
    report->total = spectral + spatial;
    report->m = m;
    report->c.assign(c.begin(), c.end());
  }
  Tensor<T> value(Shape{1}, static_cast<T>(spectral + spatial));
  auto target = std::make_shared<const Tensor<T>>(x);
  auto lmask = std::make_shared<const Tensor<std::uint8_t>>(mask);
  std::vector<Index> counts(c.begin(), c.end());
  return make_op<T>(std::move(value), {xhat}, [target, lmask, counts, m](Node<T>& nd) {
    if (m == 0) return;
    auto& pn = *nd.parents[0];
    auto& g = pn.ensure_grad();
    const Tensor<T>& xh = pn.value;
    const Shape& s = xh.shape();
    const Index B = s[0], T_ = s[1], C = s[2], HW = s[3] * s[4];
    const auto r = channel_residuals(*target, xh, *lmask);
    const double up = static_cast<double>(nd.grad[0]) / static_cast<double>(m);
#pragma omp parallel for collapse(2) schedule(static)
    for (Index b = 0; b < B; ++b)
      for (Index t = 0; t < T_; ++t) {
        const double cb = static_cast<double>(counts[static_cast<std::size_t>(b)]);
        for (Index c = 0; c < C; ++c) {
          const Index base = ((b * T_ + t) * C + c) * HW;
          for (Index i = 0; i < HW; ++i) {
            if (!(*lmask)[base + i]) continue;
            const double d = static_cast<double>((*target)[base + i]) - static_cast<double>(xh[base + i]);
            const double ri = r[static_cast<std::size_t>((b * T_ + t) * HW + i)];
            g[base + i] += static_cast<T>(-2.0 * up * (d + cb * ri));
          }
        }
      }
  });
}

template <typename T>
Var<T> total_loss(const Tensor<T>& x, const Var<T>& xhat, std::span<const masking::MaskPlan> plans,
                  std::span<const std::vector<std::uint8_t>> band_valid, const masking::PatchGrid& grid,
                  LossReport* report, const LossOptions& opts) {
  const auto mask = loss_mask(plans, band_valid, grid, opts);
  const auto c = valid_counts(band_valid);
  return total_loss(x, xhat, mask, std::span<const Index>(c), report);
}

#define RSFM_LOSS_INST(T)                                                                                         \
  template double spectral_loss(const Tensor<T>&, const Tensor<T>&, const Tensor<std::uint8_t>&, Index*);        \
  template double spatial_loss(const Tensor<T>&, const Tensor<T>&, const Tensor<std::uint8_t>&,                  \
                               std::span<const Index>);                                                           \
  template Var<T> total_loss(const Tensor<T>&, const Var<T>&, const Tensor<std::uint8_t>&, std::span<const Index>, \
                             LossReport*);                                                                        \
  template Var<T> total_loss(const Tensor<T>&, const Var<T>&, std::span<const masking::MaskPlan>,                \
                             std::span<const std::vector<std::uint8_t>>, const masking::PatchGrid&, LossReport*,  \
                             const LossOptions&);
RSFM_LOSS_INST(float)
RSFM_LOSS_INST(double)
#undef RSFM_LOSS_INST

}  // namespace rsfm::loss
