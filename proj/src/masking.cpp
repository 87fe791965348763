#include "rsfm/masking.hpp"

#include <cmath>

#include "rsfm/rng.hpp"

namespace rsfm::masking {

namespace {

void require_divisible(Index n, Index d, const char* what, const char* by) {
  if (d <= 0) throw MaskError(std::string(by) + " must be positive");
  if (n <= 0 || n % d != 0) {
    throw MaskError(std::string(what) + " (" + std::to_string(n) + ") is not divisible by " + by + " (" +
                    std::to_string(d) + ")");
  }
}

}  // namespace

PatchGrid build_patch_grid(const Shape& dims, Index p, Index cp, WindowDims window) {
  if (dims.size() != 4) throw MaskError("patch grid needs dims {T, C, H, W}, got " + shape_str(dims));
  PatchGrid g;
  g.frames = dims[0];
  g.channels = dims[1];
  g.height = dims[2];
  g.width = dims[3];
  g.p = p;
  g.cp = cp;
  g.window = window;
  if (g.frames <= 0) throw MaskError("T must be positive");
  require_divisible(g.height, p, "H", "patch size p");
  require_divisible(g.width, p, "W", "patch size p");
  require_divisible(g.channels, cp, "C", "spectral group size c_p");
  g.groups = g.channels / cp;
  g.nh = g.height / p;
  g.nw = g.width / p;
  if (window.t != g.frames) {
    throw MaskError("window frames (" + std::to_string(window.t) + ") must equal T (" + std::to_string(g.frames) + ")");
  }
  require_divisible(g.nh, window.h, "patch rows n_h", "window height w_h");
  require_divisible(g.nw, window.w, "patch cols n_w", "window width w_w");
  return g;
}

std::vector<std::uint8_t> MaskPlan::spatial_mask() const {
  std::vector<std::uint8_t> m(static_cast<std::size_t>(nh * nw));
  for (Index y = 0; y < nh; ++y)
    for (Index x = 0; x < nw; ++x) m[static_cast<std::size_t>(y * nw + x)] = masked(y, x) ? 1 : 0;
  return m;
}

Tensor<std::uint8_t> MaskPlan::patch_mask(const PatchGrid& grid) const {
  if (grid.nh != nh || grid.nw != nw) throw MaskError("mask plan does not match patch grid");
  const auto sm = spatial_mask();
  Tensor<std::uint8_t> out(Shape{grid.frames, grid.groups, nh, nw});
  const Index plane = nh * nw;
  for (Index k = 0; k < grid.frames * grid.groups; ++k) std::copy(sm.begin(), sm.end(), out.data() + k * plane);
  return out;
}

Index MaskPlan::masked_positions() const {
  Index n = 0;
  for (Index y = 0; y < nh; ++y)
    for (Index x = 0; x < nw; ++x) n += masked(y, x) ? 1 : 0;
  return n;
}

MaskPlan empty_plan(const PatchGrid& grid) {
  MaskPlan plan;
  plan.nh = grid.nh;
  plan.nw = grid.nw;
  plan.window = grid.window;
  plan.window_mask.assign(static_cast<std::size_t>(grid.num_windows()), 0);
  plan.pimask_keep.assign(static_cast<std::size_t>(grid.nh * grid.nw), 0);
  return plan;
}

MaskPlan sample_window_mask(const PatchGrid& grid, double mask_ratio, std::uint64_t seed) {
  if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) {
    throw MaskError("mask ratio must lie in (0, 1), got " + std::to_string(mask_ratio));
  }
  MaskPlan plan = empty_plan(grid);
  plan.mask_ratio = mask_ratio;
  plan.seed = seed;
  const Index n = grid.num_windows();
  const auto k = static_cast<Index>(std::floor(mask_ratio * static_cast<double>(n) + 1e-9));
  Rng rng(derive_seed(seed, "window-mask"));
  for (Index w : rng.choose(n, k)) plan.window_mask[static_cast<std::size_t>(w)] = 1;
  return plan;
}

MaskPlan apply_pimask(const MaskPlan& plan, double keep_fraction, std::uint64_t seed) {
  if (!(keep_fraction >= 0.0 && keep_fraction < 1.0)) {
    throw MaskError("PIMask keep fraction must lie in [0, 1), got " + std::to_string(keep_fraction));
  }
  if (std::any_of(plan.pimask_keep.begin(), plan.pimask_keep.end(), [](std::uint8_t v) { return v != 0; })) {
    throw MaskError("mask plan already carries a PIMask");
  }
  MaskPlan out = plan;
  out.keep_fraction = keep_fraction;
  out.pimask_seed = seed;
  const Index wh = plan.window.h, ww = plan.window.w, per = wh * ww;
  const auto keep = static_cast<Index>(std::floor(keep_fraction * static_cast<double>(per) + 1e-9));
  if (keep == 0) return out;
  for (Index wy = 0; wy < plan.windows_h(); ++wy)
    for (Index wx = 0; wx < plan.windows_w(); ++wx) {
      if (!plan.window_masked(wy, wx)) continue;
      Rng rng(derive_seed(seed, "pimask", wy * plan.windows_w() + wx));
      for (Index k : rng.choose(per, keep)) {
        const Index y = wy * wh + k / ww, x = wx * ww + k % ww;
        out.pimask_keep[static_cast<std::size_t>(y * plan.nw + x)] = 1;
      }
    }
  return out;
}

template <typename T>
Tensor<T> patchify(const Tensor<T>& values, const PatchGrid& g) {
  if (values.shape() != g.pixel_shape()) {
    throw MaskError("patchify: values " + shape_str(values.shape()) + " do not match grid " + shape_str(g.pixel_shape()));
  }
  Tensor<T> out(g.patch_shape());
  const Index p = g.p, cp = g.cp, H = g.height, W = g.width, C = g.channels, P = g.patch_dim();
  T* dst = out.data();
  for (Index t = 0; t < g.frames; ++t)
    for (Index gr = 0; gr < g.groups; ++gr)
      for (Index i = 0; i < g.nh; ++i)
        for (Index j = 0; j < g.nw; ++j) {
          for (Index b = 0; b < cp; ++b)
            for (Index r = 0; r < p; ++r) {
              const T* src = values.data() + ((t * C + gr * cp + b) * H + i * p + r) * W + j * p;
              std::copy_n(src, p, dst + (b * p + r) * p);
            }
          dst += P;
        }
  return out;
}

template <typename T>
Tensor<T> unpatchify(const Tensor<T>& patches, const PatchGrid& g) {
  if (patches.shape() != g.patch_shape()) {
    throw MaskError("unpatchify: patches " + shape_str(patches.shape()) + " do not match grid " +
                    shape_str(g.patch_shape()));
  }
  Tensor<T> out(g.pixel_shape());
  const Index p = g.p, cp = g.cp, H = g.height, W = g.width, C = g.channels, P = g.patch_dim();
  const T* src = patches.data();
  for (Index t = 0; t < g.frames; ++t)
    for (Index gr = 0; gr < g.groups; ++gr)
      for (Index i = 0; i < g.nh; ++i)
        for (Index j = 0; j < g.nw; ++j) {
          for (Index b = 0; b < cp; ++b)
            for (Index r = 0; r < p; ++r) {
              T* dst = out.data() + ((t * C + gr * cp + b) * H + i * p + r) * W + j * p;
              std::copy_n(src + (b * p + r) * p, p, dst);
            }
          src += P;
        }
  return out;
}

template <typename T>
Tensor<T> apply_mask(const Tensor<T>& patches, const PatchGrid& g, const MaskPlan& plan) {
  if (patches.shape() != g.patch_shape()) {
    throw MaskError("apply_mask: patches " + shape_str(patches.shape()) + " do not match grid " +
                    shape_str(g.patch_shape()));
  }
  if (plan.nh != g.nh || plan.nw != g.nw) throw MaskError("apply_mask: plan does not match grid");
  const auto sm = plan.spatial_mask();
  Tensor<T> out = patches;
  const Index P = g.patch_dim(), plane = g.nh * g.nw;
  for (Index k = 0; k < g.frames * g.groups; ++k)
    for (Index s = 0; s < plane; ++s) {
      if (sm[static_cast<std::size_t>(s)]) std::fill_n(out.data() + (k * plane + s) * P, P, T(0));
    }
  return out;
}

template <typename T>
Tensor<T> apply_mask_pixels(const Tensor<T>& values, const PatchGrid& g, const MaskPlan& plan) {
  if (values.shape() != g.pixel_shape()) throw MaskError("apply_mask_pixels: shape mismatch");
  if (plan.nh != g.nh || plan.nw != g.nw) throw MaskError("apply_mask_pixels: plan does not match grid");
  Tensor<T> out = values;
  const Index H = g.height, W = g.width, p = g.p;
  for (Index k = 0; k < g.frames * g.channels; ++k)
    for (Index y = 0; y < H; ++y)
      for (Index j = 0; j < g.nw; ++j) {
        if (plan.masked(y / p, j)) std::fill_n(out.data() + (k * H + y) * W + j * p, p, T(0));
      }
  return out;
}

nlohmann::json to_json(const MaskPlan& plan) {
  return {{"nh", plan.nh},
          {"nw", plan.nw},
          {"window", {plan.window.t, plan.window.h, plan.window.w}},
          {"mask_ratio", plan.mask_ratio},
          {"keep_fraction", plan.keep_fraction},
          {"seed", plan.seed},
          {"pimask_seed", plan.pimask_seed},
          {"window_mask", plan.window_mask},
          {"pimask_keep", plan.pimask_keep}};
}

MaskPlan mask_plan_from_json(const nlohmann::json& j) {
  try {
    MaskPlan p;
    p.nh = j.at("nh").get<Index>();
    p.nw = j.at("nw").get<Index>();
    const auto w = j.at("window").get<std::vector<Index>>();
    if (w.size() != 3) throw MaskError("mask plan window must have three entries");
    p.window = {w[0], w[1], w[2]};
    p.mask_ratio = j.at("mask_ratio").get<double>();
    p.keep_fraction = j.at("keep_fraction").get<double>();
    p.seed = j.at("seed").get<std::uint64_t>();
    p.pimask_seed = j.at("pimask_seed").get<std::uint64_t>();
    p.window_mask = j.at("window_mask").get<std::vector<std::uint8_t>>();
    p.pimask_keep = j.at("pimask_keep").get<std::vector<std::uint8_t>>();
    if (p.window.h <= 0 || p.window.w <= 0 || p.nh % p.window.h || p.nw % p.window.w ||
        static_cast<Index>(p.window_mask.size()) != p.windows_h() * p.windows_w() ||
        static_cast<Index>(p.pimask_keep.size()) != p.nh * p.nw) {
      throw MaskError("mask plan arrays disagree with its grid");
    }
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw MaskError(std::string("malformed mask plan: ") + e.what());
  }
}

}  // namespace rsfm::masking

namespace rsfm::masking {
#define RSFM_INSTANTIATE(T)                                                                  \
  template Tensor<T> patchify(const Tensor<T>&, const PatchGrid&);                           \
  template Tensor<T> unpatchify(const Tensor<T>&, const PatchGrid&);                         \
  template Tensor<T> apply_mask(const Tensor<T>&, const PatchGrid&, const MaskPlan&);        \
  template Tensor<T> apply_mask_pixels(const Tensor<T>&, const PatchGrid&, const MaskPlan&);
RSFM_INSTANTIATE(float)
RSFM_INSTANTIATE(double)
#undef RSFM_INSTANTIATE
}  // namespace rsfm::masking
