#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "rsfm/tensor.hpp"

namespace rsfm::masking {

class MaskError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Window extent in (frames, patch rows, patch cols).
struct WindowDims {
  Index t = 6, h = 8, w = 8;
  friend bool operator==(const WindowDims&, const WindowDims&) = default;
};

struct PatchGrid {
  Index frames = 0, channels = 0, height = 0, width = 0;
  Index p = 4;   // spatial patch edge in pixels
  Index cp = 2;  // bands per spectral group
  Index groups = 0, nh = 0, nw = 0;
  WindowDims window;

  Index windows_h() const { return nh / window.h; }
  Index windows_w() const { return nw / window.w; }
  Index num_windows() const { return windows_h() * windows_w(); }
  Index num_patches() const { return frames * groups * nh * nw; }
  Index patch_dim() const { return p * p * cp; }
  Shape patch_shape() const { return {frames, groups, nh, nw, patch_dim()}; }
  Shape pixel_shape() const { return {frames, channels, height, width}; }

  friend bool operator==(const PatchGrid&, const PatchGrid&) = default;
};

// dims = {T, C, H, W}.
PatchGrid build_patch_grid(const Shape& dims, Index p, Index cp, WindowDims window);

// Spatial mask on the patch grid, broadcast over frames and spectral groups.
// Internally true = masked.
struct MaskPlan {
  Index nh = 0, nw = 0;
  WindowDims window;
  std::vector<std::uint8_t> window_mask;  // [nh / window.h, nw / window.w]
  std::vector<std::uint8_t> pimask_keep;  // [nh, nw]
  double mask_ratio = 0.0;
  double keep_fraction = 0.0;
  std::uint64_t seed = 0;
  std::uint64_t pimask_seed = 0;

  Index windows_h() const { return nh / window.h; }
  Index windows_w() const { return nw / window.w; }
  bool window_masked(Index wy, Index wx) const { return window_mask[static_cast<std::size_t>(wy * windows_w() + wx)]; }
  bool kept(Index y, Index x) const { return pimask_keep[static_cast<std::size_t>(y * nw + x)]; }
  bool masked(Index y, Index x) const { return window_masked(y / window.h, x / window.w) && !kept(y, x); }

  // [nh, nw], 1 = masked.
  std::vector<std::uint8_t> spatial_mask() const;
  // [nh, nw], 1 = visible patch inside a masked window.
  const std::vector<std::uint8_t>& spatial_keep() const { return pimask_keep; }
  // [T, G, nh, nw] broadcast view.
  Tensor<std::uint8_t> patch_mask(const PatchGrid& grid) const;
  Index masked_positions() const;
};

MaskPlan sample_window_mask(const PatchGrid& grid, double mask_ratio, std::uint64_t seed);
MaskPlan apply_pimask(const MaskPlan& plan, double keep_fraction, std::uint64_t seed);
// Every patch visible.
MaskPlan empty_plan(const PatchGrid& grid);

// [T, C, H, W] -> [T, G, nh, nw, p*p*cp]. Each patch is flattened as
// (band within group, pixel row, pixel column).
template <typename T>
Tensor<T> patchify(const Tensor<T>& values, const PatchGrid& grid);
template <typename T>
Tensor<T> unpatchify(const Tensor<T>& patches, const PatchGrid& grid);

// Zeroes masked patches of a [T, G, nh, nw, P] tensor.
template <typename T>
Tensor<T> apply_mask(const Tensor<T>& patches, const PatchGrid& grid, const MaskPlan& plan);
// Same on pixels [T, C, H, W].
template <typename T>
Tensor<T> apply_mask_pixels(const Tensor<T>& values, const PatchGrid& grid, const MaskPlan& plan);

nlohmann::json to_json(const MaskPlan& plan);
MaskPlan mask_plan_from_json(const nlohmann::json& j);

}  // namespace rsfm::masking
