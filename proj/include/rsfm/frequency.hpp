#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "rsfm/masking.hpp"
#include "rsfm/tensor.hpp"

namespace rsfm::freq {

class FrequencyError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class FilterMode { low, high };

// Radial frequency is normalized so the corner (Nyquist on both axes) sits
// at 1. A low-pass keeps radius <= cutoff, a high-pass keeps the rest.
struct FrequencyFilterSpec {
  double cutoff_fraction = 0.25;
  double selection_prob = 0.5;
  std::uint64_t seed = 0;
};

void validate(const FrequencyFilterSpec& spec);

// Normalized radius of DFT bin (ky, kx) on a rows x cols grid.
double radial_frequency(Index ky, Index kx, Index rows, Index cols);

// Filters every trailing [rows, cols] slice of `x`.
template <typename T>
Tensor<T> lowpass_window(const Tensor<T>& x, double cutoff);
template <typename T>
Tensor<T> highpass_window(const Tensor<T>& x, double cutoff);

// In place on one contiguous [rows, cols] slice.
void filter_slice(double* data, Index rows, Index cols, double cutoff, FilterMode mode);

struct WindowSelection {
  std::vector<Index> windows;     // spatial window ids, ascending (wy * windows_w + wx)
  std::vector<FilterMode> modes;  // one per selected window
};

WindowSelection select_windows(const masking::PatchGrid& grid, const FrequencyFilterSpec& spec, std::uint64_t seed);

// values [T, C, H, W]. Selected windows are filtered over their full pixel
// footprint in every frame and band; everything else is copied bit-exactly.
template <typename T>
Tensor<T> apply_frequency_augmentation(const Tensor<T>& values, const masking::PatchGrid& grid,
                                       const FrequencyFilterSpec& spec, std::uint64_t seed,
                                       WindowSelection* selection_out = nullptr);

}  // namespace rsfm::freq
