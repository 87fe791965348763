#include "rsfm/frequency.hpp"

#include <fftw3.h>

#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <string>

#include "rsfm/rng.hpp"

namespace rsfm::freq {

namespace {

struct FftwBuffer {
  fftw_complex* ptr;
  explicit FftwBuffer(Index n) : ptr(fftw_alloc_complex(static_cast<std::size_t>(n))) {}
  ~FftwBuffer() { fftw_free(ptr); }
  FftwBuffer(const FftwBuffer&) = delete;
  FftwBuffer& operator=(const FftwBuffer&) = delete;
};

struct PlanPair {
  fftw_plan forward = nullptr, inverse = nullptr;
};

// Planning is not thread-safe in FFTW; execution with fftw_execute_dft on
// fresh aligned buffers is.
class PlanCache {
 public:
  PlanPair get(Index rows, Index cols) {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = plans_.find({rows, cols});
    if (it != plans_.end()) return it->second;
    FftwBuffer a(rows * cols), b(rows * cols);
    PlanPair p;
    p.forward = fftw_plan_dft_2d(static_cast<int>(rows), static_cast<int>(cols), a.ptr, b.ptr, FFTW_FORWARD, FFTW_ESTIMATE);
    p.inverse = fftw_plan_dft_2d(static_cast<int>(rows), static_cast<int>(cols), b.ptr, a.ptr, FFTW_BACKWARD, FFTW_ESTIMATE);
    plans_.emplace(std::make_pair(rows, cols), p);
    return p;
  }
  ~PlanCache() {
    for (auto& [k, p] : plans_) {
      fftw_destroy_plan(p.forward);
      fftw_destroy_plan(p.inverse);
    }
  }

 private:
  std::mutex mu_;
  std::map<std::pair<Index, Index>, PlanPair> plans_;
};

PlanCache& plan_cache() {
  static PlanCache cache;
  return cache;
}

void check_cutoff(double cutoff) {
  if (!(cutoff > 0.0 && cutoff <= 1.0)) throw FrequencyError("cutoff fraction must lie in (0, 1], got " + std::to_string(cutoff));
}

double bin_frequency(Index k, Index n) {
  const Index signed_k = k <= n / 2 ? k : k - n;
  return std::abs(static_cast<double>(signed_k)) / static_cast<double>(n);
}

template <typename T>
Tensor<T> filter_tensor(const Tensor<T>& x, double cutoff, FilterMode mode) {
  check_cutoff(cutoff);
  if (x.rank() < 2) throw FrequencyError("filter input needs at least two dimensions");
  const Index rows = x.dim(-2), cols = x.dim(-1), plane = rows * cols, n = x.size() / std::max<Index>(plane, 1);
  Tensor<T> out(x.shape());
  std::vector<double> buf(static_cast<std::size_t>(plane));
  for (Index s = 0; s < n; ++s) {
    std::copy_n(x.data() + s * plane, plane, buf.data());
    filter_slice(buf.data(), rows, cols, cutoff, mode);
    for (Index i = 0; i < plane; ++i) out[s * plane + i] = static_cast<T>(buf[static_cast<std::size_t>(i)]);
  }
  return out;
}

}  // namespace

void validate(const FrequencyFilterSpec& spec) {
  check_cutoff(spec.cutoff_fraction);
  if (!(spec.selection_prob >= 0.0 && spec.selection_prob <= 1.0)) {
    throw FrequencyError("selection probability must lie in [0, 1], got " + std::to_string(spec.selection_prob));
  }
}

double radial_frequency(Index ky, Index kx, Index rows, Index cols) {
  const double fy = bin_frequency(ky, rows), fx = bin_frequency(kx, cols);
  return std::sqrt(fy * fy + fx * fx) / std::sqrt(0.5);
}

void filter_slice(double* data, Index rows, Index cols, double cutoff, FilterMode mode) {
  const Index n = rows * cols;
  const PlanPair plan = plan_cache().get(rows, cols);
  FftwBuffer a(n), b(n);
  for (Index i = 0; i < n; ++i) {
    a.ptr[i][0] = data[i];
    a.ptr[i][1] = 0.0;
  }
  fftw_execute_dft(plan.forward, a.ptr, b.ptr);
  for (Index ky = 0; ky < rows; ++ky)
    for (Index kx = 0; kx < cols; ++kx) {
      const bool low = radial_frequency(ky, kx, rows, cols) <= cutoff;
      if (low != (mode == FilterMode::low)) {
        b.ptr[ky * cols + kx][0] = 0.0;
        b.ptr[ky * cols + kx][1] = 0.0;
      }
    }
  fftw_execute_dft(plan.inverse, b.ptr, a.ptr);
  const double inv = 1.0 / static_cast<double>(n);
  for (Index i = 0; i < n; ++i) data[i] = a.ptr[i][0] * inv;
}

template <typename T>
Tensor<T> lowpass_window(const Tensor<T>& x, double cutoff) {
  return filter_tensor(x, cutoff, FilterMode::low);
}
template <typename T>
Tensor<T> highpass_window(const Tensor<T>& x, double cutoff) {
  return filter_tensor(x, cutoff, FilterMode::high);
}

WindowSelection select_windows(const masking::PatchGrid& grid, const FrequencyFilterSpec& spec, std::uint64_t seed) {
  validate(spec);
  const Index n = grid.num_windows();
  const auto k = static_cast<Index>(std::floor(spec.selection_prob * static_cast<double>(n) + 1e-9));
  Rng rng(derive_seed(seed, "freq-select"));
  WindowSelection sel;
  sel.windows = rng.choose(n, k);
  for (Index w : sel.windows) {
    Rng mode_rng(derive_seed(seed, "freq-mode", w));
    sel.modes.push_back(mode_rng.bernoulli(0.5) ? FilterMode::high : FilterMode::low);
  }
  return sel;
}

template <typename T>
Tensor<T> apply_frequency_augmentation(const Tensor<T>& values, const masking::PatchGrid& grid,
                                       const FrequencyFilterSpec& spec, std::uint64_t seed,
                                       WindowSelection* selection_out) {
  if (values.shape() != grid.pixel_shape()) {
    throw FrequencyError("frequency augmentation: values " + shape_str(values.shape()) + " do not match grid " +
                         shape_str(grid.pixel_shape()));
  }
  WindowSelection sel = select_windows(grid, spec, seed);
  Tensor<T> out = values;
  const Index rows = grid.window.h * grid.p, cols = grid.window.w * grid.p;
  const Index slices = grid.frames * grid.channels, H = grid.height, W = grid.width;
  const Index jobs = static_cast<Index>(sel.windows.size()) * slices;
#pragma omp parallel
  {
    std::vector<double> buf(static_cast<std::size_t>(rows * cols));
#pragma omp for schedule(static)
    for (Index job = 0; job < jobs; ++job) {
      const auto wi = static_cast<std::size_t>(job / slices);
      const Index s = job % slices;
      const Index w = sel.windows[wi];
      const Index y0 = (w / grid.windows_w()) * rows, x0 = (w % grid.windows_w()) * cols;
      T* base = out.data() + s * H * W;
      for (Index r = 0; r < rows; ++r)
        for (Index c = 0; c < cols; ++c) buf[static_cast<std::size_t>(r * cols + c)] = base[(y0 + r) * W + x0 + c];
      filter_slice(buf.data(), rows, cols, spec.cutoff_fraction, sel.modes[wi]);
      for (Index r = 0; r < rows; ++r)
        for (Index c = 0; c < cols; ++c) base[(y0 + r) * W + x0 + c] = static_cast<T>(buf[static_cast<std::size_t>(r * cols + c)]);
    }
  }
  if (selection_out) *selection_out = std::move(sel);
  return out;
}

template Tensor<float> lowpass_window(const Tensor<float>&, double);
template Tensor<double> lowpass_window(const Tensor<double>&, double);
template Tensor<float> highpass_window(const Tensor<float>&, double);
template Tensor<double> highpass_window(const Tensor<double>&, double);
template Tensor<float> apply_frequency_augmentation(const Tensor<float>&, const masking::PatchGrid&,
                                                    const FrequencyFilterSpec&, std::uint64_t, WindowSelection*);
template Tensor<double> apply_frequency_augmentation(const Tensor<double>&, const masking::PatchGrid&,
                                                     const FrequencyFilterSpec&, std::uint64_t, WindowSelection*);

}  // namespace rsfm::freq
