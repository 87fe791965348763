#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <functional>
#include <vector>

#include "rsfm/autograd.hpp"
#include "rsfm/rng.hpp"

namespace rsfm::testing {

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, scale);
  return t;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  double m = 0;
  for (Index i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

// Projects f(inputs) onto a fixed random direction so every output element
// contributes to the scalar, then compares analytic and central-difference
// gradients for every input element. Returns the worst relative error.
inline double op_gradient_error(std::vector<Tensor<double>> inputs,
                                const std::function<Var<double>(const std::vector<Var<double>>&)>& f,
                                std::uint64_t seed = 7, double step = 1e-6) {
  Rng rng(seed);
  std::vector<Var<double>> vars;
  for (auto& t : inputs) vars.emplace_back(t, true);
  Var<double> out = f(vars);
  Tensor<double> dir = random_tensor(out.shape(), rng);
  auto project = [&](const Var<double>& o) {
    double s = 0;
    for (Index i = 0; i < o.size(); ++i) s += o.value()[i] * dir[i];
    return s;
  };
  out.backward(dir);
  double worst = 0;
  for (std::size_t k = 0; k < vars.size(); ++k) {
    for (Index i = 0; i < inputs[k].size(); ++i) {
      auto eval = [&](double delta) {
        std::vector<Var<double>> vs;
        for (std::size_t j = 0; j < inputs.size(); ++j) {
          Tensor<double> t = inputs[j];
          if (j == k) t[i] += delta;
          vs.emplace_back(t, false);
        }
        return project(f(vs));
      };
      const double numeric = (eval(step) - eval(-step)) / (2 * step);
      const double analytic = vars[k].has_grad() ? vars[k].grad()[i] : 0.0;
      const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
      worst = std::max(worst, std::abs(numeric - analytic) / denom);
    }
  }
  return worst;
}

// Fresh directory removed on scope exit.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& name)
      : path(std::filesystem::temp_directory_path() / ("rsfm-test-" + name)) {
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

}  // namespace rsfm::testing
