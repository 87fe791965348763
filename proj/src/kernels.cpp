#include "rsfm/kernels.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cmath>
#include <limits>
#include <vector>

namespace rsfm::kernels {

FlopCounter& flop_counter() {
  static FlopCounter counter;
  return counter;
}

namespace {

template <typename T>
inline T dot(const T* a, const T* b, Index n) {
  T acc = T(0);
  for (Index i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

template <typename T>
inline void axpy(T alpha, const T* x, T* y, Index n) {
#pragma omp simd
  for (Index i = 0; i < n; ++i) y[i] += alpha * x[i];
}

inline Index qkv_offset(const AttentionShape& s, Index w, Index tok, Index part, Index h) {
  return ((w * s.tokens + tok) * 3 + part) * s.heads * s.head_dim + h * s.head_dim;
}

void count_attention(const AttentionShape& s) {
  auto& fc = flop_counter();
  if (fc.enabled.load(std::memory_order_relaxed)) {
    fc.attention_flops += static_cast<std::uint64_t>(4 * s.windows * s.heads * s.tokens * s.tokens * s.head_dim);
  }
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

template <typename T>
inline void gelu_exact(T u, T& y, T& d) {
  const T cdf = T(0.5) * (T(1) + std::erf(u * T(kInvSqrt2)));
  y = u * cdf;
  d = cdf + u * T(kInvSqrt2Pi) * std::exp(T(-0.5) * u * u);
}

// Cephes expf, branch-free so the calling loop vectorizes.
inline float exp_approx(float x) {
  x = std::min(std::max(x, -87.0f), 87.0f);
  const float n = std::floor(x * 1.44269504088896341f + 0.5f);
  const float r = x - n * 0.693359375f + n * 2.12194440e-4f;
  float p = 1.9875691500e-4f;
  p = p * r + 1.3981999507e-3f;
  p = p * r + 8.3334519073e-3f;
  p = p * r + 4.1665795894e-2f;
  p = p * r + 1.6666665459e-1f;
  p = p * r + 5.0000001201e-1f;
  p = p * r * r + r + 1.0f;
  return p * std::bit_cast<float>((static_cast<std::int32_t>(n) + 127) << 23);
}

}  // namespace

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapC = Eigen::Map<const RowMat<T>>;
template <typename T>
using Map = Eigen::Map<RowMat<T>>;

// Eigen's product kernels partition the output only, so every element is
// reduced in the same order regardless of thread count.
template <typename T>
void linear_forward(const T* x, const T* w, const T* b, T* y, Index M, Index K, Index N) {
  Map<T> Y(y, M, N);
  Y.noalias() = MapC<T>(x, M, K) * MapC<T>(w, N, K).transpose();
  if (b) Y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b, N);
}

template <typename T>
void linear_backward_input(const T* dy, const T* w, T* dx, Index M, Index K, Index N) {
  Map<T>(dx, M, K).noalias() += MapC<T>(dy, M, N) * MapC<T>(w, N, K);
}

template <typename T>
void linear_backward_params(const T* dy, const T* x, T* dw, T* db, Index M, Index K, Index N) {
  MapC<T> DY(dy, M, N);
  Map<T>(dw, N, K).noalias() += DY.transpose() * MapC<T>(x, M, K);
  if (db) {
    for (Index m = 0; m < M; ++m) axpy(T(1), dy + m * N, db, N);
  }
}

template <typename T>
void attention_window(const T* __restrict qkv, const T* __restrict brow, const T* __restrict mrow, T* __restrict out,
                      T* __restrict P, const AttentionShape& s, Index w, Index h, T scale) {
  const Index N = s.tokens, dh = s.head_dim, D = s.heads * dh;
  for (Index i = 0; i < N; ++i) {
    const T* q = qkv + qkv_offset(s, w, i, 0, h);
    T* p = P + i * N;
    T mx = -std::numeric_limits<T>::infinity();
    for (Index j = 0; j < N; ++j) {
      T v = scale * dot(q, qkv + qkv_offset(s, w, j, 1, h), dh);
      if (brow) v += brow[i * N + j];
      if (mrow) v += mrow[i * N + j];
      p[j] = v;
      mx = std::max(mx, v);
    }
    T sum = T(0);
    for (Index j = 0; j < N; ++j) {
      p[j] = std::exp(p[j] - mx);
      sum += p[j];
    }
    const T inv = T(1) / sum;
    T* o = out + (w * N + i) * D + h * dh;
    std::fill(o, o + dh, T(0));
    for (Index j = 0; j < N; ++j) {
      p[j] *= inv;
      axpy(p[j], qkv + qkv_offset(s, w, j, 2, h), o, dh);
    }
  }
}

template <typename T>
void attention_forward(const T* qkv, const T* bias, const T* mask, T* out, T* probs, const AttentionShape& s,
                       T scale) {
  const Index N = s.tokens, H = s.heads;
  count_attention(s);
#pragma omp parallel for collapse(2) schedule(static)
  for (Index w = 0; w < s.windows; ++w)
    for (Index h = 0; h < H; ++h)
      attention_window(qkv, bias ? bias + h * N * N : nullptr, mask ? mask + (w % s.mask_period) * N * N : nullptr, out,
                       probs + (w * H + h) * N * N, s, w, h, scale);
}

template <typename T>
void attention_backward(const T* qkv, const T* probs, const T* dout, T* dqkv, T* dbias, const AttentionShape& s,
                        T scale) {
  const Index N = s.tokens, H = s.heads, dh = s.head_dim, D = H * dh;
  std::vector<T> dscores;
  if (dbias) dscores.assign(static_cast<std::size_t>(s.windows * H * N * N), T(0));
#pragma omp parallel
  {
    std::vector<T> dp(static_cast<std::size_t>(N));
#pragma omp for collapse(2) schedule(static)
    for (Index w = 0; w < s.windows; ++w) {
      for (Index h = 0; h < H; ++h) {
        const T* P = probs + (w * H + h) * N * N;
        for (Index i = 0; i < N; ++i) {
          const T* go = dout + (w * N + i) * D + h * dh;
          const T* p = P + i * N;
          T rowdot = T(0);
          for (Index j = 0; j < N; ++j) {
            dp[j] = dot(go, qkv + qkv_offset(s, w, j, 2, h), dh);
            rowdot += p[j] * dp[j];
            axpy(p[j], go, dqkv + qkv_offset(s, w, j, 2, h), dh);
          }
          const T* q = qkv + qkv_offset(s, w, i, 0, h);
          T* dq = dqkv + qkv_offset(s, w, i, 0, h);
          for (Index j = 0; j < N; ++j) {
            const T ds = p[j] * (dp[j] - rowdot);
            if (dbias) dscores[static_cast<std::size_t>(((w * H + h) * N + i) * N + j)] = ds;
            axpy(scale * ds, qkv + qkv_offset(s, w, j, 1, h), dq, dh);
            axpy(scale * ds, q, dqkv + qkv_offset(s, w, j, 1, h), dh);
          }
        }
      }
    }
  }
  if (dbias) {
#pragma omp parallel for schedule(static)
    for (Index hij = 0; hij < H * N * N; ++hij) {
      const Index h = hij / (N * N), ij = hij % (N * N);
      T acc = T(0);
      for (Index w = 0; w < s.windows; ++w) acc += dscores[static_cast<std::size_t>((w * H + h) * N * N + ij)];
      dbias[hij] += acc;
    }
  }
}

template <typename T>
void layer_norm_forward(const T* x, const T* gamma, const T* beta, T* y, T* xhat, T* rstd, Index rows, Index D,
                        T eps) {
#pragma omp parallel for schedule(static)
  for (Index r = 0; r < rows; ++r) {
    const T* xr = x + r * D;
    T mean = T(0);
    for (Index d = 0; d < D; ++d) mean += xr[d];
    mean /= static_cast<T>(D);
    T var = T(0);
    for (Index d = 0; d < D; ++d) var += (xr[d] - mean) * (xr[d] - mean);
    var /= static_cast<T>(D);
    const T rs = T(1) / std::sqrt(var + eps);
    rstd[r] = rs;
    T* hr = xhat + r * D;
    T* yr = y + r * D;
    for (Index d = 0; d < D; ++d) {
      hr[d] = (xr[d] - mean) * rs;
      yr[d] = hr[d] * gamma[d] + beta[d];
    }
  }
}

template <typename T>
void layer_norm_backward(const T* dy, const T* xhat, const T* rstd, const T* gamma, T* dx, T* dgamma, T* dbeta,
                         Index rows, Index D) {
  if (dx) {
#pragma omp parallel for schedule(static)
    for (Index r = 0; r < rows; ++r) {
      const T* g = dy + r * D;
      const T* hr = xhat + r * D;
      T m1 = T(0), m2 = T(0);
      for (Index d = 0; d < D; ++d) {
        const T gx = g[d] * gamma[d];
        m1 += gx;
        m2 += gx * hr[d];
      }
      m1 /= static_cast<T>(D);
      m2 /= static_cast<T>(D);
      T* dxr = dx + r * D;
      for (Index d = 0; d < D; ++d) dxr[d] += rstd[r] * (g[d] * gamma[d] - m1 - hr[d] * m2);
    }
  }
  if (dgamma || dbeta) {
#pragma omp parallel for schedule(static)
    for (Index d = 0; d < D; ++d) {
      T sg = T(0), sb = T(0);
      for (Index r = 0; r < rows; ++r) {
        sg += dy[r * D + d] * xhat[r * D + d];
        sb += dy[r * D + d];
      }
      if (dgamma) dgamma[d] += sg;
      if (dbeta) dbeta[d] += sb;
    }
  }
}

template <typename T>
void gather(const T* x, const std::int64_t* idx, T* out, Index n) {
#pragma omp parallel for schedule(static)
  for (Index i = 0; i < n; ++i) out[i] = idx[i] < 0 ? T(0) : x[idx[i]];
}

template <>
void gelu_forward<double>(const double* x, double* y, double* dydx, Index n) {
#pragma omp parallel for schedule(static)
  for (Index i = 0; i < n; ++i) gelu_exact(x[i], y[i], dydx[i]);
}

template <>
void gelu_forward<float>(const float* x, float* y, float* dydx, Index n) {
#pragma omp parallel for simd schedule(static)
  for (Index i = 0; i < n; ++i) {
    // erf by Abramowitz-Stegun 7.1.26, |error| < 1.5e-7
    const float u = x[i];
    const float z = std::abs(u) * static_cast<float>(kInvSqrt2);
    const float t = 1.0f / (1.0f + 0.3275911f * z);
    const float poly =
        t * (0.254829592f + t * (-0.284496736f + t * (1.421413741f + t * (-1.453152027f + t * 1.061405429f))));
    const float e = exp_approx(-z * z);
    const float erf_abs = 1.0f - poly * e;
    const float cdf = 0.5f * (1.0f + (u < 0.0f ? -erf_abs : erf_abs));
    y[i] = u * cdf;
    dydx[i] = cdf + u * static_cast<float>(kInvSqrt2Pi) * e;
  }
}

namespace serial {

template <typename T>
void linear_forward(const T* x, const T* w, const T* b, T* y, Index M, Index K, Index N) {
  for (Index m = 0; m < M; ++m) {
    for (Index n = 0; n < N; ++n) {
      T acc = b ? b[n] : T(0);
      for (Index k = 0; k < K; ++k) acc += x[m * K + k] * w[n * K + k];
      y[m * N + n] = acc;
    }
  }
}

template <typename T>
void linear_backward_input(const T* dy, const T* w, T* dx, Index M, Index K, Index N) {
  for (Index m = 0; m < M; ++m)
    for (Index k = 0; k < K; ++k) {
      T acc = T(0);
      for (Index n = 0; n < N; ++n) acc += dy[m * N + n] * w[n * K + k];
      dx[m * K + k] += acc;
    }
}

template <typename T>
void linear_backward_params(const T* dy, const T* x, T* dw, T* db, Index M, Index K, Index N) {
  for (Index n = 0; n < N; ++n) {
    for (Index k = 0; k < K; ++k) {
      T acc = T(0);
      for (Index m = 0; m < M; ++m) acc += dy[m * N + n] * x[m * K + k];
      dw[n * K + k] += acc;
    }
    if (db) {
      T acc = T(0);
      for (Index m = 0; m < M; ++m) acc += dy[m * N + n];
      db[n] += acc;
    }
  }
}

template <typename T>
void attention_forward(const T* qkv, const T* bias, const T* mask, T* out, T* probs, const AttentionShape& s,
                       T scale) {
  const Index N = s.tokens, H = s.heads, dh = s.head_dim, D = H * dh;
  count_attention(s);
  std::vector<T> scores(static_cast<std::size_t>(N));
  for (Index w = 0; w < s.windows; ++w) {
    for (Index h = 0; h < H; ++h) {
      for (Index i = 0; i < N; ++i) {
        for (Index j = 0; j < N; ++j) {
          T acc = T(0);
          for (Index d = 0; d < dh; ++d) {
            acc += qkv[qkv_offset(s, w, i, 0, h) + d] * qkv[qkv_offset(s, w, j, 1, h) + d];
          }
          acc *= scale;
          if (bias) acc += bias[(h * N + i) * N + j];
          if (mask) acc += mask[((w % s.mask_period) * N + i) * N + j];
          scores[static_cast<std::size_t>(j)] = acc;
        }
        const T mx = *std::max_element(scores.begin(), scores.end());
        T sum = T(0);
        for (auto& v : scores) {
          v = std::exp(v - mx);
          sum += v;
        }
        for (Index j = 0; j < N; ++j) {
          probs[((w * H + h) * N + i) * N + j] = scores[static_cast<std::size_t>(j)] / sum;
        }
        for (Index d = 0; d < dh; ++d) {
          T acc = T(0);
          for (Index j = 0; j < N; ++j) {
            acc += probs[((w * H + h) * N + i) * N + j] * qkv[qkv_offset(s, w, j, 2, h) + d];
          }
          out[(w * N + i) * D + h * dh + d] = acc;
        }
      }
    }
  }
}

template <typename T>
void attention_backward(const T* qkv, const T* probs, const T* dout, T* dqkv, T* dbias, const AttentionShape& s,
                        T scale) {
  const Index N = s.tokens, H = s.heads, dh = s.head_dim, D = H * dh;
  std::vector<T> dp(static_cast<std::size_t>(N));
  for (Index w = 0; w < s.windows; ++w) {
    for (Index h = 0; h < H; ++h) {
      for (Index i = 0; i < N; ++i) {
        const T* p = probs + ((w * H + h) * N + i) * N;
        for (Index j = 0; j < N; ++j) {
          T acc = T(0);
          for (Index d = 0; d < dh; ++d) {
            const T go = dout[(w * N + i) * D + h * dh + d];
            acc += go * qkv[qkv_offset(s, w, j, 2, h) + d];
            dqkv[qkv_offset(s, w, j, 2, h) + d] += p[j] * go;
          }
          dp[static_cast<std::size_t>(j)] = acc;
        }
        T rowdot = T(0);
        for (Index j = 0; j < N; ++j) rowdot += p[j] * dp[static_cast<std::size_t>(j)];
        for (Index j = 0; j < N; ++j) {
          const T ds = p[j] * (dp[static_cast<std::size_t>(j)] - rowdot);
          if (dbias) dbias[(h * N + i) * N + j] += ds;
          for (Index d = 0; d < dh; ++d) {
            dqkv[qkv_offset(s, w, i, 0, h) + d] += scale * ds * qkv[qkv_offset(s, w, j, 1, h) + d];
            dqkv[qkv_offset(s, w, j, 1, h) + d] += scale * ds * qkv[qkv_offset(s, w, i, 0, h) + d];
          }
        }
      }
    }
  }
}

template <typename T>
void layer_norm_forward(const T* x, const T* gamma, const T* beta, T* y, T* xhat, T* rstd, Index rows, Index D,
                        T eps) {
  for (Index r = 0; r < rows; ++r) {
    T mean = T(0);
    for (Index d = 0; d < D; ++d) mean += x[r * D + d];
    mean /= static_cast<T>(D);
    T var = T(0);
    for (Index d = 0; d < D; ++d) var += (x[r * D + d] - mean) * (x[r * D + d] - mean);
    var /= static_cast<T>(D);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (Index d = 0; d < D; ++d) {
      xhat[r * D + d] = (x[r * D + d] - mean) * rstd[r];
      y[r * D + d] = xhat[r * D + d] * gamma[d] + beta[d];
    }
  }
}

template <typename T>
void gather(const T* x, const std::int64_t* idx, T* out, Index n) {
  for (Index i = 0; i < n; ++i) out[i] = idx[i] < 0 ? T(0) : x[idx[i]];
}

template <typename T>
void gelu_forward(const T* x, T* y, T* dydx, Index n) {
  for (Index i = 0; i < n; ++i) gelu_exact(x[i], y[i], dydx[i]);
}

}  // namespace serial

}  // namespace rsfm::kernels

using rsfm::Index;
using rsfm::kernels::AttentionShape;

#define RSFM_INSTANTIATE_KERNELS(NS, T)                                                                      \
  template void NS::linear_forward<T>(const T*, const T*, const T*, T*, Index, Index, Index);               \
  template void NS::linear_backward_input<T>(const T*, const T*, T*, Index, Index, Index);                  \
  template void NS::linear_backward_params<T>(const T*, const T*, T*, T*, Index, Index, Index);             \
  template void NS::attention_forward<T>(const T*, const T*, const T*, T*, T*, const AttentionShape&, T);   \
  template void NS::attention_backward<T>(const T*, const T*, const T*, T*, T*, const AttentionShape&, T);  \
  template void NS::layer_norm_forward<T>(const T*, const T*, const T*, T*, T*, T*, Index, Index, T);       \
  template void NS::gather<T>(const T*, const std::int64_t*, T*, Index);

RSFM_INSTANTIATE_KERNELS(rsfm::kernels, float)
RSFM_INSTANTIATE_KERNELS(rsfm::kernels, double)
RSFM_INSTANTIATE_KERNELS(rsfm::kernels::serial, float)
RSFM_INSTANTIATE_KERNELS(rsfm::kernels::serial, double)
template void rsfm::kernels::serial::gelu_forward<float>(const float*, float*, float*, Index);
template void rsfm::kernels::serial::gelu_forward<double>(const double*, double*, double*, Index);
template void rsfm::kernels::layer_norm_backward<float>(const float*, const float*, const float*, const float*,
                                                        float*, float*, float*, Index, Index);
template void rsfm::kernels::layer_norm_backward<double>(const double*, const double*, const double*,
                                                         const double*, double*, double*, double*, Index, Index);
