#pragma once

// Dense compute kernels. The top-level namespace holds the OpenMP-parallel
// versions used by the autograd ops; `serial` holds straightforward
// reference loops kept for testing and benchmarking.
//
// Parallel kernels partition outputs across threads and never reduce across
// threads, so their results do not depend on the thread count.

#include <atomic>
#include <cstdint>

#include "rsfm/tensor.hpp"

namespace rsfm::kernels {

// Multi-head attention over independent token groups ("windows").
//   qkv   [windows, tokens, 3, heads, head_dim]
//   bias  [heads, tokens, tokens] additive, optional
//   mask  [mask_period, tokens, tokens] additive, window w uses w % mask_period, optional
//   out   [windows, tokens, heads * head_dim]
//   probs [windows, heads, tokens, tokens] softmax output, kept for backward
struct AttentionShape {
  Index windows = 0;
  Index tokens = 0;
  Index heads = 0;
  Index head_dim = 0;
  Index mask_period = 1;
};

// Attention FLOPs (QK^T plus PV, multiply-adds counted as 2) accumulated by
// attention_forward while counting is enabled.
struct FlopCounter {
  std::atomic<bool> enabled{false};
  std::atomic<std::uint64_t> attention_flops{0};
  void reset() { attention_flops = 0; }
};
FlopCounter& flop_counter();

// y[m,n] = sum_k x[m,k] w[n,k] + b[n]; b may be null.
template <typename T>
void linear_forward(const T* x, const T* w, const T* b, T* y, Index M, Index K, Index N);
// dx[m,k] += sum_n dy[m,n] w[n,k]
template <typename T>
void linear_backward_input(const T* dy, const T* w, T* dx, Index M, Index K, Index N);
// dw[n,k] += sum_m dy[m,n] x[m,k];  db[n] += sum_m dy[m,n] (db may be null)
template <typename T>
void linear_backward_params(const T* dy, const T* x, T* dw, T* db, Index M, Index K, Index N);

template <typename T>
void attention_forward(const T* qkv, const T* bias, const T* mask, T* out, T* probs, const AttentionShape& s,
                       T scale);
// dqkv accumulates; dbias [heads, tokens, tokens] accumulates when non-null.
template <typename T>
void attention_backward(const T* qkv, const T* probs, const T* dout, T* dqkv, T* dbias, const AttentionShape& s,
                        T scale);

// Row-wise layer norm over the last axis of a [rows, D] buffer.
template <typename T>
void layer_norm_forward(const T* x, const T* gamma, const T* beta, T* y, T* xhat, T* rstd, Index rows, Index D,
                        T eps);
// dx accumulates; dgamma/dbeta accumulate.
template <typename T>
void layer_norm_backward(const T* dy, const T* xhat, const T* rstd, const T* gamma, T* dx, T* dgamma, T* dbeta,
                         Index rows, Index D);

// out[i] = idx[i] < 0 ? 0 : x[idx[i]]
template <typename T>
void gather(const T* x, const std::int64_t* idx, T* out, Index n);

// y = x * Phi(x) and its derivative. The float version uses a polynomial
// erf/exp pair accurate to a few ulp of float.
template <typename T>
void gelu_forward(const T* x, T* y, T* dydx, Index n);

namespace serial {

template <typename T>
void linear_forward(const T* x, const T* w, const T* b, T* y, Index M, Index K, Index N);
template <typename T>
void linear_backward_input(const T* dy, const T* w, T* dx, Index M, Index K, Index N);
template <typename T>
void linear_backward_params(const T* dy, const T* x, T* dw, T* db, Index M, Index K, Index N);
template <typename T>
void attention_forward(const T* qkv, const T* bias, const T* mask, T* out, T* probs, const AttentionShape& s,
                       T scale);
template <typename T>
void attention_backward(const T* qkv, const T* probs, const T* dout, T* dqkv, T* dbias, const AttentionShape& s,
                        T scale);
template <typename T>
void layer_norm_forward(const T* x, const T* gamma, const T* beta, T* y, T* xhat, T* rstd, Index rows, Index D,
                        T eps);
template <typename T>
void gather(const T* x, const std::int64_t* idx, T* out, Index n);
template <typename T>
void gelu_forward(const T* x, T* y, T* dydx, Index n);

}  // namespace serial

}  // namespace rsfm::kernels
