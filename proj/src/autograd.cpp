#include "rsfm/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <unordered_set>

namespace rsfm {

namespace {
thread_local bool g_no_grad = false;

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}
}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_no_grad) { g_no_grad = true; }
NoGradGuard::~NoGradGuard() { g_no_grad = previous_; }
bool NoGradGuard::active() { return g_no_grad; }

template <typename T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> parents, std::function<void(Node<T>&)> backward_fn) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  bool needs = false;
  if (!g_no_grad) {
    for (const auto& p : parents) needs = needs || p.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (const auto& p : parents) node->parents.push_back(p.node());
    node->backward_fn = std::move(backward_fn);
  }
  return Var<T>(std::move(node));
}

template <typename T>
void Var<T>::backward() const {
  if (size() != 1) throw ShapeError("backward() without seed requires a scalar, got " + shape_str(shape()));
  backward(Tensor<T>(shape(), T(1)));
}

template <typename T>
void Var<T>::backward(const Tensor<T>& seed) const {
  require_same_shape(seed.shape(), shape(), "backward");
  if (!requires_grad()) return;
  // Iterative post-order DFS; reversed order is a valid topological order.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node<T>* p = n->parents[next++].get();
      if (p && p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  auto& g = node_->ensure_grad();
  for (Index i = 0; i < g.size(); ++i) g[i] += seed[i];
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && n->grad.size() == n->value.size()) n->backward_fn(*n);
  }
  // Intermediate gradients are not needed after the pass.
  for (Node<T>* n : order) {
    if (n->backward_fn) n->grad = Tensor<T>();
  }
}

namespace ag {

namespace {
template <typename T>
Node<T>& pnode(Node<T>& n, std::size_t i) {
  return *n.parents[i];
}
template <typename T>
bool wants(Node<T>& n, std::size_t i) {
  return i < n.parents.size() && n.parents[i]->requires_grad;
}
}  // namespace

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  const Index K = weight.dim(1), N = weight.dim(0);
  if (x.dim(-1) != K) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
  }
  if (bias.defined() && bias.size() != N) throw ShapeError("linear: bias size mismatch");
  const Index M = x.size() / K;
  Shape out_shape = x.shape();
  out_shape.back() = N;
  Tensor<T> y(out_shape);
  kernels::linear_forward(x.value().data(), weight.value().data(), bias.defined() ? bias.value().data() : nullptr,
                          y.data(), M, K, N);
  std::vector<Var<T>> parents{x, weight};
  if (bias.defined()) parents.push_back(bias);
  return make_op<T>(std::move(y), parents, [M, K, N](Node<T>& n) {
    const T* dy = n.grad.data();
    if (wants(n, 0)) {
      kernels::linear_backward_input(dy, pnode(n, 1).value.data(), pnode(n, 0).ensure_grad().data(), M, K, N);
    }
    const bool wb = wants(n, 2);
    if (wants(n, 1) || wb) {
      // dW is always produced when db is; weights are cheap relative to activations.
      auto& dw = pnode(n, 1).ensure_grad();
      kernels::linear_backward_params(dy, pnode(n, 0).value.data(), dw.data(),
                                      wb ? pnode(n, 2).ensure_grad().data() : nullptr, M, K, N);
    }
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> y(a.shape());
  const T* pa = a.value().data();
  const T* pb = b.value().data();
  const Index n = y.size();
#pragma omp parallel for schedule(static)
  for (Index i = 0; i < n; ++i) y[i] = pa[i] + pb[i];
  return make_op<T>(std::move(y), {a, b}, [](Node<T>& nd) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (!wants(nd, k)) continue;
      auto& g = pnode(nd, k).ensure_grad();
      for (Index i = 0; i < g.size(); ++i) g[i] += nd.grad[i];
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> y(a.shape());
  for (Index i = 0; i < y.size(); ++i) y[i] = a.value()[i] - b.value()[i];
  return make_op<T>(std::move(y), {a, b}, [](Node<T>& nd) {
    if (wants(nd, 0)) {
      auto& g = pnode(nd, 0).ensure_grad();
      for (Index i = 0; i < g.size(); ++i) g[i] += nd.grad[i];
    }
    if (wants(nd, 1)) {
      auto& g = pnode(nd, 1).ensure_grad();
      for (Index i = 0; i < g.size(); ++i) g[i] -= nd.grad[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> y(a.shape());
  const T* pa = a.value().data();
  const T* pb = b.value().data();
  const Index n = y.size();
#pragma omp parallel for schedule(static)
  for (Index i = 0; i < n; ++i) y[i] = pa[i] * pb[i];
  return make_op<T>(std::move(y), {a, b}, [](Node<T>& nd) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (!wants(nd, k)) continue;
      auto& g = pnode(nd, k).ensure_grad();
      const auto& other = pnode(nd, 1 - k).value;
      for (Index i = 0; i < g.size(); ++i) g[i] += nd.grad[i] * other[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> y(a.shape());
  for (Index i = 0; i < y.size(); ++i) y[i] = a.value()[i] * s;
  return make_op<T>(std::move(y), {a}, [s](Node<T>& nd) {
    auto& g = pnode(nd, 0).ensure_grad();
    for (Index i = 0; i < g.size(); ++i) g[i] += nd.grad[i] * s;
  });
}

template <typename T>
Var<T> abs_diff(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "abs_diff");
  Tensor<T> y(a.shape());
  for (Index i = 0; i < y.size(); ++i) y[i] = std::abs(a.value()[i] - b.value()[i]);
  return make_op<T>(std::move(y), {a, b}, [](Node<T>& nd) {
    const auto& va = pnode(nd, 0).value;
    const auto& vb = pnode(nd, 1).value;
    for (std::size_t k = 0; k < 2; ++k) {
      if (!wants(nd, k)) continue;
      auto& g = pnode(nd, k).ensure_grad();
      const T sign = k == 0 ? T(1) : T(-1);
      for (Index i = 0; i < g.size(); ++i) {
        const T d = va[i] - vb[i];
        const T s = d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0));
        g[i] += sign * s * nd.grad[i];
      }
    }
  });
}

template <typename T>
Var<T> gelu(const Var<T>& x) {
  Tensor<T> y(x.shape());
  auto deriv = std::make_shared<Tensor<T>>(x.shape());
  kernels::gelu_forward(x.value().data(), y.data(), deriv->data(), y.size());
  return make_op<T>(std::move(y), {x}, [deriv](Node<T>& nd) {
    auto& g = pnode(nd, 0).ensure_grad();
    const T* d = deriv->data();
    const Index n = g.size();
#pragma omp parallel for simd schedule(static)
    for (Index i = 0; i < n; ++i) g[i] += nd.grad[i] * d[i];
  });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  const Index D = x.dim(-1);
  if (gamma.size() != D || beta.size() != D) throw ShapeError("layer_norm: affine size mismatch");
  const Index rows = x.size() / D;
  Tensor<T> y(x.shape());
  auto xhat = std::make_shared<Tensor<T>>(x.shape());
  auto rstd = std::make_shared<Tensor<T>>(Shape{rows});
  kernels::layer_norm_forward(x.value().data(), gamma.value().data(), beta.value().data(), y.data(), xhat->data(),
                              rstd->data(), rows, D, eps);
  return make_op<T>(std::move(y), {x, gamma, beta}, [xhat, rstd, rows, D](Node<T>& nd) {
    kernels::layer_norm_backward(nd.grad.data(), xhat->data(), rstd->data(), pnode(nd, 1).value.data(),
                                 wants(nd, 0) ? pnode(nd, 0).ensure_grad().data() : nullptr,
                                 wants(nd, 1) ? pnode(nd, 1).ensure_grad().data() : nullptr,
                                 wants(nd, 2) ? pnode(nd, 2).ensure_grad().data() : nullptr, rows, D);
  });
}

template <typename T>
Var<T> gather(const Var<T>& x, std::shared_ptr<const std::vector<std::int64_t>> idx, Shape out_shape) {
  const Index n = numel(out_shape);
  if (static_cast<Index>(idx->size()) != n) throw ShapeError("gather: index size does not match output shape");
  Tensor<T> y(std::move(out_shape));
  kernels::gather(x.value().data(), idx->data(), y.data(), n);
  return make_op<T>(std::move(y), {x}, [idx](Node<T>& nd) {
    auto& g = pnode(nd, 0).ensure_grad();
    const auto& ix = *idx;
    for (std::size_t i = 0; i < ix.size(); ++i) {
      if (ix[i] >= 0) g[ix[i]] += nd.grad[static_cast<Index>(i)];
    }
  });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> y = x.value().reshaped(std::move(shape));
  return make_op<T>(std::move(y), {x}, [](Node<T>& nd) {
    auto& g = pnode(nd, 0).ensure_grad();
    for (Index i = 0; i < g.size(); ++i) g[i] += nd.grad[i];
  });
}

template <typename T>
Var<T> concat_last(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_last: no inputs");
  Shape lead = parts[0].shape();
  lead.pop_back();
  const Index rows = numel(lead);
  std::vector<Index> widths;
  Index total = 0;
  for (const auto& p : parts) {
    Shape l = p.shape();
    l.pop_back();
    if (l != lead) throw ShapeError("concat_last: leading shapes differ");
    widths.push_back(p.dim(-1));
    total += p.dim(-1);
  }
  Shape out_shape = lead;
  out_shape.push_back(total);
  Tensor<T> y(out_shape);
  Index off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const T* src = parts[k].value().data();
    for (Index r = 0; r < rows; ++r) {
      std::copy(src + r * widths[k], src + (r + 1) * widths[k], y.data() + r * total + off);
    }
    off += widths[k];
  }
  return make_op<T>(std::move(y), parts, [widths, rows, total](Node<T>& nd) {
    Index o = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      if (wants(nd, k)) {
        auto& g = pnode(nd, k).ensure_grad();
        for (Index r = 0; r < rows; ++r) {
          for (Index c = 0; c < widths[k]; ++c) g[r * widths[k] + c] += nd.grad[r * total + o + c];
        }
      }
      o += widths[k];
    }
  });
}

template <typename T>
Var<T> mean_middle(const Var<T>& x, Index outer, Index group, Index inner, Shape out_shape) {
  if (outer * group * inner != x.size() || numel(out_shape) != outer * inner) {
    throw ShapeError("mean_middle: inconsistent sizes for " + shape_str(x.shape()));
  }
  Tensor<T> y(std::move(out_shape));
  const T inv = T(1) / static_cast<T>(group);
  const T* px = x.value().data();
  for (Index o = 0; o < outer; ++o) {
    for (Index gi = 0; gi < group; ++gi) {
      const T* src = px + (o * group + gi) * inner;
      T* dst = y.data() + o * inner;
      for (Index i = 0; i < inner; ++i) dst[i] += src[i];
    }
    for (Index i = 0; i < inner; ++i) y[o * inner + i] *= inv;
  }
  return make_op<T>(std::move(y), {x}, [outer, group, inner, inv](Node<T>& nd) {
    auto& g = pnode(nd, 0).ensure_grad();
    for (Index o = 0; o < outer; ++o)
      for (Index gi = 0; gi < group; ++gi)
        for (Index i = 0; i < inner; ++i) g[(o * group + gi) * inner + i] += nd.grad[o * inner + i] * inv;
  });
}

namespace {
struct Tap {
  Index i0, i1;
  double w0, w1;
};
// Half-pixel-centre linear interpolation taps (align_corners = false).
std::vector<Tap> linear_taps(Index in, Index out) {
  std::vector<Tap> taps(static_cast<std::size_t>(out));
  const double s = static_cast<double>(in) / static_cast<double>(out);
  for (Index o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * s - 0.5;
    if (src < 0) src = 0;
    Index i0 = static_cast<Index>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const Index i1 = std::min(i0 + 1, in - 1);
    const double f = src - static_cast<double>(i0);
    taps[static_cast<std::size_t>(o)] = {i0, i1, 1.0 - f, f};
  }
  return taps;
}
}  // namespace

template <typename T>
Var<T> resize_bilinear(const Var<T>& x, Index out_h, Index out_w) {
  if (x.shape().size() != 4) throw ShapeError("resize_bilinear expects [N,h,w,D]");
  const Index N = x.dim(0), h = x.dim(1), w = x.dim(2), D = x.dim(3);
  auto ty = linear_taps(h, out_h);
  auto tx = linear_taps(w, out_w);
  Tensor<T> y(Shape{N, out_h, out_w, D});
  const T* px = x.value().data();
#pragma omp parallel for collapse(2) schedule(static)
  for (Index n = 0; n < N; ++n) {
    for (Index oy = 0; oy < out_h; ++oy) {
      const Tap& a = ty[static_cast<std::size_t>(oy)];
      for (Index ox = 0; ox < out_w; ++ox) {
        const Tap& b = tx[static_cast<std::size_t>(ox)];
        T* dst = y.data() + ((n * out_h + oy) * out_w + ox) * D;
        const T w00 = static_cast<T>(a.w0 * b.w0), w01 = static_cast<T>(a.w0 * b.w1);
        const T w10 = static_cast<T>(a.w1 * b.w0), w11 = static_cast<T>(a.w1 * b.w1);
        const T* s00 = px + ((n * h + a.i0) * w + b.i0) * D;
        const T* s01 = px + ((n * h + a.i0) * w + b.i1) * D;
        const T* s10 = px + ((n * h + a.i1) * w + b.i0) * D;
        const T* s11 = px + ((n * h + a.i1) * w + b.i1) * D;
        for (Index d = 0; d < D; ++d) dst[d] = w00 * s00[d] + w01 * s01[d] + w10 * s10[d] + w11 * s11[d];
      }
    }
  }
  return make_op<T>(std::move(y), {x}, [ty, tx, N, h, w, D, out_h, out_w](Node<T>& nd) {
    auto& g = pnode(nd, 0).ensure_grad();
    for (Index n = 0; n < N; ++n)
      for (Index oy = 0; oy < out_h; ++oy) {
        const Tap& a = ty[static_cast<std::size_t>(oy)];
        for (Index ox = 0; ox < out_w; ++ox) {
          const Tap& b = tx[static_cast<std::size_t>(ox)];
          const T* src = nd.grad.data() + ((n * out_h + oy) * out_w + ox) * D;
          T* g00 = g.data() + ((n * h + a.i0) * w + b.i0) * D;
          T* g01 = g.data() + ((n * h + a.i0) * w + b.i1) * D;
          T* g10 = g.data() + ((n * h + a.i1) * w + b.i0) * D;
          T* g11 = g.data() + ((n * h + a.i1) * w + b.i1) * D;
          const T w00 = static_cast<T>(a.w0 * b.w0), w01 = static_cast<T>(a.w0 * b.w1);
          const T w10 = static_cast<T>(a.w1 * b.w0), w11 = static_cast<T>(a.w1 * b.w1);
          for (Index d = 0; d < D; ++d) {
            g00[d] += w00 * src[d];
            g01[d] += w01 * src[d];
            g10[d] += w10 * src[d];
            g11[d] += w11 * src[d];
          }
        }
      }
  });
}

template <typename T>
Var<T> fill_masked_rows(const Var<T>& x, const std::vector<std::uint8_t>& masked, const Var<T>& token) {
  const Index D = x.dim(-1);
  const Index rows = x.size() / D;
  if (static_cast<Index>(masked.size()) != rows || token.size() != D) {
    throw ShapeError("fill_masked_rows: mask/token size mismatch");
  }
  Tensor<T> y = x.value();
  for (Index r = 0; r < rows; ++r) {
    if (masked[static_cast<std::size_t>(r)]) std::copy_n(token.value().data(), D, y.data() + r * D);
  }
  return make_op<T>(std::move(y), {x, token}, [masked, rows, D](Node<T>& nd) {
    if (wants(nd, 0)) {
      auto& g = pnode(nd, 0).ensure_grad();
      for (Index r = 0; r < rows; ++r) {
        if (masked[static_cast<std::size_t>(r)]) continue;
        for (Index d = 0; d < D; ++d) g[r * D + d] += nd.grad[r * D + d];
      }
    }
    if (wants(nd, 1)) {
      auto& g = pnode(nd, 1).ensure_grad();
      for (Index r = 0; r < rows; ++r) {
        if (!masked[static_cast<std::size_t>(r)]) continue;
        for (Index d = 0; d < D; ++d) g[d] += nd.grad[r * D + d];
      }
    }
  });
}

template <typename T>
Var<T> attention(const Var<T>& qkv, const Var<T>& bias, const Tensor<T>& mask, const kernels::AttentionShape& s) {
  const Index D = s.heads * s.head_dim;
  if (qkv.size() != s.windows * s.tokens * 3 * D) {
    throw ShapeError("attention: qkv " + shape_str(qkv.shape()) + " does not match window layout");
  }
  if (bias.defined() && bias.size() != s.heads * s.tokens * s.tokens) throw ShapeError("attention: bias size");
  if (!mask.empty() && mask.size() != s.mask_period * s.tokens * s.tokens) throw ShapeError("attention: mask size");
  const T scale = T(1) / std::sqrt(static_cast<T>(s.head_dim));
  Tensor<T> out(Shape{s.windows, s.tokens, D});
  auto probs = std::make_shared<Tensor<T>>(Shape{s.windows, s.heads, s.tokens, s.tokens});
  kernels::attention_forward(qkv.value().data(), bias.defined() ? bias.value().data() : nullptr,
                             mask.empty() ? nullptr : mask.data(), out.data(), probs->data(), s, scale);
  std::vector<Var<T>> parents{qkv};
  if (bias.defined()) parents.push_back(bias);
  return make_op<T>(std::move(out), parents, [probs, s, scale](Node<T>& nd) {
    // dqkv must exist even if only the bias wants a gradient.
    Tensor<T> scratch;
    T* dqkv = nullptr;
    if (wants(nd, 0)) {
      dqkv = pnode(nd, 0).ensure_grad().data();
    } else {
      scratch = Tensor<T>(pnode(nd, 0).value.shape());
      dqkv = scratch.data();
    }
    T* dbias = wants(nd, 1) ? pnode(nd, 1).ensure_grad().data() : nullptr;
    kernels::attention_backward(pnode(nd, 0).value.data(), probs->data(), nd.grad.data(), dqkv, dbias, s, scale);
  });
}

template <typename T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<std::int32_t>& labels, const std::vector<T>& weights) {
  if (logits.shape().size() != 3) throw ShapeError("cross_entropy expects logits [B,K,S]");
  const Index B = logits.dim(0), K = logits.dim(1), S = logits.dim(2);
  if (static_cast<Index>(labels.size()) != B * S) throw ShapeError("cross_entropy: label count mismatch");
  if (!weights.empty() && static_cast<Index>(weights.size()) != K) throw ShapeError("cross_entropy: weight count");
  auto probs = std::make_shared<Tensor<T>>(logits.shape());
  const T* z = logits.value().data();
  T loss = T(0), wsum = T(0);
  for (Index b = 0; b < B; ++b) {
    for (Index s = 0; s < S; ++s) {
      T mx = -std::numeric_limits<T>::infinity();
      for (Index k = 0; k < K; ++k) mx = std::max(mx, z[(b * K + k) * S + s]);
      T sum = T(0);
      for (Index k = 0; k < K; ++k) {
        const T e = std::exp(z[(b * K + k) * S + s] - mx);
        (*probs)[(b * K + k) * S + s] = e;
        sum += e;
      }
      for (Index k = 0; k < K; ++k) (*probs)[(b * K + k) * S + s] /= sum;
      const std::int32_t y = labels[static_cast<std::size_t>(b * S + s)];
      if (y < 0) continue;
      if (y >= K) throw std::out_of_range("cross_entropy: label out of range");
      const T wy = weights.empty() ? T(1) : weights[static_cast<std::size_t>(y)];
      loss -= wy * (z[(b * K + y) * S + s] - mx - std::log(sum));
      wsum += wy;
    }
  }
  const T norm = wsum > T(0) ? T(1) / wsum : T(0);
  Tensor<T> out(Shape{1}, loss * norm);
  return make_op<T>(std::move(out), {logits}, [probs, labels, weights, B, K, S, norm](Node<T>& nd) {
    auto& g = pnode(nd, 0).ensure_grad();
    const T go = nd.grad[0] * norm;
    for (Index b = 0; b < B; ++b)
      for (Index s = 0; s < S; ++s) {
        const std::int32_t y = labels[static_cast<std::size_t>(b * S + s)];
        if (y < 0) continue;
        const T wy = weights.empty() ? T(1) : weights[static_cast<std::size_t>(y)];
        for (Index k = 0; k < K; ++k) {
          const Index i = (b * K + k) * S + s;
          g[i] += go * wy * ((*probs)[i] - (k == y ? T(1) : T(0)));
        }
      }
  });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  T acc = T(0);
  for (Index i = 0; i < x.size(); ++i) acc += x.value()[i];
  return make_op<T>(Tensor<T>(Shape{1}, acc), {x}, [](Node<T>& nd) {
    auto& g = pnode(nd, 0).ensure_grad();
    for (Index i = 0; i < g.size(); ++i) g[i] += nd.grad[0];
  });
}

#define RSFM_INSTANTIATE_AG(T)                                                                                   \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                                         \
  template Var<T> add(const Var<T>&, const Var<T>&);                                                           \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                                           \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                                           \
  template Var<T> scale(const Var<T>&, T);                                                                     \
  template Var<T> abs_diff(const Var<T>&, const Var<T>&);                                                      \
  template Var<T> gelu(const Var<T>&);                                                                         \
  template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, T);                                  \
  template Var<T> gather(const Var<T>&, std::shared_ptr<const std::vector<std::int64_t>>, Shape);              \
  template Var<T> reshape(const Var<T>&, Shape);                                                               \
  template Var<T> concat_last(const std::vector<Var<T>>&);                                                     \
  template Var<T> mean_middle(const Var<T>&, Index, Index, Index, Shape);                                      \
  template Var<T> resize_bilinear(const Var<T>&, Index, Index);                                                \
  template Var<T> fill_masked_rows(const Var<T>&, const std::vector<std::uint8_t>&, const Var<T>&);            \
  template Var<T> attention(const Var<T>&, const Var<T>&, const Tensor<T>&, const kernels::AttentionShape&);   \
  template Var<T> cross_entropy(const Var<T>&, const std::vector<std::int32_t>&, const std::vector<T>&);        \
  template Var<T> sum(const Var<T>&);

RSFM_INSTANTIATE_AG(float)
RSFM_INSTANTIATE_AG(double)

}  // namespace ag

template class Var<float>;
template class Var<double>;
template Var<float> make_op(Tensor<float>, std::vector<Var<float>>, std::function<void(Node<float>&)>);
template Var<double> make_op(Tensor<double>, std::vector<Var<double>>, std::function<void(Node<double>&)>);

}  // namespace rsfm
