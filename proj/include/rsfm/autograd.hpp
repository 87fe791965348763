#pragma once

// Minimal tape-free reverse-mode autodiff over dense tensors. Each op
// records its parents and a closure that pushes the output gradient back.
// Scalar type is a template parameter: float for training, double for
// finite-difference verification.

#include <functional>
#include <memory>
#include <vector>

#include "rsfm/kernels.hpp"
#include "rsfm/tensor.hpp"

namespace rsfm {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Tensor<T>& ensure_grad() {
    if (grad.size() != value.size()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

// While alive, ops on this thread record no graph.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
  static bool active();

 private:
  bool previous_;
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  bool defined() const { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& value_mut() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  Index dim(int axis) const { return node_->value.dim(axis); }
  Index size() const { return node_->value.size(); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  const Tensor<T>& grad() const { return node_->grad; }
  Tensor<T>& grad_mut() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad = Tensor<T>(); }

  // Seeds d(this)/d(this) = 1 for scalars, or `seed` for tensors.
  void backward() const;
  void backward(const Tensor<T>& seed) const;

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Builds an op result. When no parent needs a gradient (or NoGradGuard is
// active) the closure is dropped and the result is a constant.
template <typename T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> parents, std::function<void(Node<T>&)> backward_fn);

namespace ag {

// y = x W^T + b over the last axis. W is [out, in]; b may be undefined.
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias);
template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> scale(const Var<T>& a, T s);
// |a - b| elementwise; subgradient 0 at equality.
template <typename T>
Var<T> abs_diff(const Var<T>& a, const Var<T>& b);
// Exact (erf) GELU.
template <typename T>
Var<T> gelu(const Var<T>& x);
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5));
// out[i] = x.flat[idx[i]], or 0 where idx[i] < 0. Backward scatter-adds.
template <typename T>
Var<T> gather(const Var<T>& x, std::shared_ptr<const std::vector<std::int64_t>> idx, Shape out_shape);
template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape);
// Concatenates along the last axis; all leading shapes must agree.
template <typename T>
Var<T> concat_last(const std::vector<Var<T>>& parts);
// [outer, group, inner] -> [outer, inner] mean over the middle axis.
template <typename T>
Var<T> mean_middle(const Var<T>& x, Index outer, Index group, Index inner, Shape out_shape);
// Bilinear resize with half-pixel centres. x is [N, h, w, D] -> [N, H, W, D].
template <typename T>
Var<T> resize_bilinear(const Var<T>& x, Index out_h, Index out_w);
// Rows flagged in `masked` are replaced by `token` ([D]); x is [rows, D].
template <typename T>
Var<T> fill_masked_rows(const Var<T>& x, const std::vector<std::uint8_t>& masked, const Var<T>& token);
// Windowed multi-head attention, see kernels::attention_forward for layouts.
// bias is [heads, tokens, tokens] (may be undefined); mask is a constant
// additive tensor [period, tokens, tokens] (may be empty).
template <typename T>
Var<T> attention(const Var<T>& qkv, const Var<T>& bias, const Tensor<T>& mask, const kernels::AttentionShape& shape);
// Mean cross entropy. logits [B, K, S], labels [B*S] in [0,K); weights
// per class (empty = uniform). Labels < 0 are ignored.
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<std::int32_t>& labels,
                     const std::vector<T>& class_weights = {});
template <typename T>
Var<T> sum(const Var<T>& x);

}  // namespace ag

}  // namespace rsfm
