#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "retro/common.hpp"

// Minimal dense tensors with tape-based reverse-mode autodiff. Instantiated for
// float (training) and double (gradient checks).

namespace retro::tensor {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& s);
std::string shape_str(const Shape& s);

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  /// Negative indices count from the back.
  std::size_t dim(std::ptrdiff_t i) const;
  std::size_t numel() const { return node_->value.size(); }

  std::span<const T> values() const { return node_->value; }
  /// Writable storage for leaves (initialization and optimizer updates).
  std::span<T> mutable_values() { return node_->value; }
  T item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return !node_->grad.empty(); }
  /// Empty when no gradient has flowed here yet.
  std::span<const T> grad() const { return node_->grad; }
  /// Allocates a zero gradient on first use.
  std::span<T> grad_mut() const;
  void zero_grad() { node_->grad.clear(); }

  bool same_node(const Tensor& o) const { return node_ == o.node_; }

 private:
  struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Node> node_;
};

/// Records backward closures in execution order; `backward` replays them in
/// reverse exactly once.
template <typename T>
class Tape {
 public:
  Tape() = default;
  /// A non-recording tape drops every closure (inference).
  explicit Tape(bool record) : record_(record) {}

  void push(std::function<void()> fn) {
    if (record_) ops_.push_back(std::move(fn));
  }
  bool recording() const { return record_; }
  std::size_t size() const { return ops_.size(); }

  /// Seeds d(output)/d(output) = 1; output must hold a single value.
  void backward(Tensor<T>& output);
  void backward(Tensor<T>& output, std::span<const T> seed);

 private:
  std::vector<std::function<void()>> ops_;
  bool consumed_ = false;
  bool record_ = true;
};

enum class Activation { gelu, relu };

/// Key window and validity mask for attention. Query i may see key j iff
/// begin[i] <= j < end[i], key_valid[j] (when given) and dense[i*keys+j]
/// (when given).
struct AttentionMask {
  std::size_t queries = 0;
  std::size_t keys = 0;
  std::vector<std::uint32_t> begin;
  std::vector<std::uint32_t> end;
  std::vector<std::uint8_t> key_valid;
  std::vector<std::uint8_t> dense;

  static AttentionMask all(std::size_t queries, std::size_t keys);
  static AttentionMask causal(std::size_t n);
  static AttentionMask from_dense(std::size_t queries, std::size_t keys,
                                  std::vector<std::uint8_t> allowed);
  bool allowed(std::size_t i, std::size_t j) const;
  void validate() const;
};

/// T5-style relative position bias: score(i, j) of head h gets
/// table[h, key_pos[j] - query_pos[i] - min_offset].
template <typename T>
struct RelativeBias {
  Tensor<T> table;  // [heads, offsets]
  std::int64_t min_offset = 0;
  std::vector<std::int32_t> query_pos;
  std::vector<std::int32_t> key_pos;
};

template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);
/// x[..., n] + bias[n]
template <typename T>
Tensor<T> add_bias(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& bias);
template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& x, T s);
template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x);
template <typename T>
Tensor<T> gelu(Tape<T>& tape, const Tensor<T>& x);
template <typename T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& x);
template <typename T>
Tensor<T> activation(Tape<T>& tape, const Tensor<T>& x, Activation act);
/// Normalizes over the last dimension.
template <typename T>
Tensor<T> layer_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gain,
                     const Tensor<T>& bias, T eps = T(1e-5));
template <typename T>
Tensor<T> embedding_lookup(Tape<T>& tape, const Tensor<T>& table,
                           std::span<const TokenId> ids);
/// Per-row natural-log cross entropy; rows whose target is ignore_id get loss
/// 0 and no gradient.
template <typename T>
Tensor<T> softmax_ce(Tape<T>& tape, const Tensor<T>& logits,
                     std::span<const TokenId> targets, TokenId ignore_id = kPad);
/// Multi-head attention over q[Tq, H*dh], k/v[Tk, H*dh]. Rows with no visible
/// key produce zeros.
template <typename T>
Tensor<T> attention(Tape<T>& tape, const Tensor<T>& q, const Tensor<T>& k,
                    const Tensor<T>& v, std::size_t heads,
                    const RelativeBias<T>* bias, const AttentionMask& mask);

/// Numerically stable in-place softmax of one row.
template <typename T>
void softmax_inplace(std::span<T> row);

}  // namespace retro::tensor
