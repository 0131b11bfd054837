#include "retro/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "retro/kernels.hpp"

namespace retro::tensor {

std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// ---------------------------------------------------------------------------
// Tensor / Tape

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  Tensor t;
  t.node_ = std::make_shared<Node>();
  t.node_->value.assign(tensor::numel(shape), T(0));
  t.node_->shape = std::move(shape);
  t.node_->requires_grad = requires_grad;
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
  if (tensor::numel(shape) != values.size()) {
    throw std::invalid_argument("value count " + std::to_string(values.size()) +
                                " does not match shape " + shape_str(shape));
  }
  Tensor t;
  t.node_ = std::make_shared<Node>();
  t.node_->shape = std::move(shape);
  t.node_->value = std::move(values);
  t.node_->requires_grad = requires_grad;
  return t;
}

template <typename T>
std::size_t Tensor<T>::dim(std::ptrdiff_t i) const {
  const auto r = static_cast<std::ptrdiff_t>(rank());
  if (i < 0) i += r;
  if (i < 0 || i >= r) throw std::out_of_range("dimension index out of range");
  return node_->shape[static_cast<std::size_t>(i)];
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw std::logic_error("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

template <typename T>
std::span<T> Tensor<T>::grad_mut() const {
  if (node_->grad.empty()) node_->grad.assign(node_->value.size(), T(0));
  return node_->grad;
}

template <typename T>
void Tape<T>::backward(Tensor<T>& output) {
  if (output.numel() != 1) {
    throw std::logic_error("backward() without seed needs a scalar output");
  }
  const T one = 1;
  backward(output, std::span<const T>(&one, 1));
}

template <typename T>
void Tape<T>::backward(Tensor<T>& output, std::span<const T> seed) {
  if (consumed_) throw std::logic_error("tape already consumed by backward()");
  if (seed.size() != output.numel()) throw std::invalid_argument("seed shape mismatch");
  consumed_ = true;
  auto g = output.grad_mut();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
}

// ---------------------------------------------------------------------------
// AttentionMask

AttentionMask AttentionMask::all(std::size_t queries, std::size_t keys) {
  AttentionMask m;
  m.queries = queries;
  m.keys = keys;
  m.begin.assign(queries, 0);
  m.end.assign(queries, static_cast<std::uint32_t>(keys));
  return m;
}

AttentionMask AttentionMask::causal(std::size_t n) {
  AttentionMask m;
  m.queries = m.keys = n;
  m.begin.assign(n, 0);
  m.end.resize(n);
  for (std::size_t i = 0; i < n; ++i) m.end[i] = static_cast<std::uint32_t>(i + 1);
  return m;
}

AttentionMask AttentionMask::from_dense(std::size_t queries, std::size_t keys,
                                        std::vector<std::uint8_t> allowed) {
  AttentionMask m = all(queries, keys);
  m.dense = std::move(allowed);
  m.validate();
  return m;
}

bool AttentionMask::allowed(std::size_t i, std::size_t j) const {
  if (j < begin[i] || j >= end[i]) return false;
  if (!key_valid.empty() && !key_valid[j]) return false;
  if (!dense.empty() && !dense[i * keys + j]) return false;
  return true;
}

void AttentionMask::validate() const {
  if (begin.size() != queries || end.size() != queries) {
    throw std::invalid_argument("attention mask window count does not match queries");
  }
  if (!key_valid.empty() && key_valid.size() != keys) {
    throw std::invalid_argument("attention mask key_valid size mismatch");
  }
  if (!dense.empty() && dense.size() != queries * keys) {
    throw std::invalid_argument("attention mask shape mismatch: expected " +
                                std::to_string(queries) + "x" + std::to_string(keys));
  }
  for (std::size_t i = 0; i < queries; ++i) {
    if (begin[i] > end[i] || end[i] > keys) {
      throw std::invalid_argument("attention mask window out of range");
    }
  }
}

// ---------------------------------------------------------------------------
// Ops

namespace {

template <typename T>
bool any_grad(std::initializer_list<const Tensor<T>*> xs) {
  return std::any_of(xs.begin(), xs.end(), [](auto* x) { return x->requires_grad(); });
}

template <typename T>
Tensor<T> make_out(Shape shape, std::vector<T> values, bool requires_grad) {
  return Tensor<T>::from(std::move(shape), std::move(values), requires_grad);
}

}  // namespace

template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw std::invalid_argument("matmul needs rank >= 2, got " + shape_str(a.shape()) +
                                " and " + shape_str(b.shape()));
  }
  const std::size_t p = a.dim(-2), q = a.dim(-1), r = b.dim(-1);
  const bool broadcast_b = b.rank() == 2;
  bool ok = b.dim(-2) == q;
  if (!broadcast_b) {
    ok = ok && a.rank() == b.rank() &&
         std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin());
  }
  if (!ok) {
    throw std::invalid_argument("matmul shape mismatch: " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  }
  const std::size_t batch = a.numel() / (p * q);
  Shape out_shape = a.shape();
  out_shape.back() = r;
  std::vector<T> out(batch * p * r, T(0));
  if (broadcast_b) {
    kernels::parallel::gemm(batch * p, q, r, a.values().data(), b.values().data(), out.data());
  } else {
    for (std::size_t s = 0; s < batch; ++s) {
      kernels::parallel::gemm(p, q, r, a.values().data() + s * p * q,
                              b.values().data() + s * q * r, out.data() + s * p * r);
    }
  }
  auto y = make_out(std::move(out_shape), std::move(out), any_grad<T>({&a, &b}));
  if (y.requires_grad()) {
    tape.push([a, b, y, p, q, r, batch, broadcast_b]() mutable {
      if (!y.has_grad()) return;
      const T* dy = y.grad().data();
      if (a.requires_grad()) {
        T* da = a.grad_mut().data();
        if (broadcast_b) {
          kernels::parallel::gemm_nt(batch * p, r, q, dy, b.values().data(), da);
        } else {
          for (std::size_t s = 0; s < batch; ++s) {
            kernels::parallel::gemm_nt(p, r, q, dy + s * p * r, b.values().data() + s * q * r,
                                       da + s * p * q);
          }
        }
      }
      if (b.requires_grad()) {
        T* db = b.grad_mut().data();
        if (broadcast_b) {
          kernels::parallel::gemm_tn(batch * p, q, r, a.values().data(), dy, db);
        } else {
          for (std::size_t s = 0; s < batch; ++s) {
            kernels::parallel::gemm_tn(p, q, r, a.values().data() + s * p * q, dy + s * p * r,
                                       db + s * q * r);
          }
        }
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument("add shape mismatch: " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  std::vector<T> out(a.numel());
  const auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  auto y = make_out(a.shape(), std::move(out), any_grad<T>({&a, &b}));
  if (y.requires_grad()) {
    tape.push([a, b, y]() mutable {
      if (!y.has_grad()) return;
      const auto dy = y.grad();
      for (const Tensor<T>* x : {&a, &b}) {
        if (!x->requires_grad()) continue;
        auto dx = x->grad_mut();
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i];
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> add_bias(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& bias) {
  if (bias.rank() != 1 || x.dim(-1) != bias.dim(0)) {
    throw std::invalid_argument("add_bias shape mismatch: " + shape_str(x.shape()) + " + " +
                                shape_str(bias.shape()));
  }
  const std::size_t n = bias.numel();
  const std::size_t rows = x.numel() / n;
  std::vector<T> out(x.values().begin(), x.values().end());
  const auto bv = bias.values();
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bv[j];
  }
  auto y = make_out(x.shape(), std::move(out), any_grad<T>({&x, &bias}));
  if (y.requires_grad()) {
    tape.push([x, bias, y, rows, n]() mutable {
      if (!y.has_grad()) return;
      const auto dy = y.grad();
      if (x.requires_grad()) {
        auto dx = x.grad_mut();
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i];
      }
      if (bias.requires_grad()) {
        auto db = bias.grad_mut();
        for (std::size_t i = 0; i < rows; ++i) {
          for (std::size_t j = 0; j < n; ++j) db[j] += dy[i * n + j];
        }
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& x, T s) {
  std::vector<T> out(x.numel());
  const auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * s;
  auto y = make_out(x.shape(), std::move(out), x.requires_grad());
  if (y.requires_grad()) {
    tape.push([x, y, s]() mutable {
      if (!y.has_grad()) return;
      const auto dy = y.grad();
      auto dx = x.grad_mut();
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i] * s;
    });
  }
  return y;
}

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.values()) acc += v;
  auto y = make_out<T>({1}, {acc}, x.requires_grad());
  if (y.requires_grad()) {
    tape.push([x, y]() mutable {
      if (!y.has_grad()) return;
      const T g = y.grad()[0];
      for (auto& d : x.grad_mut()) d += g;
    });
  }
  return y;
}

namespace {

template <typename T>
constexpr T kGeluC = T(0.7978845608028654);  // sqrt(2/pi)

template <typename T>
T gelu_value(T x) {
  const T u = kGeluC<T> * (x + T(0.044715) * x * x * x);
  return T(0.5) * x * (T(1) + std::tanh(u));
}

template <typename T>
T gelu_deriv(T x) {
  const T u = kGeluC<T> * (x + T(0.044715) * x * x * x);
  const T t = std::tanh(u);
  const T du = kGeluC<T> * (T(1) + T(3) * T(0.044715) * x * x);
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
}

template <typename T, typename F, typename D>
Tensor<T> unary(Tape<T>& tape, const Tensor<T>& x, F f, D df) {
  std::vector<T> out(x.numel());
  const auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  auto y = make_out(x.shape(), std::move(out), x.requires_grad());
  if (y.requires_grad()) {
    tape.push([x, y, df]() mutable {
      if (!y.has_grad()) return;
      const auto dy = y.grad();
      const auto xv = x.values();
      auto dx = x.grad_mut();
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i] * df(xv[i]);
    });
  }
  return y;
}

}  // namespace

template <typename T>
Tensor<T> gelu(Tape<T>& tape, const Tensor<T>& x) {
  return unary(tape, x, gelu_value<T>, gelu_deriv<T>);
}

template <typename T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& x) {
  return unary(
      tape, x, [](T v) { return v > T(0) ? v : T(0); },
      [](T v) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> activation(Tape<T>& tape, const Tensor<T>& x, Activation act) {
  return act == Activation::gelu ? gelu(tape, x) : relu(tape, x);
}

template <typename T>
Tensor<T> layer_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gain,
                     const Tensor<T>& bias, T eps) {
  const std::size_t n = x.dim(-1);
  if (gain.rank() != 1 || bias.rank() != 1 || gain.dim(0) != n || bias.dim(0) != n) {
    throw std::invalid_argument("layer_norm parameter shape mismatch for input " +
                                shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / n;
  std::vector<T> out(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> inv_std(rows);
  const auto xv = x.values(), gv = gain.values(), bv = bias.values();
  for (std::size_t i = 0; i < rows; ++i) {
    const T* row = xv.data() + i * n;
    T mean = 0;
    for (std::size_t j = 0; j < n; ++j) mean += row[j];
    mean /= T(n);
    T var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= T(n);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[i] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const T h = (row[j] - mean) * is;
      xhat[i * n + j] = h;
      out[i * n + j] = h * gv[j] + bv[j];
    }
  }
  auto y = make_out(x.shape(), std::move(out), any_grad<T>({&x, &gain, &bias}));
  if (y.requires_grad()) {
    tape.push([x, gain, bias, y, xhat = std::move(xhat), inv_std = std::move(inv_std), rows,
               n]() mutable {
      if (!y.has_grad()) return;
      const auto dy = y.grad();
      if (gain.requires_grad() || bias.requires_grad()) {
        auto dg = gain.requires_grad() ? gain.grad_mut() : std::span<T>{};
        auto db = bias.requires_grad() ? bias.grad_mut() : std::span<T>{};
        for (std::size_t i = 0; i < rows; ++i) {
          for (std::size_t j = 0; j < n; ++j) {
            if (!dg.empty()) dg[j] += dy[i * n + j] * xhat[i * n + j];
            if (!db.empty()) db[j] += dy[i * n + j];
          }
        }
      }
      if (x.requires_grad()) {
        auto dx = x.grad_mut();
        const auto gv = gain.values();
        for (std::size_t i = 0; i < rows; ++i) {
          T mean_g = 0, mean_gx = 0;
          for (std::size_t j = 0; j < n; ++j) {
            const T g = dy[i * n + j] * gv[j];
            mean_g += g;
            mean_gx += g * xhat[i * n + j];
          }
          mean_g /= T(n);
          mean_gx /= T(n);
          for (std::size_t j = 0; j < n; ++j) {
            const T g = dy[i * n + j] * gv[j];
            dx[i * n + j] += inv_std[i] * (g - mean_g - xhat[i * n + j] * mean_gx);
          }
        }
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> embedding_lookup(Tape<T>& tape, const Tensor<T>& table,
                           std::span<const TokenId> ids) {
  if (table.rank() != 2) throw std::invalid_argument("embedding table must be rank 2");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<T> out(ids.size() * d);
  const auto tv = table.values();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= vocab) {
      throw std::out_of_range("embedding id " + std::to_string(ids[i]) +
                              " out of range for table " + shape_str(table.shape()));
    }
    std::copy_n(tv.data() + ids[i] * d, d, out.data() + i * d);
  }
  auto y = make_out<T>({ids.size(), d}, std::move(out), table.requires_grad());
  if (y.requires_grad()) {
    tape.push([table, y, ids = std::vector<TokenId>(ids.begin(), ids.end()), d]() mutable {
      if (!y.has_grad()) return;
      const auto dy = y.grad();
      auto dt = table.grad_mut();
      for (std::size_t i = 0; i < ids.size(); ++i) {
        T* row = dt.data() + ids[i] * d;
        for (std::size_t j = 0; j < d; ++j) row[j] += dy[i * d + j];
      }
    });
  }
  return y;
}

template <typename T>
void softmax_inplace(std::span<T> row) {
  if (row.empty()) return;
  const T mx = *std::max_element(row.begin(), row.end());
  T total = 0;
  for (auto& v : row) {
    v = std::exp(v - mx);
    total += v;
  }
  for (auto& v : row) v /= total;
}

template <typename T>
Tensor<T> softmax_ce(Tape<T>& tape, const Tensor<T>& logits, std::span<const TokenId> targets,
                     TokenId ignore_id) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size()) {
    throw std::invalid_argument("softmax_ce expects logits [T, V] with T targets, got " +
                                shape_str(logits.shape()));
  }
  const std::size_t rows = logits.dim(0), vocab = logits.dim(1);
  for (TokenId t : targets) {
    if (t >= vocab) throw std::out_of_range("target id " + std::to_string(t) + " out of range");
  }
  std::vector<T> loss(rows, T(0));
  std::vector<T> lse(rows, T(0));
  const auto lv = logits.values();
  const auto n = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel for schedule(static) if (rows * vocab >= 65536)
  for (std::ptrdiff_t si = 0; si < n; ++si) {
    const auto i = static_cast<std::size_t>(si);
    if (targets[i] == ignore_id) continue;
    const T* row = lv.data() + i * vocab;
    const T mx = *std::max_element(row, row + vocab);
    T total = 0;
    for (std::size_t j = 0; j < vocab; ++j) total += std::exp(row[j] - mx);
    lse[i] = mx + std::log(total);
    loss[i] = lse[i] - row[targets[i]];
  }
  auto y = make_out<T>({rows}, std::move(loss), logits.requires_grad());
  if (y.requires_grad()) {
    tape.push([logits, y, lse = std::move(lse),
               targets = std::vector<TokenId>(targets.begin(), targets.end()), ignore_id, rows,
               vocab]() mutable {
      if (!y.has_grad()) return;
      const auto dy = y.grad();
      const auto lv = logits.values();
      auto dl = logits.grad_mut();
      const auto n = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel for schedule(static) if (rows * vocab >= 65536)
      for (std::ptrdiff_t si = 0; si < n; ++si) {
        const auto i = static_cast<std::size_t>(si);
        if (targets[i] == ignore_id) continue;
        const T g = dy[i];
        const T* row = lv.data() + i * vocab;
        T* drow = dl.data() + i * vocab;
        for (std::size_t j = 0; j < vocab; ++j) drow[j] += g * std::exp(row[j] - lse[i]);
        drow[targets[i]] -= g;
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> attention(Tape<T>& tape, const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    std::size_t heads, const RelativeBias<T>* bias,
                    const AttentionMask& mask) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || k.shape() != v.shape() ||
      q.dim(1) != k.dim(1) || heads == 0 || q.dim(1) % heads != 0) {
    throw std::invalid_argument("attention shape mismatch: q" + shape_str(q.shape()) + " k" +
                                shape_str(k.shape()) + " v" + shape_str(v.shape()) +
                                " heads=" + std::to_string(heads));
  }
  const std::size_t tq = q.dim(0), tk = k.dim(0), width = q.dim(1), dh = width / heads;
  if (mask.queries != tq || mask.keys != tk) {
    throw std::invalid_argument("attention mask shape mismatch: mask " +
                                std::to_string(mask.queries) + "x" + std::to_string(mask.keys) +
                                ", scores " + std::to_string(tq) + "x" + std::to_string(tk));
  }
  mask.validate();
  std::size_t n_offsets = 0;
  if (bias) {
    if (bias->table.rank() != 2 || bias->table.dim(0) != heads ||
        bias->query_pos.size() != tq || bias->key_pos.size() != tk) {
      throw std::invalid_argument("relative bias shape mismatch");
    }
    n_offsets = bias->table.dim(1);
    for (std::size_t i = 0; i < tq; ++i) {
      for (std::size_t j = mask.begin[i]; j < mask.end[i]; ++j) {
        const std::int64_t off =
            std::int64_t{bias->key_pos[j]} - bias->query_pos[i] - bias->min_offset;
        if (off < 0 || off >= static_cast<std::int64_t>(n_offsets)) {
          throw std::out_of_range("relative offset outside bias table");
        }
      }
    }
  }

  // Probabilities are kept per (head, query) over the query's key window.
  std::vector<std::size_t> row_start(tq + 1, 0);
  for (std::size_t i = 0; i < tq; ++i) row_start[i + 1] = row_start[i] + (mask.end[i] - mask.begin[i]);
  const std::size_t window_total = row_start[tq];
  std::vector<T> probs(heads * window_total, T(0));
  std::vector<T> out(tq * width, T(0));
  const T scale_factor = T(1) / std::sqrt(T(dh));
  const auto qv = q.values(), kv = k.values(), vv = v.values();
  const T* table = bias ? bias->table.values().data() : nullptr;

  const auto rows = static_cast<std::ptrdiff_t>(tq);
#pragma omp parallel for schedule(static) if (tq * width >= 4096)
  for (std::ptrdiff_t si = 0; si < rows; ++si) {
    const auto i = static_cast<std::size_t>(si);
    const std::size_t b = mask.begin[i], e = mask.end[i];
    for (std::size_t h = 0; h < heads; ++h) {
      T* p = probs.data() + h * window_total + row_start[i];
      const T* qi = qv.data() + i * width + h * dh;
      T mx = -std::numeric_limits<T>::infinity();
      bool any = false;
      for (std::size_t j = b; j < e; ++j) {
        if (!mask.allowed(i, j)) continue;
        const T* kj = kv.data() + j * width + h * dh;
        T s = 0;
        for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
        s *= scale_factor;
        if (table) {
          s += table[h * n_offsets + static_cast<std::size_t>(std::int64_t{bias->key_pos[j]} -
                                                              bias->query_pos[i] -
                                                              bias->min_offset)];
        }
        p[j - b] = s;
        mx = any ? std::max(mx, s) : s;
        any = true;
      }
      if (!any) continue;  // fully masked row: zero output
      T total = 0;
      for (std::size_t j = b; j < e; ++j) {
        if (!mask.allowed(i, j)) continue;
        p[j - b] = std::exp(p[j - b] - mx);
        total += p[j - b];
      }
      T* oi = out.data() + i * width + h * dh;
      for (std::size_t j = b; j < e; ++j) {
        if (!mask.allowed(i, j)) continue;
        p[j - b] /= total;
        const T* vj = vv.data() + j * width + h * dh;
        for (std::size_t c = 0; c < dh; ++c) oi[c] += p[j - b] * vj[c];
      }
    }
  }

  const bool need_grad = q.requires_grad() || k.requires_grad() || v.requires_grad() ||
                         (bias && bias->table.requires_grad());
  auto y = make_out<T>({tq, width}, std::move(out), need_grad);
  if (need_grad) {
    struct Saved {
      std::vector<std::size_t> row_start;
      std::vector<T> probs;
      std::vector<std::uint32_t> begin, end;
      std::vector<std::int64_t> offsets;  // per window entry, -1 without bias
    };
    auto saved = std::make_shared<Saved>();
    saved->begin = mask.begin;
    saved->end = mask.end;
    if (bias) {
      saved->offsets.resize(window_total);
      for (std::size_t i = 0; i < tq; ++i) {
        for (std::size_t j = mask.begin[i]; j < mask.end[i]; ++j) {
          saved->offsets[row_start[i] + j - mask.begin[i]] =
              std::int64_t{bias->key_pos[j]} - bias->query_pos[i] - bias->min_offset;
        }
      }
    }
    saved->row_start = std::move(row_start);
    saved->probs = std::move(probs);
    Tensor<T> table_t = bias ? bias->table : Tensor<T>{};
    tape.push([q, k, v, y, table_t, saved, heads, tq, width, dh, window_total, n_offsets,
               scale_factor]() mutable {
      if (!y.has_grad()) return;
      const auto dy = y.grad();
      const auto qv = q.values(), kv = k.values(), vv = v.values();
      // Allocate every gradient before the parallel region.
      T* dq = q.requires_grad() ? q.grad_mut().data() : nullptr;
      T* dk = k.requires_grad() ? k.grad_mut().data() : nullptr;
      T* dv = v.requires_grad() ? v.grad_mut().data() : nullptr;
      T* dt = (table_t.defined() && table_t.requires_grad()) ? table_t.grad_mut().data() : nullptr;
      const auto hcount = static_cast<std::ptrdiff_t>(heads);
      // Heads touch disjoint columns and disjoint bias rows.
#pragma omp parallel for schedule(static) if (tq * width >= 4096)
      for (std::ptrdiff_t sh = 0; sh < hcount; ++sh) {
        const auto h = static_cast<std::size_t>(sh);
        std::vector<T> ds;
        for (std::size_t i = 0; i < tq; ++i) {
          const std::size_t b = saved->begin[i], e = saved->end[i];
          if (b == e) continue;
          const T* p = saved->probs.data() + h * window_total + saved->row_start[i];
          const T* dyi = dy.data() + i * width + h * dh;
          ds.assign(e - b, T(0));
          T dot = 0;
          for (std::size_t j = b; j < e; ++j) {
            if (p[j - b] == T(0)) continue;
            const T* vj = vv.data() + j * width + h * dh;
            T dp = 0;
            for (std::size_t c = 0; c < dh; ++c) dp += dyi[c] * vj[c];
            ds[j - b] = dp;
            dot += p[j - b] * dp;
          }
          const T* qi = qv.data() + i * width + h * dh;
          for (std::size_t j = b; j < e; ++j) {
            const T pj = p[j - b];
            if (pj == T(0)) continue;
            const T g = pj * (ds[j - b] - dot);
            if (dv) {
              T* dvj = dv + j * width + h * dh;
              for (std::size_t c = 0; c < dh; ++c) dvj[c] += pj * dyi[c];
            }
            if (dt) dt[h * n_offsets + static_cast<std::size_t>(saved->offsets[saved->row_start[i] + j - b])] += g;
            const T gs = g * scale_factor;
            if (dq) {
              const T* kj = kv.data() + j * width + h * dh;
              T* dqi = dq + i * width + h * dh;
              for (std::size_t c = 0; c < dh; ++c) dqi[c] += gs * kj[c];
            }
            if (dk) {
              T* dkj = dk + j * width + h * dh;
              for (std::size_t c = 0; c < dh; ++c) dkj[c] += gs * qi[c];
            }
          }
        }
      }
    });
  }
  return y;
}

#define RETRO_INSTANTIATE(T)                                                                  \
  template class Tensor<T>;                                                                   \
  template class Tape<T>;                                                                     \
  template struct RelativeBias<T>;                                                            \
  template Tensor<T> matmul(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> add(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> add_bias(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> scale(Tape<T>&, const Tensor<T>&, T);                                    \
  template Tensor<T> sum(Tape<T>&, const Tensor<T>&);                                         \
  template Tensor<T> gelu(Tape<T>&, const Tensor<T>&);                                        \
  template Tensor<T> relu(Tape<T>&, const Tensor<T>&);                                        \
  template Tensor<T> activation(Tape<T>&, const Tensor<T>&, Activation);                      \
  template Tensor<T> layer_norm(Tape<T>&, const Tensor<T>&, const Tensor<T>&,                 \
                                const Tensor<T>&, T);                                         \
  template Tensor<T> embedding_lookup(Tape<T>&, const Tensor<T>&, std::span<const TokenId>);  \
  template Tensor<T> softmax_ce(Tape<T>&, const Tensor<T>&, std::span<const TokenId>,         \
                                TokenId);                                                     \
  template Tensor<T> attention(Tape<T>&, const Tensor<T>&, const Tensor<T>&,                  \
                               const Tensor<T>&, std::size_t, const RelativeBias<T>*,         \
                               const AttentionMask&);                                         \
  template void softmax_inplace(std::span<T>);

RETRO_INSTANTIATE(float)
RETRO_INSTANTIATE(double)
#undef RETRO_INSTANTIATE

}  // namespace retro::tensor
