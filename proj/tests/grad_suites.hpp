#pragma once

// Finite-difference suites for every differentiable op and for the whole
// model, shared by the unit tests and the acceptance binary.

#include <functional>
#include <map>

#include "oracles.hpp"

namespace oracle {

namespace T = retro::tensor;

struct OpResult {
  std::string op;
  GradReport report;
};

/// Runs every op on `shapes` random shapes and returns the worst error per op.
inline std::vector<OpResult> op_grad_suite(std::uint64_t seed, int shapes) {
  std::mt19937_64 rng(seed);
  const auto dim = [&](std::size_t lo, std::size_t hi) { return lo + rng() % (hi - lo + 1); };
  std::map<std::string, GradReport> worst;
  const auto keep = [&](const std::string& op, const GradReport& r) {
    auto& w = worst[op];
    w.checked += r.checked;
    if (r.max_rel >= w.max_rel) {
      w.max_rel = r.max_rel;
      w.worst = r.worst;
    }
  };

  for (int s = 0; s < shapes; ++s) {
    const std::size_t m = dim(1, 6), k = dim(1, 6), n = dim(1, 6);
    {
      auto a = random_tensor({m, k}, rng), b = random_tensor({k, n}, rng);
      keep("matmul", grad_check({a, b}, {"a", "b"}, [&](Tape<double>& t) { return T::matmul(t, a, b); }, rng()));
      auto a3 = random_tensor({2, m, k}, rng), b3 = random_tensor({2, k, n}, rng);
      keep("matmul", grad_check({a3, b3}, {"a", "b"}, [&](Tape<double>& t) { return T::matmul(t, a3, b3); }, rng()));
    }
    {
      auto a = random_tensor({m, n}, rng), b = random_tensor({m, n}, rng), bias = random_tensor({n}, rng);
      keep("add", grad_check({a, b}, {"a", "b"}, [&](Tape<double>& t) { return T::add(t, a, b); }, rng()));
      keep("add_bias", grad_check({a, bias}, {"x", "bias"}, [&](Tape<double>& t) { return T::add_bias(t, a, bias); }, rng()));
      keep("scale", grad_check({a}, {"x"}, [&](Tape<double>& t) { return T::scale(t, a, 0.37); }, rng()));
      keep("sum", grad_check({a}, {"x"}, [&](Tape<double>& t) { return T::sum(t, a); }, rng()));
      keep("gelu", grad_check({a}, {"x"}, [&](Tape<double>& t) { return T::gelu(t, a); }, rng()));
      // Keep relu inputs away from the kink.
      auto r = random_tensor({m, n}, rng);
      for (auto& v : r.mutable_values()) v += v > 0 ? 0.1 : -0.1;
      keep("relu", grad_check({r}, {"x"}, [&](Tape<double>& t) { return T::relu(t, r); }, rng()));
    }
    {
      const std::size_t width = dim(2, 8);
      auto x = random_tensor({m, width}, rng), g = random_tensor({width}, rng), b = random_tensor({width}, rng);
      keep("layer_norm", grad_check({x, g, b}, {"x", "gain", "bias"},
                                    [&](Tape<double>& t) { return T::layer_norm(t, x, g, b); }, rng()));
    }
    {
      const std::size_t vocab = dim(2, 9), width = dim(1, 5), count = dim(1, 7);
      auto table = random_tensor({vocab, width}, rng);
      std::vector<TokenId> ids(count);
      for (auto& id : ids) id = static_cast<TokenId>(rng() % vocab);
      keep("embedding_lookup", grad_check({table}, {"table"},
                                          [&](Tape<double>& t) { return T::embedding_lookup(t, table, ids); }, rng()));
    }
    {
      const std::size_t rows = dim(1, 7), vocab = dim(2, 11);
      auto logits = random_tensor({rows, vocab}, rng);
      std::vector<TokenId> targets(rows);
      for (auto& id : targets) id = static_cast<TokenId>(rng() % vocab);
      if (rows > 1) targets[0] = retro::kPad;  // ignored row
      keep("softmax_ce", grad_check({logits}, {"logits"},
                                    [&](Tape<double>& t) { return T::softmax_ce(t, logits, targets, retro::kPad); }, rng()));
    }
    {
      const std::size_t heads = dim(1, 3), dh = dim(1, 4), tq = dim(1, 6), tk = dim(1, 6);
      auto q = random_tensor({tq, heads * dh}, rng), kk = random_tensor({tk, heads * dh}, rng),
           v = random_tensor({tk, heads * dh}, rng);
      const std::int64_t min_off = -static_cast<std::int64_t>(tq - 1);
      auto table = random_tensor({heads, tq + tk - 1}, rng, 0.5);
      T::RelativeBias<double> bias{table, min_off, {}, {}};
      for (std::size_t i = 0; i < tq; ++i) bias.query_pos.push_back(static_cast<std::int32_t>(i));
      for (std::size_t j = 0; j < tk; ++j) bias.key_pos.push_back(static_cast<std::int32_t>(j));
      std::vector<std::uint8_t> dense(tq * tk);
      for (auto& d : dense) d = rng() % 4 != 0;
      const auto mask = T::AttentionMask::from_dense(tq, tk, dense);
      keep("attention", grad_check({q, kk, v, table}, {"q", "k", "v", "bias"},
                                   [&](Tape<double>& t) { return T::attention(t, q, kk, v, heads, &bias, mask); },
                                   rng()));
    }
  }
  std::vector<OpResult> out;
  for (auto& [op, r] : worst) out.push_back({op, r});
  return out;
}

/// Full desk model, 64-bit, on a random sequence of at most three chunks with
/// random neighbors. Samples `per_tensor` entries of every parameter.
inline GradReport model_grad_check(std::uint64_t seed, std::size_t per_tensor) {
  using namespace retro::model;
  const auto cfg = RetroConfig::preset_named("desk");
  std::mt19937_64 rng(seed);
  auto params = ModelParams<double>::init(cfg, seed);
  // Non-zero biases and relative tables so their gradients are exercised in a
  // generic state.
  for (std::size_t i = 0; i < params.names.size(); ++i) {
    const auto& name = params.names[i];
    const bool zero_init = name.ends_with(".rel") || name.ends_with(".b1") || name.ends_with(".b2") ||
                           name.ends_with(".b") || name == "dec.out.b";
    if (!zero_init) continue;
    std::normal_distribution<double> normal(0, 0.05);
    for (auto& v : params.tensors[i].mutable_values()) v += normal(rng);
  }
  const std::size_t len = 2 * cfg.m + 1 + rng() % cfg.m;  // three chunks
  Batch batch;
  std::vector<TokenId> seq(len);
  for (auto& t : seq) t = static_cast<TokenId>(4 + rng() % (cfg.vocab_size - 4));
  batch.sequences.push_back(seq);
  NeighborBatch nb;
  nb.k = cfg.k;
  nb.width = 2 * cfg.m;
  const std::size_t entries = (len + cfg.m - 1) / cfg.m - 1;
  for (std::size_t e = 0; e < entries * cfg.k; ++e) {
    for (std::size_t t = 0; t < nb.width; ++t) {
      nb.tokens.push_back(t + 3 > nb.width ? retro::kPad : static_cast<TokenId>(4 + rng() % (cfg.vocab_size - 4)));
    }
    nb.valid.push_back(1);
  }
  batch.neighbors.push_back(nb);
  return grad_check(params.tensors, params.names,
                    [&](Tape<double>& t) { return forward(t, params, cfg, batch, Mode::on).mean_loss; },
                    seed ^ 0x5eed, per_tensor);
}

}  // namespace oracle
