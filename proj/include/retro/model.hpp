#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "retro/checkpoint.hpp"
#include "retro/retrieval.hpp"
#include "retro/tensor.hpp"

namespace retro::model {

using tensor::Tensor;

/// One transformer stack. `cross_layers` are 1-based layer numbers that carry
/// a cross-attention sublayer (CCA in the decoder, CA in the encoder).
struct StackConfig {
  std::size_t layers = 0;
  std::size_t heads = 0;
  std::size_t hidden = 0;
  std::size_t ffn = 0;
  std::vector<std::size_t> cross_layers;
};

struct RetroConfig {
  std::string preset = "desk";
  std::size_t vocab_size = 512;
  std::size_t m = 8;         // chunk size
  std::size_t k = 2;         // neighbors per chunk
  std::size_t max_len = 64;  // L
  StackConfig encoder{1, 2, 64, 128, {1}};
  StackConfig decoder{4, 2, 64, 128, {2, 3, 4}};
  tensor::Activation activation = tensor::Activation::gelu;
  double init_std = 0.02;

  /// `desk` or `paper-425m`.
  static RetroConfig preset_named(std::string_view name);

  void validate() const;
  /// key=value lines, one field per line, fixed order.
  std::string serialize() const;
  static RetroConfig parse(std::string_view text);
  std::uint64_t hash() const { return fnv1a64(serialize()); }
  /// Trainable scalars; embeddings and the output projection optional.
  std::size_t parameter_count(bool include_embeddings = true) const;
};

template <typename T>
struct AttentionWeights {
  Tensor<T> ln_gain, ln_bias;
  Tensor<T> wq, wk, wv, wo;
  Tensor<T> rel_bias;  // [heads, offsets]
};

template <typename T>
struct FeedForwardWeights {
  Tensor<T> ln_gain, ln_bias;
  Tensor<T> w1, b1, w2, b2;
};

template <typename T>
struct LayerWeights {
  AttentionWeights<T> self;
  std::optional<AttentionWeights<T>> cross;
  FeedForwardWeights<T> ffn;
};

/// All trainable tensors, also reachable through a name-ordered registry.
template <typename T>
struct ModelParams {
  Tensor<T> dec_embed, enc_embed;
  std::vector<LayerWeights<T>> decoder, encoder;
  Tensor<T> dec_final_gain, dec_final_bias, enc_final_gain, enc_final_bias;
  Tensor<T> out_w, out_b;

  std::vector<std::string> names;
  std::vector<Tensor<T>> tensors;

  /// Truncated normal (std cfg.init_std, cut at 2 std) for weights; zero
  /// biases and relative-bias tables; unit layer-norm gains.
  static ModelParams init(const RetroConfig& cfg, std::uint64_t seed);
  /// Fresh storage with the same values.
  ModelParams clone() const;

  Tensor<T>& at(std::string_view name);
  const Tensor<T>& at(std::string_view name) const;

  void zero_grad();
  void to_checkpoint(Checkpoint& ckpt) const;
  static ModelParams from_checkpoint(const RetroConfig& cfg, const Checkpoint& ckpt);
};

/// Neighbors for one sequence. Entry e holds RET(C_{e+1}), the k [N, F]
/// pairs that condition decoder chunk e + 2.
struct NeighborBatch {
  std::size_t k = 0;
  std::size_t width = 0;             // 2m
  std::vector<TokenId> tokens;       // entries x k x width
  std::vector<std::uint8_t> valid;   // entries x k, 0 for sentinel pairs

  std::size_t entries() const { return valid.size() / (k ? k : 1); }
  static NeighborBatch from_indices(const store::ChunkDatabase& db,
                                    const std::vector<std::vector<std::int64_t>>& indices,
                                    std::size_t k);
};

struct Batch {
  std::vector<std::vector<TokenId>> sequences;
  std::vector<NeighborBatch> neighbors;  // parallel to sequences; may be empty in off mode
};

enum class Mode { on, off };

template <typename T>
struct ForwardResult {
  Tensor<T> logits;     // [B * rows_per_seq, V]
  Tensor<T> losses;     // [B * rows_per_seq], position p scores token p + 1
  Tensor<T> mean_loss;  // [1], over non-PAD targets
  std::size_t rows_per_seq = 0;
  std::size_t target_count = 0;
};

/// Decoder pass over a padded batch. In Mode::on every position p attends, at
/// each CCA layer, to the encoded neighbors of chunk ceil((p + 2) / m) - 1
/// and chunk-1 positions receive nothing. Mode::off skips CCA and the encoder.
/// A sequence may carry ceil(len/m) - 1 neighbor entries, or floor(len/m)
/// when len is a multiple of m and the last position should see the newest
/// chunk's neighbors (generation).
template <typename T>
ForwardResult<T> forward(tensor::Tape<T>& tape, const ModelParams<T>& params,
                         const RetroConfig& cfg, const Batch& batch, Mode mode);

template <typename T>
ForwardResult<T> forward_on(tensor::Tape<T>& tape, const ModelParams<T>& params,
                            const RetroConfig& cfg, const std::vector<TokenId>& sequence,
                            const NeighborBatch& neighbors);

template <typename T>
ForwardResult<T> forward_off(tensor::Tape<T>& tape, const ModelParams<T>& params,
                             const RetroConfig& cfg, const std::vector<TokenId>& sequence);

struct Sampling {
  bool greedy = true;
  double temperature = 1.0;
  std::uint64_t seed = 0;
};

/// Autoregressive decoding. RET(C_{u-1}) is fetched from `db` the moment the
/// sequence grows into chunk u. `db` may be null only in Mode::off.
std::vector<TokenId> generate(const ModelParams<float>& params, const RetroConfig& cfg,
                              const store::ChunkDatabase* db,
                              const store::RetrievalConfig& rcfg,
                              std::vector<TokenId> prompt, std::size_t steps,
                              const Sampling& sampling, Mode mode = Mode::on);

}  // namespace retro::model
