#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "retro/model.hpp"
#include "retro/optim.hpp"

namespace retro::train {

struct TrainConfig {
  std::string preset = "desk";
  std::size_t steps = 3000;
  std::size_t batch = 8;
  double lr = 1e-3;  // desk; paper-425m uses 1e-4
  std::uint64_t seed = 0;
  std::size_t checkpoint_interval = 1000;  // 0 writes only the final checkpoint
  bool clip = true;
  double clip_norm = 1.0;

  /// desk: 3,000 steps of 8 at lr 1e-3; paper-425m: 140,000 steps of 16 at 1e-4.
  static TrainConfig preset_named(std::string_view name);
  void validate() const;
};

/// Deterministic sample order: sample s of the stream is document
/// perm_e[s mod n], e = s / n, where perm_e is a Fisher-Yates shuffle seeded
/// by (seed, e). Any step can be produced without replaying earlier ones.
class BatchStream {
 public:
  BatchStream(std::span<const TokenSequence> docs, std::size_t batch, std::size_t max_len,
              std::uint64_t seed);

  /// Document indices of the 0-based step.
  std::vector<std::size_t> indices(std::size_t step) const;
  /// Token sequences of the 0-based step, each truncated to max_len.
  std::vector<std::vector<TokenId>> at(std::size_t step) const;
  std::vector<std::vector<TokenId>> next() { return at(cursor_++); }

 private:
  const std::vector<std::size_t>& permutation(std::size_t epoch) const;

  std::span<const TokenSequence> docs_;
  std::size_t batch_, max_len_;
  std::uint64_t seed_;
  std::size_t cursor_ = 0;
  mutable std::size_t cached_epoch_ = ~std::size_t{0};
  mutable std::vector<std::size_t> cached_perm_;
};

BatchStream make_batches(std::span<const TokenSequence> train_docs, const TrainConfig& cfg,
                         std::size_t max_len, std::uint64_t seed);

/// Everything needed to continue a run bit-exactly.
struct TrainState {
  model::ModelParams<float> params;
  optim::AdamState<float> adam;
  std::vector<float> losses;  // losses[s] = batch loss of step s + 1
  std::size_t step() const { return losses.size(); }
};

void save_state(const std::filesystem::path& path, const model::RetroConfig& mcfg,
                const TrainState& state);
TrainState load_state(const std::filesystem::path& path, const model::RetroConfig& mcfg);

void write_loss_csv(const std::filesystem::path& path, std::span<const float> losses);

struct TrainOptions {
  std::filesystem::path out_dir;                   // empty: no files written
  std::optional<std::filesystem::path> resume;     // an RCK1 written by train
  std::function<void(std::size_t step, double loss)> on_step;
};

/// Next-token training with neighbors retrieved from `db` (training documents
/// only, own document excluded). Writes step-<N>.rck1, config.txt and
/// loss.csv under out_dir.
TrainState train(const model::RetroConfig& mcfg, const TrainConfig& cfg,
                 std::span<const TokenSequence> train_docs, const store::ChunkDatabase& db,
                 const TrainOptions& opts = {});

std::string checkpoint_name(std::size_t step);

}  // namespace retro::train
