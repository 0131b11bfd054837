#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "retro/model.hpp"

namespace retro::eval {

struct TokenLossRecord {
  std::uint32_t doc_id = 0;
  std::uint32_t pos = 0;  // 1-based position i of the scored token x_i
  TokenId token = 0;
  Category category = Category::synthetic;
  double loss_on = 0;
  double loss_off = 0;
  std::uint32_t bucket = 0;
  double delta = 0;  // loss_off - loss_on
};

/// Longest n such that x_{i-n+1..i} occurs contiguously in one of the
/// neighbors, capped at i and at the neighbor length. `i` is 1-based; tokens
/// of chunk 1 always get 0.
std::size_t overlap_bucket(std::span<const TokenId> seq, std::size_t i,
                           std::span<const std::span<const TokenId>> neighbors, std::size_t m);

/// Scores every non-PAD target token of each validation document with
/// retrieval on and off. Neighbors come from `db` (which must hold the
/// validation documents) with the query's own document excluded. Records are
/// ordered by (doc order, position) and carry their overlap bucket.
std::vector<TokenLossRecord> evaluate(const model::ModelParams<float>& params,
                                      const model::RetroConfig& cfg,
                                      const store::ChunkDatabase& db,
                                      std::span<const TokenSequence> val_docs);

std::map<std::size_t, double> bucket_mean_loss(std::span<const TokenLossRecord> records);

struct DeltaSums {
  double positive = 0;
  double negative = 0;
  double total = 0;  // positive + negative
};
std::map<std::size_t, DeltaSums> delta_decomposition(std::span<const TokenLossRecord> records);

std::map<std::size_t, std::size_t> bucket_histogram(std::span<const TokenLossRecord> records);

struct BucketRow {
  std::size_t n = 0;
  std::size_t count = 0;
  double mean_loss_on = 0;
  DeltaSums delta;
};
std::vector<BucketRow> bucket_report(std::span<const TokenLossRecord> records);

struct CategoryRow {
  Category category = Category::synthetic;
  std::size_t count = 0;
  double mean_loss_on = 0;
  double mean_loss_off = 0;
};
std::vector<CategoryRow> category_report(std::span<const TokenLossRecord> records);

struct Summary {
  std::size_t tokens = 0;
  double mean_loss_on = 0;
  double mean_loss_off = 0;
  double sum_loss_on = 0;
  double sum_loss_off = 0;
  double sum_delta = 0;
};
Summary summarize(std::span<const TokenLossRecord> records);

/// Loss in nats per token to bits per UTF-8 byte.
double bits_per_byte(double total_nats, std::size_t bytes);

void write_records(const std::filesystem::path& path, std::span<const TokenLossRecord> records);
std::vector<TokenLossRecord> read_records(const std::filesystem::path& path);
void write_bucket_report(const std::filesystem::path& path, std::span<const BucketRow> rows);
void write_category_report(const std::filesystem::path& path, std::span<const CategoryRow> rows);

/// Shortest decimal text that parses back to the same double.
std::string format_double(double v);

}  // namespace retro::eval
