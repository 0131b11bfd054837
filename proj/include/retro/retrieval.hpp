#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "retro/common.hpp"
#include "retro/corpus.hpp"

// Chunk key-value store: every m-token chunk N of an indexed document is keyed
// by its embedding and maps to the pair [N, F] where F is the chunk after it.

namespace retro::store {

struct ChunkingConfig {
  std::size_t m = 8;
  std::size_t neighbor_len() const { return 2 * m; }
  void validate() const;
};

struct Chunk {
  std::vector<TokenId> tokens;  // exactly m, PAD-padded at the document tail
  std::uint32_t doc_id = 0;
  std::uint32_t chunk_index_in_doc = 0;
};

/// 1-based chunk id of 1-based token position i: ceil(i / m).
std::size_t chunk_index(std::size_t i, std::size_t m);

std::vector<Chunk> chunk_document(const TokenSequence& doc, const ChunkingConfig& cfg);

/// Signed feature hashing of the non-PAD tokens followed by L2 normalization.
/// Token t lands on coordinate h % d with sign (h >> 63 ? -1 : +1), where
/// h = mix64(t ^ mix64(seed)). A chunk with no surviving mass maps to e_1.
std::vector<float> embed_chunk(std::span<const TokenId> tokens, std::size_t d,
                               std::uint64_t seed);

struct IvfIndex {
  std::vector<float> centroids;               // n_centroids x d
  std::vector<std::vector<std::uint32_t>> lists;  // ascending pair indices
  std::size_t size() const { return lists.size(); }
};

class ChunkDatabase {
 public:
  std::size_t m = 0;
  std::size_t d = 0;
  std::uint64_t vocab_hash = 0;
  std::uint64_t embed_seed = 0;
  std::vector<TokenId> tokens;         // pair_count x 2m, N then F
  std::vector<std::uint32_t> doc_ids;  // pair_count
  std::vector<float> embeddings;       // pair_count x d, row i = R(N_i)
  std::optional<IvfIndex> ivf;

  std::size_t size() const { return doc_ids.size(); }
  std::span<const TokenId> pair_tokens(std::size_t i) const {
    return {tokens.data() + i * 2 * m, 2 * m};
  }
  std::span<const float> embedding(std::size_t i) const {
    return {embeddings.data() + i * d, d};
  }
  /// Sorted, de-duplicated document ids present in the store.
  std::vector<std::uint32_t> doc_set() const;

  void save(const std::filesystem::path& path) const;
  static ChunkDatabase load(const std::filesystem::path& path);
};

/// One pair per chunk, documents in the given order. Appending documents
/// appends pairs and leaves earlier pairs untouched.
ChunkDatabase build_database(std::span<const TokenSequence> docs, const ChunkingConfig& cfg,
                             std::size_t d, std::uint64_t seed);

/// Seeded k-means (init by sampling distinct rows, fixed iteration count).
ChunkDatabase build_ivf(ChunkDatabase db, std::size_t n_centroids, std::size_t iters,
                        std::uint64_t seed);

enum class SearchMode { exact, ivf };

struct RetrievalConfig {
  std::size_t k = 2;
  bool exclude_same_doc = true;
  SearchMode mode = SearchMode::exact;
  std::size_t nprobe = 1;
  void validate() const;
};

struct NeighborPair {
  std::int64_t index = -1;  // -1 marks a sentinel all-PAD pair
  std::uint32_t doc_id = 0xffffffffu;
  float distance = 0;
  std::vector<TokenId> tokens;  // [N, F], 2m ids

  bool valid() const { return index >= 0; }
};

/// Nearest pairs by squared L2 between embeddings, ties to the lower index,
/// padded with sentinels when fewer than k survive filtering.
std::vector<NeighborPair> retrieve_neighbors(const ChunkDatabase& db, const Chunk& query,
                                             const RetrievalConfig& cfg);

/// Same ranking as retrieve_neighbors on a precomputed key; -1 marks padding.
std::vector<std::int64_t> search(const ChunkDatabase& db, std::span<const float> key,
                                 std::uint32_t query_doc, const RetrievalConfig& cfg);

NeighborPair materialize(const ChunkDatabase& db, std::int64_t index);

/// RET(C_u) for each chunk u = 1 .. ceil(len/m) - 1 of a (truncated) sequence,
/// i.e. the neighbors that condition chunks 2 .. ceil(len/m).
std::vector<std::vector<std::int64_t>> retrieve_for_sequence(const ChunkDatabase& db,
                                                             std::span<const TokenId> seq,
                                                             std::uint32_t doc_id,
                                                             const RetrievalConfig& cfg);

}  // namespace retro::store
