#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "retro/common.hpp"

namespace retro::tok {

/// Byte-level BPE vocabulary. Ids 0-3 are PAD/BOS/EOS/UNK, ids 4-259 are the
/// raw bytes, and id 260 + j is the j-th merge.
class Vocab {
 public:
  using Merge = std::pair<TokenId, TokenId>;

  Vocab();  // pure byte-level vocab, 260 entries
  explicit Vocab(std::vector<Merge> merges);

  std::size_t size() const { return kNumSpecial + 256 + merges_.size(); }
  const std::vector<Merge>& merges() const { return merges_; }

  /// Bytes a token expands to. Specials expand to the empty string.
  const std::string& bytes_of(TokenId id) const;

  std::string serialize() const;
  static Vocab parse(std::string_view text);
  void save(const std::filesystem::path& path) const;
  static Vocab load(const std::filesystem::path& path);

  std::uint64_t hash() const { return fnv1a64(serialize()); }

 private:
  std::vector<Merge> merges_;
  std::vector<std::string> pieces_;
};

/// Learns merges until the vocab has exactly target_size entries. Pair counts
/// do not cross text boundaries; ties go to the smallest (left, right) pair.
Vocab train_bpe(std::span<const std::string> corpus, std::size_t target_size);

/// Applies merges in table order, each one greedily left to right.
std::vector<TokenId> encode(const Vocab& v, std::string_view text);

std::string decode(const Vocab& v, std::span<const TokenId> tokens);

}  // namespace retro::tok
