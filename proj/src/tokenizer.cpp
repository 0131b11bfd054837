#include "retro/tokenizer.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>
#include <unordered_map>

namespace retro::tok {
namespace {

constexpr TokenId kFirstMerge = kNumSpecial + 256;

std::vector<TokenId> bytes_to_ids(std::string_view text) {
  std::vector<TokenId> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(kByteBase + c);
  return ids;
}

// Replaces every non-overlapping (left, right) occurrence, scanning left to
// right, with `merged`. Returns the number of replacements.
std::size_t apply_merge(std::vector<TokenId>& seq, TokenId left, TokenId right,
                        TokenId merged) {
  if (seq.size() < 2) return 0;
  std::size_t out = 0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < seq.size();) {
    if (i + 1 < seq.size() && seq[i] == left && seq[i + 1] == right) {
      seq[out++] = merged;
      i += 2;
      ++hits;
    } else {
      seq[out++] = seq[i++];
    }
  }
  seq.resize(out);
  return hits;
}

std::uint64_t pair_key(TokenId a, TokenId b) {
  return (static_cast<std::uint64_t>(a) << 32) | b;
}

}  // namespace

Vocab::Vocab() : Vocab(std::vector<Merge>{}) {}

Vocab::Vocab(std::vector<Merge> merges) : merges_(std::move(merges)) {
  pieces_.resize(kNumSpecial);
  for (int b = 0; b < 256; ++b) pieces_.emplace_back(1, static_cast<char>(b));
  for (std::size_t j = 0; j < merges_.size(); ++j) {
    const auto [l, r] = merges_[j];
    const TokenId next = kFirstMerge + static_cast<TokenId>(j);
    if (l >= next || r >= next || l < kByteBase || r < kByteBase) {
      throw std::invalid_argument("merge " + std::to_string(j) +
                                  " refers to an undefined symbol");
    }
    pieces_.push_back(pieces_[l] + pieces_[r]);
  }
}

const std::string& Vocab::bytes_of(TokenId id) const {
  if (id >= size()) throw std::out_of_range("invalid token id");
  return pieces_[id];
}

std::string Vocab::serialize() const {
  std::string out = "bytebpe v1 " + std::to_string(size()) + "\n";
  for (const auto& [l, r] : merges_) {
    out += std::to_string(l);
    out += ' ';
    out += std::to_string(r);
    out += '\n';
  }
  return out;
}

Vocab Vocab::parse(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string magic, version;
  std::size_t size = 0;
  if (!(in >> magic >> version >> size) || magic != "bytebpe" ||
      version != "v1") {
    throw std::runtime_error("not a bytebpe v1 vocab");
  }
  std::vector<Merge> merges;
  TokenId l = 0, r = 0;
  while (in >> l >> r) merges.emplace_back(l, r);
  if (!in.eof()) throw std::runtime_error("malformed merge line in vocab");
  Vocab v(std::move(merges));
  if (v.size() != size) {
    throw std::runtime_error("vocab header size " + std::to_string(size) +
                             " disagrees with " + std::to_string(v.size()) +
                             " entries");
  }
  return v;
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << serialize();
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read vocab " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

Vocab train_bpe(std::span<const std::string> corpus, std::size_t target_size) {
  if (corpus.empty()) throw std::invalid_argument("empty corpus");
  if (target_size < kFirstMerge) {
    throw std::invalid_argument("target_size must be at least 260");
  }
  std::vector<std::vector<TokenId>> seqs;
  seqs.reserve(corpus.size());
  for (const auto& text : corpus) seqs.push_back(bytes_to_ids(text));

  std::vector<Vocab::Merge> merges;
  std::unordered_map<std::uint64_t, std::size_t> counts;
  while (kFirstMerge + merges.size() < target_size) {
    counts.clear();
    for (const auto& s : seqs) {
      for (std::size_t i = 0; i + 1 < s.size(); ++i) {
        ++counts[pair_key(s[i], s[i + 1])];
      }
    }
    std::uint64_t best = 0;
    std::size_t best_count = 0;
    for (const auto& [key, n] : counts) {
      if (n > best_count || (n == best_count && key < best)) {
        best = key;
        best_count = n;
      }
    }
    if (best_count == 0) {
      throw std::runtime_error("corpus too small for target vocab size " +
                               std::to_string(target_size));
    }
    const auto left = static_cast<TokenId>(best >> 32);
    const auto right = static_cast<TokenId>(best & 0xffffffffULL);
    const auto merged = kFirstMerge + static_cast<TokenId>(merges.size());
    for (auto& s : seqs) apply_merge(s, left, right, merged);
    merges.emplace_back(left, right);
  }
  return Vocab(std::move(merges));
}

std::vector<TokenId> encode(const Vocab& v, std::string_view text) {
  auto seq = bytes_to_ids(text);
  const auto& merges = v.merges();
  for (std::size_t j = 0; j < merges.size() && seq.size() > 1; ++j) {
    apply_merge(seq, merges[j].first, merges[j].second,
                kFirstMerge + static_cast<TokenId>(j));
  }
  return seq;
}

std::string decode(const Vocab& v, std::span<const TokenId> tokens) {
  std::string out;
  for (TokenId id : tokens) out += v.bytes_of(id);
  return out;
}

}  // namespace retro::tok
