#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "retro/common.hpp"
#include "retro/tokenizer.hpp"

namespace retro {

/// One line of the JSONL corpus.
struct RawDocument {
  std::uint32_t id = 0;
  std::string text;
  Split split = Split::train;
  Category category = Category::synthetic;
};

/// Tokenized document; tokens hold x_1..x_t with BOS at x_1.
struct TokenSequence {
  std::vector<TokenId> tokens;
  std::uint32_t doc_id = 0;
  Category category = Category::synthetic;
  Split split = Split::train;
  std::uint64_t vocab_hash = 0;
};

std::vector<RawDocument> read_jsonl(const std::filesystem::path& path);
void write_jsonl(const std::filesystem::path& path,
                 const std::vector<RawDocument>& docs);
std::string to_jsonl(const std::vector<RawDocument>& docs);

/// Tokenizes with a leading BOS. Throws on duplicate document ids.
std::vector<TokenSequence> tokenize_corpus(const tok::Vocab& vocab,
                                           const std::vector<RawDocument>& docs);

std::vector<TokenSequence> select_split(const std::vector<TokenSequence>& docs,
                                        Split split);

std::vector<std::string> texts_of_split(const std::vector<RawDocument>& docs,
                                        Split split);

}  // namespace retro
