#include "doctest.h"

#include <random>

#include "retro/corpus.hpp"
#include "retro/tokenizer.hpp"

using namespace retro;

TEST_CASE("train_bpe picks the most frequent pair") {
  const std::vector<std::string> corpus{"aa aa aa"};
  const auto v = tok::train_bpe(corpus, 261);
  REQUIRE(v.merges().size() == 1);
  const TokenId a = 'a' + kByteBase;
  CHECK(v.merges()[0] == tok::Vocab::Merge{a, a});
  CHECK(v.size() == 261);
}

TEST_CASE("train_bpe with no merge budget is byte-level") {
  const std::vector<std::string> corpus{"hello", "world"};
  CHECK(tok::train_bpe(corpus, 260).merges().empty());
}

TEST_CASE("train_bpe rejects bad input") {
  CHECK_THROWS_WITH(tok::train_bpe(std::vector<std::string>{}, 300), "empty corpus");
  CHECK_THROWS(tok::train_bpe(std::vector<std::string>{"abc"}, 259));
}

TEST_CASE("train_bpe reaches the exact target size") {
  std::vector<std::string> corpus;
  for (int i = 0; i < 50; ++i) corpus.push_back("the quick brown fox " + std::to_string(i));
  const auto v = tok::train_bpe(corpus, 300);
  CHECK(v.size() == 300);
  CHECK(tok::train_bpe(corpus, 300).serialize() == v.serialize());
}

TEST_CASE("encode examples") {
  const tok::Vocab bytes;
  CHECK(tok::encode(bytes, "ab") == std::vector<TokenId>{97 + 4, 98 + 4});
  CHECK(tok::encode(bytes, "").empty());
  const TokenId a = 'a' + kByteBase;
  const tok::Vocab aa({{a, a}});
  CHECK(tok::encode(aa, "aaa") == std::vector<TokenId>{260, a});
}

TEST_CASE("decode examples") {
  const tok::Vocab v;
  CHECK(tok::decode(v, tok::encode(v, "hello world")) == "hello world");
  CHECK(tok::decode(v, std::vector<TokenId>{kPad, kPad}).empty());
  CHECK_THROWS_WITH(tok::decode(v, std::vector<TokenId>{static_cast<TokenId>(v.size())}), "invalid token id");
}

TEST_CASE("round trip on 1000 random strings") {
  std::vector<std::string> corpus;
  for (int i = 0; i < 20; ++i) {
    corpus.push_back("lorem ipsum dolor sit amet " + std::to_string(i));
    corpus.push_back("consectetur adipiscing elit \xc3\xa9t\xc3\xa9");
  }
  const auto v = tok::train_bpe(corpus, 300);
  std::mt19937_64 rng(11);
  // Mix of ASCII, multi-byte UTF-8 and raw bytes (byte fallback covers all 256).
  const std::vector<std::string> pieces{"a", "b", " ", "lo", "rem", "\xc3\xa9", "\xe2\x82\xac",
                                        "\xf0\x9f\x98\x80", "\n", "\t", "ipsum"};
  for (int n = 0; n < 1000; ++n) {
    std::string s;
    const int len = int(rng() % 40);
    for (int i = 0; i < len; ++i) {
      if (rng() % 5 == 0) s += static_cast<char>(rng() % 256);
      else s += pieces[rng() % pieces.size()];
    }
    const auto ids = tok::encode(v, s);
    for (auto id : ids) REQUIRE(id < v.size());
    REQUIRE(tok::decode(v, ids) == s);
  }
}

TEST_CASE("every byte has its own id") {
  const tok::Vocab v;
  for (int b = 0; b < 256; ++b) {
    const std::string s(1, static_cast<char>(b));
    CHECK(tok::encode(v, s) == std::vector<TokenId>{static_cast<TokenId>(b + kByteBase)});
  }
}

TEST_CASE("vocab serialization round trip") {
  const std::vector<std::string> corpus{"abab abab cdcd", "abcd"};
  const auto v = tok::train_bpe(corpus, 265);
  const auto text = v.serialize();
  CHECK(text.rfind("bytebpe v1 265\n", 0) == 0);
  const auto w = tok::Vocab::parse(text);
  CHECK(w.serialize() == text);
  CHECK(w.hash() == v.hash());
  CHECK(tok::encode(w, "ababcd") == tok::encode(v, "ababcd"));
}

TEST_CASE("tokenize_corpus prepends BOS and rejects duplicate ids") {
  const tok::Vocab v;
  std::vector<RawDocument> docs{{1, "hi", Split::train, Category::web}, {2, "", Split::validation, Category::news}};
  const auto t = tokenize_corpus(v, docs);
  REQUIRE(t.size() == 2);
  CHECK(t[0].tokens == std::vector<TokenId>{kBos, 'h' + 4, 'i' + 4});
  CHECK(t[1].tokens == std::vector<TokenId>{kBos});
  CHECK(t[0].vocab_hash == v.hash());
  docs[1].id = 1;
  CHECK_THROWS(tokenize_corpus(v, docs));
}

TEST_CASE("jsonl round trip") {
  std::vector<RawDocument> docs{{3, "a \"quoted\"\nline", Split::validation, Category::code},
                                {4, "plain", Split::train, Category::books}};
  const auto path = std::filesystem::temp_directory_path() / "retro_test_docs.jsonl";
  write_jsonl(path, docs);
  const auto back = read_jsonl(path);
  REQUIRE(back.size() == 2);
  CHECK(back[0].text == docs[0].text);
  CHECK(back[0].split == Split::validation);
  CHECK(back[1].category == Category::books);
  std::filesystem::remove(path);
}
