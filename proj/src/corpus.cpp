#include "retro/corpus.hpp"

#include <array>
#include <cstdio>
#include <fstream>
#include <set>

#include <json.hpp>

namespace retro {

namespace {
constexpr std::array<std::string_view, 6> kCategoryNames = {
    "web", "wiki", "code", "books", "news", "synthetic"};
}

std::string_view to_string(Category c) {
  return kCategoryNames[static_cast<std::size_t>(c)];
}

std::string_view to_string(Split s) {
  return s == Split::train ? "train" : "validation";
}

Category parse_category(std::string_view s) {
  for (std::size_t i = 0; i < kCategoryNames.size(); ++i) {
    if (kCategoryNames[i] == s) return static_cast<Category>(i);
  }
  throw std::invalid_argument("unknown category '" + std::string(s) + "'");
}

Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "validation") return Split::validation;
  throw std::invalid_argument("unknown split '" + std::string(s) + "'");
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::vector<RawDocument> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read corpus " + path.string());
  std::vector<RawDocument> docs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      RawDocument d;
      d.id = j.at("id").get<std::uint32_t>();
      d.text = j.at("text").get<std::string>();
      d.split = parse_split(j.at("split").get<std::string>());
      d.category = parse_category(j.value("category", std::string("synthetic")));
      docs.push_back(std::move(d));
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) +
                               ": " + e.what());
    }
  }
  return docs;
}

std::string to_jsonl(const std::vector<RawDocument>& docs) {
  std::string out;
  for (const auto& d : docs) {
    nlohmann::ordered_json j;
    j["id"] = d.id;
    j["text"] = d.text;
    j["split"] = to_string(d.split);
    j["category"] = to_string(d.category);
    out += j.dump();
    out += '\n';
  }
  return out;
}

void write_jsonl(const std::filesystem::path& path,
                 const std::vector<RawDocument>& docs) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << to_jsonl(docs);
}

std::vector<TokenSequence> tokenize_corpus(const tok::Vocab& vocab,
                                           const std::vector<RawDocument>& docs) {
  std::set<std::uint32_t> seen;
  for (const auto& d : docs) {
    if (!seen.insert(d.id).second) {
      throw std::invalid_argument("duplicate document id " + std::to_string(d.id));
    }
  }
  std::vector<TokenSequence> out(docs.size());
  const auto vh = vocab.hash();
#pragma omp parallel for schedule(dynamic, 16)
  for (std::size_t i = 0; i < docs.size(); ++i) {
    auto& s = out[i];
    s.tokens.push_back(kBos);
    const auto ids = tok::encode(vocab, docs[i].text);
    s.tokens.insert(s.tokens.end(), ids.begin(), ids.end());
    s.doc_id = docs[i].id;
    s.category = docs[i].category;
    s.split = docs[i].split;
    s.vocab_hash = vh;
  }
  return out;
}

std::vector<TokenSequence> select_split(const std::vector<TokenSequence>& docs,
                                        Split split) {
  std::vector<TokenSequence> out;
  for (const auto& d : docs) {
    if (d.split == split) out.push_back(d);
  }
  return out;
}

std::vector<std::string> texts_of_split(const std::vector<RawDocument>& docs,
                                        Split split) {
  std::vector<std::string> out;
  for (const auto& d : docs) {
    if (d.split == split) out.push_back(d.text);
  }
  return out;
}

}  // namespace retro
