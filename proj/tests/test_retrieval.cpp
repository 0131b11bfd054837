#include "doctest.h"

#include <cstring>
#include <filesystem>
#include <random>
#include <set>

#include "oracles.hpp"
#include "retro/retrieval.hpp"

using namespace retro;
using namespace retro::store;

namespace {

TokenSequence doc_of(std::uint32_t id, std::size_t n, std::uint64_t vocab_hash = 7, TokenId base = 10) {
  TokenSequence d;
  d.doc_id = id;
  d.vocab_hash = vocab_hash;
  for (std::size_t i = 0; i < n; ++i) d.tokens.push_back(base + static_cast<TokenId>(i));
  return d;
}

double norm(const std::vector<float>& v) {
  double s = 0;
  for (float x : v) s += double(x) * x;
  return std::sqrt(s);
}

}  // namespace

TEST_CASE("chunk_index") {
  CHECK(chunk_index(64, 64) == 1);
  CHECK(chunk_index(65, 64) == 2);
  CHECK(chunk_index(1, 8) == 1);
  CHECK_THROWS_WITH(chunk_index(0, 8), "positions are 1-based");
}

TEST_CASE("chunk_document padding and reconstruction") {
  ChunkingConfig cfg{8};
  CHECK(chunk_document(doc_of(1, 16), cfg).size() == 2);
  const auto c = chunk_document(doc_of(1, 9), cfg);
  REQUIRE(c.size() == 2);
  CHECK(c[1].tokens[0] == 18);
  for (std::size_t i = 1; i < 8; ++i) CHECK(c[1].tokens[i] == kPad);
  CHECK_THROWS(chunk_document(doc_of(1, 0), cfg));

  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const auto d = doc_of(2, 1 + rng() % 60);
    std::vector<TokenId> back;
    for (const auto& ch : chunk_document(d, cfg)) {
      for (auto t : ch.tokens) if (t != kPad) back.push_back(t);
    }
    CHECK(back == d.tokens);
  }
}

TEST_CASE("embed_chunk matches a scalar re-implementation") {
  const std::vector<TokenId> chunk{5, 5, 7, kPad, kPad, kPad, kPad, kPad};
  const auto e = embed_chunk(chunk, 4, 0);
  // Hand pipeline: counts {5: 2, 7: 1}, seeded hash -> (coordinate, sign).
  double acc[4] = {0, 0, 0, 0};
  const std::uint64_t salt = mix64(0);
  for (auto [tok, count] : {std::pair<std::uint64_t, double>{5, 2.0}, {7, 1.0}}) {
    const std::uint64_t h = mix64(tok ^ salt);
    acc[h % 4] += (h >> 63 ? -1.0 : 1.0) * count;
  }
  double n = 0;
  for (double a : acc) n += a * a;
  n = std::sqrt(n);
  for (int i = 0; i < 4; ++i) CHECK(e[i] == doctest::Approx(acc[i] / n).epsilon(1e-7));
}

TEST_CASE("embed_chunk is unit norm and deterministic") {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 200; ++t) {
    std::vector<TokenId> c(8);
    for (auto& x : c) x = static_cast<TokenId>(rng() % 30);
    const auto e = embed_chunk(c, 16, 9);
    CHECK(std::abs(norm(e) - 1.0) <= 1e-6);
    CHECK(embed_chunk(c, 16, 9) == e);
  }
  const auto pad = embed_chunk(std::vector<TokenId>(8, kPad), 4, 1);
  CHECK(pad == std::vector<float>{1, 0, 0, 0});
}

TEST_CASE("build_database pairs and append semantics") {
  ChunkingConfig cfg{8};
  const std::vector<TokenSequence> one{doc_of(1, 24)};
  const auto db = build_database(one, cfg, 16, 3);
  REQUIRE(db.size() == 3);
  const auto p2 = db.pair_tokens(1);
  for (std::size_t i = 0; i < 8; ++i) {
    CHECK(p2[i] == 18 + i);
    CHECK(p2[8 + i] == 26 + i);
  }
  const auto p3 = db.pair_tokens(2);
  for (std::size_t i = 0; i < 8; ++i) CHECK(p3[8 + i] == kPad);

  const auto f = build_database(std::vector<TokenSequence>{doc_of(4, 8)}, cfg, 16, 3);
  for (auto t : f.pair_tokens(0).subspan(8)) CHECK(t == kPad);

  const std::vector<TokenSequence> train{doc_of(1, 20), doc_of(2, 30)};
  std::vector<TokenSequence> all = train;
  all.push_back(doc_of(3, 17));
  const auto a = build_database(train, cfg, 16, 3), b = build_database(all, cfg, 16, 3);
  REQUIRE(b.size() == a.size() + 3);
  CHECK(std::equal(a.tokens.begin(), a.tokens.end(), b.tokens.begin()));
  CHECK(std::equal(a.embeddings.begin(), a.embeddings.end(), b.embeddings.begin()));

  std::vector<TokenSequence> mixed{doc_of(1, 8, 7), doc_of(2, 8, 8)};
  CHECK_THROWS(build_database(mixed, cfg, 16, 3));
}

TEST_CASE("10,000 chunks give a 10,000 x 64 unit-norm matrix") {
  std::vector<TokenSequence> docs;
  std::mt19937_64 rng(8);
  for (std::uint32_t i = 0; i < 1000; ++i) {
    TokenSequence d;
    d.doc_id = i;
    for (int t = 0; t < 80; ++t) d.tokens.push_back(static_cast<TokenId>(4 + rng() % 200));
    docs.push_back(d);
  }
  const auto db = build_database(docs, ChunkingConfig{8}, 64, 1);
  REQUIRE(db.size() == 10000);
  CHECK(db.embeddings.size() == 10000u * 64u);
  for (std::size_t i = 0; i < db.size(); ++i) {
    double s = 0;
    for (float x : db.embedding(i)) s += double(x) * x;
    REQUIRE(std::abs(std::sqrt(s) - 1.0) <= 1e-6);
  }
}

TEST_CASE("database save/load is byte stable") {
  const auto db = build_database(std::vector<TokenSequence>{doc_of(1, 20), doc_of(2, 13)}, ChunkingConfig{4}, 8, 2);
  const auto dir = std::filesystem::temp_directory_path();
  db.save(dir / "retro_t1.rdb");
  const auto back = ChunkDatabase::load(dir / "retro_t1.rdb");
  back.save(dir / "retro_t2.rdb");
  CHECK(back.tokens == db.tokens);
  CHECK(back.embeddings == db.embeddings);
  CHECK(back.embed_seed == db.embed_seed);
  const auto ivf = build_ivf(db, 2, 3, 1);
  ivf.save(dir / "retro_t3.rdb");
  const auto back_ivf = ChunkDatabase::load(dir / "retro_t3.rdb");
  REQUIRE(back_ivf.ivf);
  CHECK(back_ivf.ivf->lists == ivf.ivf->lists);
}

TEST_CASE("retrieve_neighbors examples") {
  ChunkDatabase db;
  db.m = 2;
  db.d = 2;
  db.embeddings = {1, 0, 0, 1};
  db.doc_ids = {10, 11};
  db.tokens = {4, 5, 6, 7, 8, 9, 10, 11};
  const float nx = 0.9f / std::sqrt(0.82f), ny = 0.1f / std::sqrt(0.82f);
  RetrievalConfig cfg;
  cfg.k = 1;
  CHECK(search(db, std::vector<float>{nx, ny}, 99, cfg) == std::vector<std::int64_t>{0});
  // Nearest pair shares the query document: the next one is returned.
  CHECK(search(db, std::vector<float>{nx, ny}, 10, cfg) == std::vector<std::int64_t>{1});
  cfg.k = 3;
  CHECK(search(db, std::vector<float>{nx, ny}, 10, cfg) == std::vector<std::int64_t>{1, -1, -1});
  const auto sentinel = materialize(db, -1);
  CHECK(!sentinel.valid());
  CHECK(sentinel.tokens == std::vector<TokenId>(4, kPad));
  ChunkDatabase empty;
  empty.m = 2;
  empty.d = 2;
  CHECK_THROWS(search(empty, std::vector<float>{1, 0}, 0, cfg));
}

TEST_CASE("exact search equals a brute-force scan on 200 random databases") {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng() % 5000;
    auto db = oracle::random_db(rng, n, 32, 4, 1 + static_cast<std::uint32_t>(rng() % 40));
    RetrievalConfig cfg;
    cfg.k = 1 + rng() % 4;
    cfg.exclude_same_doc = rng() % 4 != 0;
    for (int q = 0; q < 5; ++q) {
      std::vector<float> key;
      if (q % 2) {
        const auto row = db.embedding(rng() % n);
        key.assign(row.begin(), row.end());
      } else {
        key = embed_chunk(std::vector<TokenId>{static_cast<TokenId>(5 + rng() % 100), 9, 11, 13}, 32, rng());
      }
      const auto doc = static_cast<std::uint32_t>(rng() % 40);
      const auto got = search(db, key, doc, cfg);
      REQUIRE(got == oracle::brute_knn(db, key, doc, cfg.k, cfg.exclude_same_doc));
      for (auto i : got) {
        if (i >= 0 && cfg.exclude_same_doc) REQUIRE(db.doc_ids[i] != doc);
      }
    }
  }
}

TEST_CASE("build_ivf partitions and recovers clusters") {
  std::mt19937_64 rng(4);
  auto db = oracle::random_db(rng, 300, 16, 4, 10);
  const auto one = build_ivf(db, 1, 3, 1);
  REQUIRE(one.ivf->lists.size() == 1);
  CHECK(one.ivf->lists[0].size() == 300);

  const auto many = build_ivf(db, 17, 5, 2);
  std::vector<int> seen(300, 0);
  for (const auto& l : many.ivf->lists) for (auto i : l) ++seen[i];
  CHECK(std::all_of(seen.begin(), seen.end(), [](int c) { return c == 1; }));
  CHECK_THROWS(build_ivf(db, 0, 3, 1));
  CHECK_THROWS(build_ivf(db, 301, 3, 1));

  // Two tight clusters around orthogonal directions.
  ChunkDatabase two;
  two.m = 2;
  two.d = 4;
  std::set<std::uint32_t> truth_a;
  std::normal_distribution<float> noise(0, 0.01f);
  for (std::uint32_t i = 0; i < 20; ++i) {
    const bool a = (i * 7) % 3 == 0;
    std::vector<float> v{a ? 1.f : 0.f, a ? 0.f : 1.f, noise(rng), noise(rng)};
    const auto n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2] + v[3] * v[3]);
    for (auto& x : v) two.embeddings.push_back(x / n);
    two.doc_ids.push_back(i);
    two.tokens.insert(two.tokens.end(), 4, 5);
    if (a) truth_a.insert(i);
  }
  const auto ivf = build_ivf(two, 2, 10, 3);
  const auto& lists = ivf.ivf->lists;
  REQUIRE(lists.size() == 2);
  const std::set<std::uint32_t> l0(lists[0].begin(), lists[0].end()), l1(lists[1].begin(), lists[1].end());
  CHECK((l0 == truth_a || l1 == truth_a));
  CHECK(l0.size() + l1.size() == 20);
}

TEST_CASE("IVF with every list probed equals exact; recall grows with nprobe") {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 200 + rng() % 2000;
    const std::size_t lists = 2 + rng() % 30;
    const auto db = build_ivf(oracle::random_db(rng, n, 32, 4, 25), lists, 5, rng());
    RetrievalConfig exact;
    exact.k = 2;
    for (int q = 0; q < 10; ++q) {
      const auto row = db.embedding(rng() % n);
      const std::vector<float> key(row.begin(), row.end());
      const auto truth = search(db, key, 1000, exact);
      double last = -1;
      for (std::size_t p = 1; p <= lists; ++p) {
        RetrievalConfig c = exact;
        c.mode = SearchMode::ivf;
        c.nprobe = p;
        const auto got = search(db, key, 1000, c);
        double hit = 0;
        for (auto t : truth) hit += std::count(got.begin(), got.end(), t) ? 1 : 0;
        const double recall = hit / double(truth.size());
        REQUIRE(recall >= last);
        last = recall;
        if (p == lists) REQUIRE(got == truth);
      }
      REQUIRE(last == 1.0);
    }
  }
}

TEST_CASE("retrieve_for_sequence covers chunks 1 .. ceil(len/m) - 1") {
  const std::vector<TokenSequence> docs{doc_of(1, 40, 7, 10), doc_of(2, 40, 7, 12)};
  const auto db = build_database(docs, ChunkingConfig{8}, 16, 1);
  RetrievalConfig cfg;
  CHECK(retrieve_for_sequence(db, docs[0].tokens, 1, cfg).size() == 4);
  CHECK(retrieve_for_sequence(db, std::span(docs[0].tokens).first(8), 1, cfg).empty());
  CHECK(retrieve_for_sequence(db, std::span(docs[0].tokens).first(9), 1, cfg).size() == 1);
  for (const auto& e : retrieve_for_sequence(db, docs[0].tokens, 1, cfg)) {
    for (auto i : e) CHECK((i < 0 || db.doc_ids[i] != 1));
  }
}

TEST_CASE("serial and parallel distance kernels agree bit for bit") {
  std::mt19937_64 rng(9);
  std::normal_distribution<float> normal;
  for (std::size_t n : {1, 7, 1000, 70000}) {
    const std::size_t d = 1 + rng() % 130;
    std::vector<float> rows(n * d), q(d), a(n), b(n);
    for (auto& x : rows) x = normal(rng);
    for (auto& x : q) x = normal(rng);
    kernels::serial::sq_distances(n, d, q.data(), rows.data(), a.data());
    kernels::parallel::sq_distances(n, d, q.data(), rows.data(), b.data());
    CHECK(std::memcmp(a.data(), b.data(), n * sizeof(float)) == 0);
    for (std::size_t i = 0; i < std::min<std::size_t>(n, 50); ++i) {
      double ref = 0;
      for (std::size_t j = 0; j < d; ++j) ref += (double(q[j]) - rows[i * d + j]) * (double(q[j]) - rows[i * d + j]);
      CHECK(a[i] == doctest::Approx(ref).epsilon(1e-5));
    }
  }
}
