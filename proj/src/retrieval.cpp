#include "retro/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "retro/binary_io.hpp"
#include "retro/kernels.hpp"

namespace retro::store {

void ChunkingConfig::validate() const {
  if (m < 2) throw std::invalid_argument("chunk size m must be at least 2");
}

void RetrievalConfig::validate() const {
  if (k < 1) throw std::invalid_argument("k must be at least 1");
  if (mode == SearchMode::ivf && nprobe < 1) {
    throw std::invalid_argument("nprobe must be at least 1");
  }
}

std::size_t chunk_index(std::size_t i, std::size_t m) {
  if (i == 0) throw std::invalid_argument("positions are 1-based");
  if (m == 0) throw std::invalid_argument("chunk size must be positive");
  return (i + m - 1) / m;
}

std::vector<Chunk> chunk_document(const TokenSequence& doc, const ChunkingConfig& cfg) {
  cfg.validate();
  if (doc.tokens.empty()) throw std::invalid_argument("cannot chunk an empty document");
  const std::size_t m = cfg.m;
  const std::size_t n = (doc.tokens.size() + m - 1) / m;
  std::vector<Chunk> chunks(n);
  for (std::size_t j = 0; j < n; ++j) {
    auto& c = chunks[j];
    c.doc_id = doc.doc_id;
    c.chunk_index_in_doc = static_cast<std::uint32_t>(j);
    c.tokens.assign(m, kPad);
    const std::size_t begin = j * m;
    const std::size_t end = std::min(begin + m, doc.tokens.size());
    std::copy(doc.tokens.begin() + begin, doc.tokens.begin() + end, c.tokens.begin());
  }
  return chunks;
}

std::vector<float> embed_chunk(std::span<const TokenId> tokens, std::size_t d,
                               std::uint64_t seed) {
  if (d < 2) throw std::invalid_argument("embedding dimension must be at least 2");
  std::vector<double> acc(d, 0.0);
  const std::uint64_t salt = mix64(seed);
  for (TokenId t : tokens) {
    if (t == kPad) continue;
    const std::uint64_t h = mix64(std::uint64_t{t} ^ salt);
    acc[h % d] += (h >> 63) ? -1.0 : 1.0;
  }
  double sq = 0;
  for (double v : acc) sq += v * v;
  std::vector<float> out(d, 0.0f);
  if (sq == 0) {
    out[0] = 1.0f;
    return out;
  }
  const double inv = 1.0 / std::sqrt(sq);
  for (std::size_t i = 0; i < d; ++i) out[i] = static_cast<float>(acc[i] * inv);
  return out;
}

std::vector<std::uint32_t> ChunkDatabase::doc_set() const {
  std::vector<std::uint32_t> ids(doc_ids);
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  return ids;
}

ChunkDatabase build_database(std::span<const TokenSequence> docs, const ChunkingConfig& cfg,
                             std::size_t d, std::uint64_t seed) {
  cfg.validate();
  if (docs.empty()) throw std::invalid_argument("cannot build a database from an empty corpus");
  for (const auto& doc : docs) {
    if (doc.vocab_hash != docs.front().vocab_hash) {
      throw std::invalid_argument("vocab mismatch between documents " +
                                  std::to_string(docs.front().doc_id) + " and " +
                                  std::to_string(doc.doc_id));
    }
    if (doc.tokens.empty()) {
      throw std::invalid_argument("document " + std::to_string(doc.doc_id) + " is empty");
    }
  }
  const std::size_t m = cfg.m, width = 2 * m;
  std::vector<std::size_t> first(docs.size() + 1, 0);
  for (std::size_t i = 0; i < docs.size(); ++i) {
    first[i + 1] = first[i] + (docs[i].tokens.size() + m - 1) / m;
  }
  const std::size_t total = first.back();

  ChunkDatabase db;
  db.m = m;
  db.d = d;
  db.vocab_hash = docs.front().vocab_hash;
  db.embed_seed = seed;
  db.tokens.assign(total * width, kPad);
  db.doc_ids.resize(total);
  db.embeddings.resize(total * d);

  const auto n_docs = static_cast<std::ptrdiff_t>(docs.size());
#pragma omp parallel for schedule(dynamic, 8)
  for (std::ptrdiff_t si = 0; si < n_docs; ++si) {
    const auto i = static_cast<std::size_t>(si);
    const auto chunks = chunk_document(docs[i], cfg);
    for (std::size_t j = 0; j < chunks.size(); ++j) {
      const std::size_t row = first[i] + j;
      TokenId* dst = db.tokens.data() + row * width;
      std::copy(chunks[j].tokens.begin(), chunks[j].tokens.end(), dst);
      if (j + 1 < chunks.size()) {
        std::copy(chunks[j + 1].tokens.begin(), chunks[j + 1].tokens.end(), dst + m);
      }
      db.doc_ids[row] = docs[i].doc_id;
      const auto e = embed_chunk(chunks[j].tokens, d, seed);
      std::copy(e.begin(), e.end(), db.embeddings.begin() + static_cast<std::ptrdiff_t>(row * d));
    }
  }
  return db;
}

namespace {

struct Ranked {
  float dist;
  std::uint32_t index;
  bool operator<(const Ranked& o) const {
    return dist < o.dist || (dist == o.dist && index < o.index);
  }
};

// Keeps the k best candidates in ascending order.
class TopK {
 public:
  explicit TopK(std::size_t k) : k_(k) { best_.reserve(k + 1); }
  void offer(Ranked r) {
    if (best_.size() == k_ && !(r < best_.back())) return;
    best_.insert(std::upper_bound(best_.begin(), best_.end(), r), r);
    if (best_.size() > k_) best_.pop_back();
  }
  const std::vector<Ranked>& items() const { return best_; }

 private:
  std::size_t k_;
  std::vector<Ranked> best_;
};

std::size_t nearest_centroid(const float* x, const std::vector<float>& centroids,
                             std::size_t n_centroids, std::size_t d) {
  std::size_t best = 0;
  float best_dist = std::numeric_limits<float>::infinity();
  for (std::size_t c = 0; c < n_centroids; ++c) {
    const float dist = kernels::sq_distance(d, x, centroids.data() + c * d);
    if (dist < best_dist) {
      best_dist = dist;
      best = c;
    }
  }
  return best;
}

}  // namespace

ChunkDatabase build_ivf(ChunkDatabase db, std::size_t n_centroids, std::size_t iters,
                        std::uint64_t seed) {
  if (n_centroids == 0) throw std::invalid_argument("n_centroids must be positive");
  const std::size_t n = db.size(), d = db.d;
  if (n_centroids > n) {
    throw std::invalid_argument("n_centroids exceeds the number of pairs");
  }
  // Partial Fisher-Yates over row indices for the initial centroids.
  std::mt19937_64 rng(seed);
  std::vector<std::uint32_t> order(n);
  std::iota(order.begin(), order.end(), 0u);
  for (std::size_t i = 0; i < n_centroids; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng() % (n - i));
    std::swap(order[i], order[j]);
  }
  IvfIndex index;
  index.centroids.resize(n_centroids * d);
  for (std::size_t c = 0; c < n_centroids; ++c) {
    const auto row = db.embedding(order[c]);
    std::copy(row.begin(), row.end(), index.centroids.begin() + static_cast<std::ptrdiff_t>(c * d));
  }

  std::vector<std::uint32_t> assign(n, 0);
  const auto assign_all = [&] {
    const auto count = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t si = 0; si < count; ++si) {
      const auto i = static_cast<std::size_t>(si);
      assign[i] = static_cast<std::uint32_t>(
          nearest_centroid(db.embeddings.data() + i * d, index.centroids, n_centroids, d));
    }
  };
  for (std::size_t it = 0; it < iters; ++it) {
    assign_all();
    std::vector<double> sums(n_centroids * d, 0.0);
    std::vector<std::size_t> counts(n_centroids, 0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto row = db.embedding(i);
      double* s = sums.data() + assign[i] * d;
      for (std::size_t j = 0; j < d; ++j) s[j] += row[j];
      ++counts[assign[i]];
    }
    for (std::size_t c = 0; c < n_centroids; ++c) {
      if (counts[c] == 0) continue;  // empty cluster keeps its centroid
      for (std::size_t j = 0; j < d; ++j) {
        index.centroids[c * d + j] = static_cast<float>(sums[c * d + j] / double(counts[c]));
      }
    }
  }
  assign_all();
  index.lists.assign(n_centroids, {});
  for (std::size_t i = 0; i < n; ++i) index.lists[assign[i]].push_back(static_cast<std::uint32_t>(i));
  db.ivf = std::move(index);
  return db;
}

std::vector<std::int64_t> search(const ChunkDatabase& db, std::span<const float> key,
                                 std::uint32_t query_doc, const RetrievalConfig& cfg) {
  cfg.validate();
  if (db.size() == 0) throw std::invalid_argument("empty database");
  if (key.size() != db.d) throw std::invalid_argument("query embedding has wrong dimension");
  TopK top(cfg.k);
  const auto keep = [&](std::size_t i) {
    return !(cfg.exclude_same_doc && db.doc_ids[i] == query_doc);
  };
  if (cfg.mode == SearchMode::exact) {
    std::vector<float> dist(db.size());
    kernels::parallel::sq_distances(db.size(), db.d, key.data(), db.embeddings.data(),
                                    dist.data());
    for (std::size_t i = 0; i < db.size(); ++i) {
      if (keep(i)) top.offer({dist[i], static_cast<std::uint32_t>(i)});
    }
  } else {
    if (!db.ivf) throw std::invalid_argument("database has no IVF index");
    const auto& ivf = *db.ivf;
    const std::size_t lists = ivf.size();
    std::vector<float> cdist(lists);
    kernels::serial::sq_distances(lists, db.d, key.data(), ivf.centroids.data(), cdist.data());
    TopK probes(std::min(cfg.nprobe, lists));
    for (std::size_t c = 0; c < lists; ++c) probes.offer({cdist[c], static_cast<std::uint32_t>(c)});
    for (const auto& p : probes.items()) {
      for (std::uint32_t i : ivf.lists[p.index]) {
        if (keep(i)) top.offer({kernels::sq_distance(db.d, key.data(), db.embedding(i).data()), i});
      }
    }
  }
  std::vector<std::int64_t> out;
  for (const auto& r : top.items()) out.push_back(r.index);
  out.resize(cfg.k, -1);
  return out;
}

NeighborPair materialize(const ChunkDatabase& db, std::int64_t index) {
  NeighborPair p;
  p.index = index;
  if (index < 0) {
    p.tokens.assign(2 * db.m, kPad);
    return p;
  }
  const auto i = static_cast<std::size_t>(index);
  p.doc_id = db.doc_ids.at(i);
  const auto t = db.pair_tokens(i);
  p.tokens.assign(t.begin(), t.end());
  return p;
}

std::vector<NeighborPair> retrieve_neighbors(const ChunkDatabase& db, const Chunk& query,
                                             const RetrievalConfig& cfg) {
  if (query.tokens.size() != db.m) {
    throw std::invalid_argument("query chunk length differs from database chunk size");
  }
  const auto key = embed_chunk(query.tokens, db.d, db.embed_seed);
  std::vector<NeighborPair> out;
  for (auto idx : search(db, key, query.doc_id, cfg)) {
    auto p = materialize(db, idx);
    if (p.valid()) {
      p.distance = kernels::sq_distance(db.d, key.data(), db.embedding(idx).data());
    }
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<std::vector<std::int64_t>> retrieve_for_sequence(const ChunkDatabase& db,
                                                             std::span<const TokenId> seq,
                                                             std::uint32_t doc_id,
                                                             const RetrievalConfig& cfg) {
  const std::size_t m = db.m;
  const std::size_t chunks = (seq.size() + m - 1) / m;
  std::vector<std::vector<std::int64_t>> out;
  for (std::size_t u = 1; u < chunks; ++u) {
    const auto key = embed_chunk(seq.subspan((u - 1) * m, m), db.d, db.embed_seed);
    out.push_back(search(db, key, doc_id, cfg));
  }
  return out;
}

// ---------------------------------------------------------------------------
// RDB1 file

void ChunkDatabase::save(const std::filesystem::path& path) const {
  io::Writer w;
  w.put_bytes("RDB1");
  w.put<std::uint64_t>(m);
  w.put<std::uint64_t>(d);
  w.put<std::uint64_t>(size());
  w.put<std::uint64_t>(vocab_hash);
  w.put<std::uint64_t>(embed_seed);
  w.put_span(std::span<const TokenId>(tokens));
  w.put_span(std::span<const std::uint32_t>(doc_ids));
  w.put_span(std::span<const float>(embeddings));
  if (ivf) {
    w.put_bytes("IVF1");
    w.put<std::uint64_t>(ivf->size());
    w.put_span(std::span<const float>(ivf->centroids));
    for (const auto& list : ivf->lists) {
      w.put<std::uint64_t>(list.size());
      w.put_span(std::span<const std::uint32_t>(list));
    }
  }
  w.commit(path);
}

ChunkDatabase ChunkDatabase::load(const std::filesystem::path& path) {
  io::Reader r(path);
  if (r.get_bytes(4) != "RDB1") throw std::runtime_error(path.string() + ": not an RDB1 database");
  ChunkDatabase db;
  db.m = r.get<std::uint64_t>();
  db.d = r.get<std::uint64_t>();
  const auto n = r.get<std::uint64_t>();
  db.vocab_hash = r.get<std::uint64_t>();
  db.embed_seed = r.get<std::uint64_t>();
  db.tokens = r.get_vector<TokenId>(n * 2 * db.m);
  db.doc_ids = r.get_vector<std::uint32_t>(n);
  db.embeddings = r.get_vector<float>(n * db.d);
  if (!r.at_end()) {
    if (r.get_bytes(4) != "IVF1") throw std::runtime_error(path.string() + ": unknown trailing section");
    IvfIndex ivf;
    const auto lists = r.get<std::uint64_t>();
    ivf.centroids = r.get_vector<float>(lists * db.d);
    for (std::uint64_t c = 0; c < lists; ++c) {
      ivf.lists.push_back(r.get_vector<std::uint32_t>(r.get<std::uint64_t>()));
    }
    db.ivf = std::move(ivf);
  }
  return db;
}

}  // namespace retro::store
