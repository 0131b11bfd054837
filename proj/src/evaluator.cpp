#include "retro/evaluator.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_set>

namespace retro::eval {

namespace fs = std::filesystem;

std::size_t overlap_bucket(std::span<const TokenId> seq, std::size_t i,
                           std::span<const std::span<const TokenId>> neighbors, std::size_t m) {
  if (i < 1 || i > seq.size()) throw std::out_of_range("position out of range");
  if (m == 0) throw std::invalid_argument("chunk size must be positive");
  if (i <= m) return 0;
  const std::size_t last = i - 1;  // 0-based index of x_i
  std::size_t best = 0;
  for (const auto& nb : neighbors) {
    const std::size_t cap = std::min(i, nb.size());
    // Common suffix of seq[..last] and nb[..q] for every end q; the run grows
    // leftward until a mismatch.
    for (std::size_t q = 0; q < nb.size() && best < cap; ++q) {
      if (nb[q] != seq[last]) continue;
      std::size_t n = 1;
      while (n < cap && n <= q && nb[q - n] == seq[last - n]) ++n;
      best = std::max(best, n);
    }
  }
  return best;
}

// ---------------------------------------------------------------------------

std::vector<TokenLossRecord> evaluate(const model::ModelParams<float>& params,
                                      const model::RetroConfig& cfg,
                                      const store::ChunkDatabase& db,
                                      std::span<const TokenSequence> val_docs) {
  cfg.validate();
  if (db.m != cfg.m) throw std::invalid_argument("database chunk size differs from model");
  const auto present = db.doc_set();
  const std::unordered_set<std::uint32_t> in_db(present.begin(), present.end());
  for (const auto& d : val_docs) {
    if (d.vocab_hash != db.vocab_hash) throw std::invalid_argument("vocab hash mismatch between corpus and database");
    if (!in_db.count(d.doc_id)) throw std::invalid_argument("validation pairs absent");
  }

  store::RetrievalConfig rcfg;
  rcfg.k = cfg.k;
  const std::size_t width = 2 * cfg.m;
  std::vector<std::vector<TokenLossRecord>> per_doc(val_docs.size());

#pragma omp parallel for schedule(dynamic)
  for (std::size_t di = 0; di < val_docs.size(); ++di) {
    const auto& doc = val_docs[di];
    const std::vector<TokenId> seq(doc.tokens.begin(),
                                   doc.tokens.begin() + std::min(doc.tokens.size(), cfg.max_len));
    const auto entries = store::retrieve_for_sequence(db, seq, doc.doc_id, rcfg);
    const auto nb = model::NeighborBatch::from_indices(db, entries, cfg.k);

    tensor::Tape<float> tape_on(false), tape_off(false);
    const auto on = model::forward_on(tape_on, params, cfg, seq, nb);
    const auto off = model::forward_off(tape_off, params, cfg, seq);
    const auto l_on = on.losses.values();
    const auto l_off = off.losses.values();

    auto& out = per_doc[di];
    for (std::size_t p = 0; p + 1 < seq.size(); ++p) {
      const TokenId target = seq[p + 1];
      if (target == kPad) continue;
      TokenLossRecord r;
      r.doc_id = doc.doc_id;
      r.pos = static_cast<std::uint32_t>(p + 2);
      r.token = target;
      r.category = doc.category;
      r.loss_on = l_on[p];
      r.loss_off = l_off[p];
      r.delta = r.loss_off - r.loss_on;
      // x_i sits in chunk c(i); its neighbors are RET(C_{c(i)-1}) = entry c(i) - 2.
      const std::size_t c = store::chunk_index(r.pos, cfg.m);
      std::vector<std::span<const TokenId>> spans;
      if (c >= 2) {
        const std::size_t e = c - 2;
        for (std::size_t j = 0; j < cfg.k; ++j) {
          spans.emplace_back(nb.tokens.data() + (e * cfg.k + j) * width, width);
        }
      }
      r.bucket = static_cast<std::uint32_t>(overlap_bucket(seq, r.pos, spans, cfg.m));
      out.push_back(r);
    }
  }

  std::vector<TokenLossRecord> records;
  for (auto& v : per_doc) records.insert(records.end(), v.begin(), v.end());
  return records;
}

// ---------------------------------------------------------------------------

namespace {

// Neumaier compensated sum.
struct Accum {
  double sum = 0, comp = 0;
  void add(double x) {
    const double t = sum + x;
    comp += std::abs(sum) >= std::abs(x) ? (sum - t) + x : (x - t) + sum;
    sum = t;
  }
  double value() const { return sum + comp; }
};

}  // namespace

std::map<std::size_t, double> bucket_mean_loss(std::span<const TokenLossRecord> records) {
  std::map<std::size_t, std::pair<Accum, std::size_t>> acc;
  for (const auto& r : records) {
    auto& [s, n] = acc[r.bucket];
    s.add(r.loss_on);
    ++n;
  }
  std::map<std::size_t, double> out;
  for (const auto& [b, sn] : acc) out[b] = sn.first.value() / double(sn.second);
  return out;
}

std::map<std::size_t, DeltaSums> delta_decomposition(std::span<const TokenLossRecord> records) {
  std::map<std::size_t, std::pair<Accum, Accum>> acc;
  for (const auto& r : records) {
    auto& [pos, neg] = acc[r.bucket];
    if (r.delta > 0) pos.add(r.delta);
    else neg.add(r.delta);
  }
  std::map<std::size_t, DeltaSums> out;
  for (const auto& [b, pn] : acc) {
    DeltaSums d;
    d.positive = pn.first.value();
    d.negative = pn.second.value();
    d.total = d.positive + d.negative;
    out[b] = d;
  }
  return out;
}

std::map<std::size_t, std::size_t> bucket_histogram(std::span<const TokenLossRecord> records) {
  std::map<std::size_t, std::size_t> out;
  for (const auto& r : records) ++out[r.bucket];
  return out;
}

std::vector<BucketRow> bucket_report(std::span<const TokenLossRecord> records) {
  const auto means = bucket_mean_loss(records);
  const auto deltas = delta_decomposition(records);
  std::vector<BucketRow> rows;
  for (const auto& [n, count] : bucket_histogram(records)) {
    rows.push_back({n, count, means.at(n), deltas.at(n)});
  }
  return rows;
}

std::vector<CategoryRow> category_report(std::span<const TokenLossRecord> records) {
  std::map<Category, std::tuple<Accum, Accum, std::size_t>> acc;
  for (const auto& r : records) {
    auto& [on, off, n] = acc[r.category];
    on.add(r.loss_on);
    off.add(r.loss_off);
    ++n;
  }
  std::vector<CategoryRow> rows;
  for (const auto& [c, t] : acc) {
    const auto& [on, off, n] = t;
    rows.push_back({c, n, on.value() / double(n), off.value() / double(n)});
  }
  return rows;
}

Summary summarize(std::span<const TokenLossRecord> records) {
  Accum on, off, delta;
  for (const auto& r : records) {
    on.add(r.loss_on);
    off.add(r.loss_off);
    delta.add(r.delta);
  }
  Summary s;
  s.tokens = records.size();
  s.sum_loss_on = on.value();
  s.sum_loss_off = off.value();
  s.sum_delta = delta.value();
  if (s.tokens) {
    s.mean_loss_on = s.sum_loss_on / double(s.tokens);
    s.mean_loss_off = s.sum_loss_off / double(s.tokens);
  }
  return s;
}

double bits_per_byte(double total_nats, std::size_t bytes) {
  if (bytes == 0) throw std::invalid_argument("bits per byte needs a positive byte count");
  return total_nats / std::log(2.0) / double(bytes);
}

// ---------------------------------------------------------------------------
// CSV

std::string format_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

namespace {

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

template <typename N>
N parse_num(std::string_view s, std::size_t line) {
  N v{};
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw std::runtime_error("bad number '" + std::string(s) + "' on line " + std::to_string(line));
  }
  return v;
}

}  // namespace

void write_records(const fs::path& path, std::span<const TokenLossRecord> records) {
  auto out = open_out(path);
  out << "doc_id,pos,token,category,loss_on,loss_off,bucket,delta\n";
  for (const auto& r : records) {
    out << r.doc_id << ',' << r.pos << ',' << r.token << ',' << to_string(r.category) << ','
        << format_double(r.loss_on) << ',' << format_double(r.loss_off) << ',' << r.bucket << ','
        << format_double(r.delta) << '\n';
  }
}

std::vector<TokenLossRecord> read_records(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "doc_id,pos,token,category,loss_on,loss_off,bucket,delta") {
    throw std::runtime_error(path.string() + " is not a record CSV");
  }
  std::vector<TokenLossRecord> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string_view> f;
    std::string_view rest(line);
    for (std::size_t pos; (pos = rest.find(',')) != std::string_view::npos; rest.remove_prefix(pos + 1)) {
      f.push_back(rest.substr(0, pos));
    }
    f.push_back(rest);
    if (f.size() != 8) throw std::runtime_error("expected 8 fields on line " + std::to_string(lineno));
    TokenLossRecord r;
    r.doc_id = parse_num<std::uint32_t>(f[0], lineno);
    r.pos = parse_num<std::uint32_t>(f[1], lineno);
    r.token = parse_num<TokenId>(f[2], lineno);
    r.category = parse_category(f[3]);
    r.loss_on = parse_num<double>(f[4], lineno);
    r.loss_off = parse_num<double>(f[5], lineno);
    r.bucket = parse_num<std::uint32_t>(f[6], lineno);
    r.delta = parse_num<double>(f[7], lineno);
    out.push_back(r);
  }
  return out;
}

void write_bucket_report(const fs::path& path, std::span<const BucketRow> rows) {
  auto out = open_out(path);
  out << "n,count,mean_loss_on,pos_delta,neg_delta,total_delta\n";
  for (const auto& r : rows) {
    out << r.n << ',' << r.count << ',' << format_double(r.mean_loss_on) << ','
        << format_double(r.delta.positive) << ',' << format_double(r.delta.negative) << ','
        << format_double(r.delta.total) << '\n';
  }
}

void write_category_report(const fs::path& path, std::span<const CategoryRow> rows) {
  auto out = open_out(path);
  out << "category,count,mean_loss_on,mean_loss_off\n";
  for (const auto& r : rows) {
    out << to_string(r.category) << ',' << r.count << ',' << format_double(r.mean_loss_on) << ','
        << format_double(r.mean_loss_off) << '\n';
  }
}

}  // namespace retro::eval
