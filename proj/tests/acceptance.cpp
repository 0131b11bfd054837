// Runs the seven acceptance criteria and prints one PASS/FAIL line for each.
// Usage: acceptance [work_dir] [seed]

#include <chrono>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "grad_suites.hpp"
#include "retro/evaluator.hpp"
#include "retro/pipeline.hpp"

using namespace retro;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string fmt(double v) {
  std::ostringstream o;
  o.precision(3);
  o << v;
  return o.str();
}

// 1. Finite differences for every op (1e-4) and the whole desk model (1e-3).
Outcome gradients() {
  Outcome out;
  double worst_op = 0;
  for (const auto& r : oracle::op_grad_suite(7, 20)) {
    worst_op = std::max(worst_op, r.report.max_rel);
    if (!(r.report.max_rel <= 1e-4)) {
      out.pass = false;
      out.detail += r.op + " " + r.report.worst + "; ";
    }
  }
  double worst_model = 0;
  for (std::uint64_t seed : {11, 12, 13}) {
    const auto rep = oracle::model_grad_check(seed, 8);
    worst_model = std::max(worst_model, rep.max_rel);
    if (!(rep.max_rel <= 1e-3)) {
      out.pass = false;
      out.detail += "model " + rep.worst + "; ";
    }
  }
  out.detail += "worst op rel err " + fmt(worst_op) + ", worst model rel err " + fmt(worst_model);
  return out;
}

// 2. Exact search against a full sort; IVF against exact.
Outcome retrieval() {
  Outcome out;
  std::mt19937_64 rng(2);
  std::size_t queries = 0;
  for (int trial = 0; trial < 200 && out.pass; ++trial) {
    const std::size_t n = 1 + rng() % 5000;
    const auto db = oracle::random_db(rng, n, 32, 4, 1 + static_cast<std::uint32_t>(rng() % 50));
    store::RetrievalConfig cfg;
    cfg.k = 1 + rng() % 4;
    cfg.exclude_same_doc = rng() % 2;
    for (int q = 0; q < 5; ++q, ++queries) {
      const auto key = db.embedding(rng() % n);
      const auto doc = db.doc_ids[rng() % n];
      if (store::search(db, key, doc, cfg) != oracle::brute_knn(db, key, doc, cfg.k, cfg.exclude_same_doc)) {
        out.pass = false;
        out.detail = "exact mismatch in database " + std::to_string(trial) + "; ";
        break;
      }
    }
  }
  std::size_t ivf_dbs = 0;
  for (int trial = 0; trial < 20 && out.pass; ++trial, ++ivf_dbs) {
    const std::size_t n = 200 + rng() % 4800, lists = 2 + rng() % 14;
    const auto db = store::build_ivf(oracle::random_db(rng, n, 32, 4, 30), lists, 5, rng());
    store::RetrievalConfig exact;
    std::vector<double> recall(lists + 1, 0.0);
    for (int q = 0; q < 20; ++q) {
      std::vector<float> key(32);
      std::normal_distribution<float> normal;
      for (auto& x : key) x = normal(rng);
      const auto truth = store::search(db, key, 1000, exact);
      for (std::size_t p = 1; p <= lists; ++p) {
        auto c = exact;
        c.mode = store::SearchMode::ivf;
        c.nprobe = p;
        const auto got = store::search(db, key, 1000, c);
        for (auto t : truth) recall[p] += std::count(got.begin(), got.end(), t) ? 1 : 0;
        if (p == lists && got != truth) {
          out.pass = false;
          out.detail += "full probe differs from exact; ";
        }
      }
    }
    for (std::size_t p = 2; p <= lists; ++p) {
      if (recall[p] < recall[p - 1]) {
        out.pass = false;
        out.detail += "recall fell at nprobe " + std::to_string(p) + "; ";
      }
    }
  }
  out.detail += std::to_string(queries) + " exact queries on 200 databases, " + std::to_string(ivf_dbs) +
                " IVF databases";
  return out;
}

// 3. Rolling matcher against the quadratic oracle.
Outcome bucketing() {
  std::mt19937_64 rng(3);
  std::size_t positions = 0;
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t m = 2 + rng() % 7, alphabet = 2 + rng() % 5, len = 1 + rng() % (5 * m);
    std::vector<TokenId> seq(len);
    for (auto& t : seq) t = static_cast<TokenId>(4 + rng() % alphabet);
    std::vector<std::vector<TokenId>> nbs(1 + rng() % 3, std::vector<TokenId>(2 * m));
    for (auto& nb : nbs) {
      for (auto& t : nb) t = static_cast<TokenId>(4 + rng() % alphabet);
      if (rng() % 3 == 0) std::fill(nb.begin() + static_cast<std::ptrdiff_t>(rng() % nb.size()), nb.end(), kPad);
      if (rng() % 2 == 0) {
        const std::size_t from = rng() % len, n = std::min(len - from, 1 + rng() % nb.size());
        std::copy_n(seq.begin() + from, n, nb.begin() + rng() % (nb.size() - n + 1));
      }
    }
    const std::vector<std::span<const TokenId>> spans(nbs.begin(), nbs.end());
    for (std::size_t i = 1; i <= len; ++i, ++positions) {
      if (eval::overlap_bucket(seq, i, spans, m) != oracle::brute_bucket(seq, i, spans, m)) {
        return {false, "mismatch in fixture " + std::to_string(trial) + " at position " + std::to_string(i)};
      }
    }
  }
  return {true, std::to_string(positions) + " positions in 500 fixtures"};
}

// 4. Structural invariants of the forward pass.
Outcome structure() {
  using namespace model;
  const auto cfg = RetroConfig::preset_named("desk");
  const auto p = ModelParams<float>::init(cfg, 4);
  std::mt19937_64 rng(4);
  const auto tokens = [&](std::size_t n) {
    std::vector<TokenId> s(n);
    for (auto& t : s) t = static_cast<TokenId>(4 + rng() % (cfg.vocab_size - 4));
    return s;
  };
  const auto logits = [&](const Batch& b, Mode mode) {
    tensor::Tape<float> tape(false);
    const auto r = forward(tape, p, cfg, b, mode);
    return std::vector<float>(r.logits.values().begin(), r.logits.values().end());
  };
  const auto docs_from = [&](std::uint32_t count) {
    std::vector<TokenSequence> docs;
    for (std::uint32_t d = 0; d < count; ++d) docs.push_back({tokens(40 + rng() % 40), d});
    return docs;
  };
  Outcome out;

  // Off mode over neighbors drawn from two unrelated databases.
  const auto db_a = store::build_database(docs_from(20), {cfg.m}, 32, 1);
  const auto db_b = store::build_database(docs_from(30), {cfg.m}, 32, 2);
  const auto seq = tokens(cfg.max_len);
  Batch a, b;
  a.sequences = b.sequences = {seq};
  store::RetrievalConfig rc{cfg.k};
  a.neighbors = {NeighborBatch::from_indices(db_a, store::retrieve_for_sequence(db_a, seq, 999, rc), cfg.k)};
  b.neighbors = {NeighborBatch::from_indices(db_b, store::retrieve_for_sequence(db_b, seq, 999, rc), cfg.k)};
  if (logits(a, Mode::off) != logits(b, Mode::off)) {
    out.pass = false;
    out.detail += "off mode depends on the database; ";
  }

  // Perturbing RET(C_u) leaves positions t < u*m untouched.
  const auto ref = logits(a, Mode::on);
  const std::size_t V = cfg.vocab_size;
  for (std::size_t e = 0; e < a.neighbors[0].entries(); ++e) {
    Batch c = a;
    auto& nb = c.neighbors[0];
    for (std::size_t j = 0; j < nb.k * nb.width; ++j) nb.tokens[e * nb.k * nb.width + j] = tokens(1)[0];
    const auto got = logits(c, Mode::on);
    const std::size_t u = e + 1, unchanged_rows = u * cfg.m - 1;  // 1-based t < u*m
    if (std::memcmp(ref.data(), got.data(), unchanged_rows * V * sizeof(float)) != 0) {
      out.pass = false;
      out.detail += "RET(C_" + std::to_string(u) + ") leaked backwards; ";
    }
  }

  // Inside the first chunk, on and off agree.
  for (std::size_t len = 1; len <= cfg.m; ++len) {
    Batch one;
    one.sequences = {tokens(len)};
    one.neighbors = {NeighborBatch{cfg.k, 2 * cfg.m, {}, {}}};
    if (logits(one, Mode::on) != logits(one, Mode::off)) {
      out.pass = false;
      out.detail += "one-chunk mismatch at length " + std::to_string(len) + "; ";
    }
  }
  out.detail += std::to_string(a.neighbors[0].entries()) + " perturbed entries, " + std::to_string(cfg.m) +
                " one-chunk lengths";
  return out;
}

// 6. Decomposition identities and reconciliation with the aggregate gap.
Outcome accounting(std::span<const eval::TokenLossRecord> records) {
  const auto s = eval::summarize(records);
  double grand = 0;
  for (const auto& [n, d] : eval::delta_decomposition(records)) {
    if (d.total != d.positive + d.negative) return {false, "bucket " + std::to_string(n) + " total != pos + neg"};
    grand += d.total;
  }
  const double gap = (s.mean_loss_off - s.mean_loss_on) * double(s.tokens);
  const double rel = std::abs(grand - gap) / std::max(std::abs(gap), 1e-300);
  return {rel <= 1e-9, "relative gap error " + fmt(rel) + " over " + std::to_string(s.tokens) + " tokens"};
}

Outcome random_accounting() {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0, 8);
  Outcome worst{true, ""};
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<eval::TokenLossRecord> rs(500 + rng() % 20000);
    for (auto& r : rs) {
      r.loss_on = u(rng);
      r.loss_off = u(rng);
      r.delta = r.loss_off - r.loss_on;
      r.bucket = static_cast<std::uint32_t>(rng() % 17);
    }
    auto o = accounting(rs);
    if (!o.pass) return o;
    worst = o;
  }
  worst.detail = "20 random record sets, last " + worst.detail;
  return worst;
}

pipeline::PipelineResult run_acceptance_pipeline(const fs::path& dir, std::uint64_t seed) {
  fs::remove_all(dir);
  auto cfg = pipeline::PipelineConfig::preset("desk", seed);
  cfg.out_dir = dir;
  return pipeline::run_pipeline(cfg, [](const std::string& line) { std::cerr << line << std::endl; });
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::path("acceptance-out");
  const std::uint64_t seed = argc > 2 ? std::stoull(argv[2]) : 0;
  bool all = true;
  const auto report = [&](int id, const std::string& name, const Outcome& o, double seconds) {
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << name << "): " << o.detail << " ["
              << fmt(seconds) << " s]" << std::endl;
    all = all && o.pass;
  };
  const auto timed = [&](int id, const std::string& name, auto fn) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    report(id, name, o, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  };

  timed(1, "gradient correctness", gradients);
  timed(2, "retrieval oracle equivalence", retrieval);
  timed(3, "bucketing oracle equivalence", bucketing);
  timed(4, "structural invariants", structure);

  // 5, 6 and 7 share two full pipeline runs.
  std::vector<eval::TokenLossRecord> records;
  pipeline::PipelineResult first, second;
  timed(5, "scaled reproduction", [&] {
    first = run_acceptance_pipeline(work / "run1", seed);
    records = eval::read_records(work / "run1" / "eval" / "records.csv");
    Outcome o;
    for (const auto& c : pipeline::reproduction_checks(records, model::RetroConfig::preset_named("desk").m)) {
      o.pass = o.pass && c.pass;
      o.detail += std::string(c.pass ? "ok " : "FAILED ") + c.name + " (" + c.detail + "); ";
    }
    return o;
  });
  timed(6, "decomposition accounting", [&] {
    auto o = random_accounting();
    if (records.empty()) return Outcome{false, "no acceptance records"};
    const auto run = accounting(records);
    return Outcome{o.pass && run.pass, o.detail + "; acceptance run " + run.detail};
  });
  timed(7, "determinism", [&] {
    second = run_acceptance_pipeline(work / "run2", seed);
    if (first.manifest.empty()) return Outcome{false, "first run missing"};
    const bool same_records =
        slurp(work / "run1" / "eval" / "records.csv") == slurp(work / "run2" / "eval" / "records.csv");
    bool same_manifest = first.manifest.size() == second.manifest.size();
    for (std::size_t i = 0; same_manifest && i < first.manifest.size(); ++i) {
      same_manifest = first.manifest[i].path == second.manifest[i].path &&
                      first.manifest[i].hash == second.manifest[i].hash;
    }
    same_manifest = same_manifest && slurp(work / "run1" / "manifest.txt") == slurp(work / "run2" / "manifest.txt");
    return Outcome{same_records && same_manifest, std::string("records ") + (same_records ? "identical" : "differ") +
                                                      ", manifest " + (same_manifest ? "identical" : "differs") +
                                                      " (" + std::to_string(first.manifest.size()) + " files)"};
  });

  std::cout << (all ? "ALL CRITERIA PASS" : "SOME CRITERIA FAIL") << std::endl;
  return all ? 0 : 1;
}
