#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "retro/pipeline.hpp"
#include "retro/retrieval.hpp"

#ifndef RETRO_LAB_BIN
#error "RETRO_LAB_BIN must point at the CLI binary"
#endif

using namespace retro;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Run {
  int code = 0;
  std::string output;
};

Run run_cli(const std::string& args) {
  const auto log = fs::temp_directory_path() / "retro_cli_output.txt";
  const std::string cmd = std::string(RETRO_LAB_BIN) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return {WEXITSTATUS(status), slurp(log)};
}

synth::CorpusSpec small_spec(double rho) {
  synth::CorpusSpec s;
  s.n_docs = 400;
  s.rho = rho;
  s.seed = 3;
  return s;
}

std::vector<TokenSequence> tokenized(const synth::SynthCorpus& c, std::size_t vocab) {
  std::vector<std::string> texts;
  for (const auto& d : c.docs) {
    if (d.split == Split::train) texts.push_back(d.text);
  }
  return tokenize_corpus(tok::train_bpe(texts, vocab), c.docs);
}

/// Validation chunks of m real tokens that occur verbatim anywhere in training.
std::size_t copied_val_chunks(const std::vector<TokenSequence>& docs, std::size_t m) {
  std::set<std::vector<TokenId>> train_grams;
  for (const auto& d : docs) {
    if (d.split != Split::train) continue;
    for (std::size_t s = 0; s + m <= d.tokens.size(); ++s) {
      train_grams.emplace(d.tokens.begin() + s, d.tokens.begin() + s + m);
    }
  }
  std::size_t hits = 0;
  for (const auto& d : docs) {
    if (d.split != Split::validation) continue;
    for (std::size_t s = 0; s + m <= d.tokens.size(); s += m) {
      hits += train_grams.count(std::vector<TokenId>(d.tokens.begin() + s, d.tokens.begin() + s + m));
    }
  }
  return hits;
}

}  // namespace

TEST_CASE("without planting no validation chunk is copied from training") {
  const auto c = synth::synth_corpus(small_spec(0.0));
  for (const auto& p : c.plantings) {
    CHECK(c.docs[p.doc_id].split == Split::train);
  }
  CHECK(copied_val_chunks(tokenized(c, 512), 8) == 0);
}

TEST_CASE("with rho = 1 every validation document carries a training span") {
  const auto c = synth::synth_corpus(small_spec(1.0));
  std::set<std::uint32_t> planted;
  for (const auto& p : c.plantings) {
    if (c.docs[p.doc_id].split != Split::validation) continue;
    planted.insert(p.doc_id);
    CHECK(c.docs[p.source_doc].split == Split::train);
    CHECK(p.words == small_spec(1.0).plant_words);
  }
  std::size_t val = 0;
  for (const auto& d : c.docs) val += d.split == Split::validation;
  CHECK(val > 0);
  CHECK(planted.size() == val);
  CHECK(copied_val_chunks(tokenized(c, 512), 8) >= val);
}

TEST_CASE("corpus layout and validation") {
  const auto c = synth::synth_corpus(small_spec(0.5));
  CHECK(c.docs.size() == 400);
  bool seen_val = false;
  std::set<Category> cats;
  for (std::size_t i = 0; i < c.docs.size(); ++i) {
    CHECK(c.docs[i].id == i);
    if (c.docs[i].split == Split::validation) seen_val = true;
    else CHECK(!seen_val);  // training documents come first
    cats.insert(c.docs[i].category);
  }
  CHECK(cats.size() == 5);
  auto bad = small_spec(1.5);
  CHECK_THROWS_WITH(bad.validate(), doctest::Contains("rho must lie in [0, 1]"));
  CHECK_THROWS(synth::synth_corpus(bad));
}

TEST_CASE("synth subcommand is byte-reproducible") {
  const auto dir = fresh_dir("retro_cli_synth");
  const auto a = run_cli("--seed 4 synth --n-docs 150 --out " + (dir / "a" / "c.jsonl").string());
  const auto b = run_cli("--seed 4 synth --n-docs 150 --out " + (dir / "b" / "c.jsonl").string());
  REQUIRE(a.code == 0);
  REQUIRE(b.code == 0);
  CHECK(slurp(dir / "a" / "c.jsonl") == slurp(dir / "b" / "c.jsonl"));
  CHECK(slurp(dir / "a" / "vocab.txt") == slurp(dir / "b" / "vocab.txt"));
  CHECK(read_jsonl(dir / "a" / "c.jsonl").size() == 150);
  const auto bad = run_cli("synth --rho 2 --out " + (dir / "c.jsonl").string());
  CHECK(bad.code != 0);
  CHECK(bad.output.find("rho") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("subcommands chain from corpus to analysis") {
  const auto dir = fresh_dir("retro_cli_chain");
  const auto p = [&](const char* name) { return (dir / name).string(); };
  REQUIRE(run_cli("--seed 2 synth --n-docs 60 --out " + p("c.jsonl")).code == 0);
  REQUIRE(run_cli("build-db --corpus " + p("c.jsonl") + " --out " + p("train.rdb")).code == 0);
  REQUIRE(run_cli("build-db --corpus " + p("c.jsonl") + " --include-split validation --out " + p("all.rdb")).code == 0);
  const auto tr = run_cli("--seed 2 train --corpus " + p("c.jsonl") + " --db " + p("train.rdb") +
                          " --steps 2 --batch 2 --out " + p("train"));
  INFO(tr.output);
  REQUIRE(tr.code == 0);
  CHECK(fs::exists(dir / "train" / "step-2.rck1"));
  CHECK(fs::exists(dir / "train" / "loss.csv"));
  const auto ev = run_cli("eval --checkpoint " + (dir / "train" / "step-2.rck1").string() + " --db " + p("all.rdb") +
                          " --corpus " + p("c.jsonl") + " --out " + p("eval"));
  INFO(ev.output);
  REQUIRE(ev.code == 0);
  CHECK(!eval::read_records(dir / "eval" / "records.csv").empty());
  REQUIRE(run_cli("analyze --records " + (dir / "eval" / "records.csv").string() + " --log-y --out " + p("an")).code ==
          0);
  for (const char* f : {"report.csv", "loss_by_bucket.svg", "delta_by_bucket.svg", "bucket_hist.svg"}) {
    CHECK_MESSAGE(fs::exists(dir / "an" / f), f);
  }
  CHECK(slurp(dir / "an" / "report.csv").rfind("n,count,mean_loss_on,pos_delta,neg_delta,total_delta\n", 0) == 0);
  // Evaluating against the training-only database is refused.
  const auto no_val = run_cli("eval --checkpoint " + (dir / "train" / "step-2.rck1").string() + " --db " +
                              p("train.rdb") + " --corpus " + p("c.jsonl") + " --out " + p("eval2"));
  CHECK(no_val.code != 0);
  CHECK(no_val.output.find("validation pairs absent") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("pipeline names the failing stage") {
  const auto dir = fresh_dir("retro_cli_pipeline");
  std::ofstream(dir / "cfg.txt") << "preset=desk\ncorpus=missing.jsonl\n";
  const auto r = run_cli("pipeline --config " + (dir / "cfg.txt").string() + " --out " + (dir / "out").string());
  CHECK(r.code != 0);
  CHECK(r.output.find("stage corpus") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("pipeline config parsing") {
  const auto cfg = pipeline::PipelineConfig::parse("preset=desk\nseed=9\ntrain.steps=20\nsynth.rho=0.25\n", ".");
  CHECK(cfg.seed == 9);
  CHECK(cfg.train.steps == 20);
  CHECK(cfg.synth.rho == 0.25);
  CHECK(cfg.model.m == 8);
  const auto again = pipeline::PipelineConfig::parse(cfg.serialize(), ".");
  CHECK(again.serialize() == cfg.serialize());
  CHECK_THROWS_WITH_AS(pipeline::PipelineConfig::parse("preset=desk\nbogus=1\n", "."), doctest::Contains("bogus"),
                       std::invalid_argument);
}

TEST_CASE("a tiny pipeline runs end to end and resumes") {
  const auto dir = fresh_dir("retro_cli_tiny");
  auto cfg = pipeline::PipelineConfig::preset("desk", 3);
  cfg.out_dir = dir;
  cfg.synth.n_docs = 80;
  cfg.train.steps = 3;
  cfg.train.batch = 2;
  const auto first = pipeline::run_pipeline(cfg);
  CHECK(first.skipped_stages.empty());
  CHECK(fs::exists(dir / "eval" / "records.csv"));
  CHECK(fs::exists(dir / "manifest.txt"));
  const auto second = pipeline::run_pipeline(cfg);
  CHECK(second.skipped_stages.size() == 6);
  REQUIRE(second.manifest.size() == first.manifest.size());
  for (std::size_t i = 0; i < first.manifest.size(); ++i) {
    CHECK(first.manifest[i].path == second.manifest[i].path);
    CHECK(first.manifest[i].hash == second.manifest[i].hash);
  }
  fs::remove_all(dir);
}
