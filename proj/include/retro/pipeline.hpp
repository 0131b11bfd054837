#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "retro/evaluator.hpp"
#include "retro/model.hpp"
#include "retro/synth.hpp"
#include "retro/trainer.hpp"

namespace retro::pipeline {

struct PipelineConfig {
  std::filesystem::path out_dir;
  std::optional<std::filesystem::path> corpus;  // ingest this JSONL instead of synthesizing
  std::uint64_t seed = 0;
  synth::CorpusSpec synth;
  model::RetroConfig model;
  train::TrainConfig train;
  std::size_t vocab = 512;
  std::size_t embed_dim = 128;
  bool log_y = false;

  /// Desk settings of the acceptance experiment.
  static PipelineConfig preset(std::string_view name, std::uint64_t seed);
  /// key=value lines over a preset (`preset=` first); unknown keys are errors.
  static PipelineConfig parse(std::string_view text, const std::filesystem::path& base_dir);
  static PipelineConfig load(const std::filesystem::path& path);
  /// Canonical text; every field that influences an artifact appears here.
  std::string serialize() const;
};

/// Stage failures carry the stage name.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& what)
      : std::runtime_error("stage " + stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct ManifestEntry {
  std::string path;  // relative to out_dir
  std::uint64_t hash = 0;
};

struct PipelineResult {
  std::vector<ManifestEntry> manifest;
  std::vector<std::string> skipped_stages;  // resumed from earlier runs
};

using Logger = std::function<void(const std::string&)>;

/// synth/ingest -> build-db(train) -> train -> build-db(train+val) -> eval ->
/// analyze. A stage whose inputs are unchanged since its last successful run
/// is skipped.
PipelineResult run_pipeline(const PipelineConfig& cfg, const Logger& log = {});

std::uint64_t hash_file(const std::filesystem::path& path);
std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, std::string_view text);

// Individual stages, shared with the CLI subcommands.

tok::Vocab load_or_train_vocab(const std::vector<RawDocument>& docs,
                               const std::optional<std::filesystem::path>& vocab_path,
                               std::size_t size);

/// Tokenized documents of the selected splits, in file order.
std::vector<TokenSequence> load_tokens(const std::filesystem::path& corpus, const tok::Vocab& vocab,
                                       bool include_validation);

void analyze(const std::filesystem::path& records, const std::filesystem::path& out_dir, bool log_y);

struct Check {
  std::string name;
  bool pass = false;
  std::string detail;
};

/// The qualitative outcomes expected of a trained run: retrieval lowers the
/// mean loss, high-overlap tokens are cheap, overlapping tokens carry most of
/// the gain, and planted duplicates populate buckets m+1 .. 2m.
std::vector<Check> reproduction_checks(std::span<const eval::TokenLossRecord> records, std::size_t m);

}  // namespace retro::pipeline
