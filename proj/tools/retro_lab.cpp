// retro-lab: corpus synthesis, database build, training, evaluation and
// analysis from one binary.

#include <cstdlib>
#include <iostream>

#include "CLI11.hpp"
#include "retro/checkpoint.hpp"
#include "retro/evaluator.hpp"
#include "retro/kernels.hpp"
#include "retro/pipeline.hpp"

namespace fs = std::filesystem;
using namespace retro;

namespace {

fs::path artifact_root() {
  if (const char* dir = std::getenv("RETRO_LAB_DIR"); dir && *dir) return dir;
  return "retro-lab-out";
}

fs::path vocab_next_to(const fs::path& file) { return file.parent_path() / "vocab.txt"; }

void log_line(const std::string& s) { std::cerr << s << std::endl; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Retrieval-augmented language model lab"};
  app.require_subcommand(1);

  std::uint64_t seed = 0;
  int threads = 0;
  std::string preset = "desk";
  app.add_option("--seed", seed, "Root seed for every random stream");
  app.add_option("--threads", threads, "Worker threads (0: OpenMP default)");
  app.add_option("--preset", preset, "Model preset: desk or paper-425m")
      ->check(CLI::IsMember({"desk", "paper-425m"}));

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic JSONL corpus and its tokenizer");
  synth::CorpusSpec spec;
  fs::path synth_out;
  synth->add_option("--out", synth_out, "Output JSONL (vocab.txt is written beside it)");
  synth->add_option("--n-docs", spec.n_docs);
  synth->add_option("--doc-words", spec.doc_words);
  synth->add_option("--lexicon", spec.lexicon);
  synth->add_option("--successors", spec.successors);
  synth->add_option("--skew", spec.skew, "Zipf exponent over successor ranks (0: uniform)");
  synth->add_option("--rho", spec.rho, "Probability that a validation doc carries a copied train span");
  synth->add_option("--train-dup-rate", spec.train_dup_rate);
  synth->add_option("--plant-words", spec.plant_words);
  synth->add_option("--val-fraction", spec.val_fraction);
  synth->add_option("--vocab-size", spec.vocab, "BPE vocabulary size");

  // build-db
  auto* build = app.add_subcommand("build-db", "Chunk, embed and index a corpus");
  fs::path db_corpus, db_out, db_vocab;
  std::size_t db_m = 0, db_d = 128, ivf = 0, ivf_iters = 10, vocab_size = 512;
  std::string include_split;
  build->add_option("--corpus", db_corpus)->required()->check(CLI::ExistingFile);
  build->add_option("--m", db_m, "Chunk size (default: preset)");
  build->add_option("--d", db_d, "Embedding dimension");
  build->add_option("--include-split", include_split, "Also index this split")
      ->check(CLI::IsMember({"validation"}));
  build->add_option("--ivf", ivf, "Number of IVF centroids (0: exact only)");
  build->add_option("--ivf-iters", ivf_iters);
  build->add_option("--vocab", db_vocab, "Tokenizer file (default: vocab.txt beside the corpus; trained if absent)");
  build->add_option("--vocab-size", vocab_size);
  build->add_option("--out", db_out);

  // train
  auto* trn = app.add_subcommand("train", "Train with retrieval from the training database");
  fs::path tr_corpus, tr_db, tr_out, tr_vocab, tr_resume;
  std::size_t steps = 0, batch = 0, every = 1000;
  double lr = 0;
  bool no_clip = false;
  trn->add_option("--corpus", tr_corpus)->required()->check(CLI::ExistingFile);
  trn->add_option("--db", tr_db)->required()->check(CLI::ExistingFile);
  trn->add_option("--steps", steps, "Default: preset");
  trn->add_option("--batch", batch, "Default: preset");
  trn->add_option("--lr", lr, "Default: preset");
  trn->add_option("--checkpoint-interval", every);
  trn->add_flag("--no-clip", no_clip, "Disable gradient clipping");
  trn->add_option("--resume", tr_resume)->check(CLI::ExistingFile);
  trn->add_option("--vocab", tr_vocab);
  trn->add_option("--out", tr_out);

  // eval
  auto* ev = app.add_subcommand("eval", "Score validation tokens with retrieval on and off");
  fs::path ev_ckpt, ev_db, ev_corpus, ev_out, ev_vocab, ev_config;
  ev->add_option("--checkpoint", ev_ckpt)->required()->check(CLI::ExistingFile);
  ev->add_option("--db", ev_db)->required()->check(CLI::ExistingFile);
  ev->add_option("--corpus", ev_corpus)->required()->check(CLI::ExistingFile);
  ev->add_option("--vocab", ev_vocab);
  ev->add_option("--config", ev_config, "Model config (default: config.txt beside the checkpoint)");
  ev->add_option("--out", ev_out);

  // analyze
  auto* an = app.add_subcommand("analyze", "Bucket report and plots from a record CSV");
  fs::path an_records, an_out;
  bool log_y = false;
  an->add_option("--records", an_records)->required()->check(CLI::ExistingFile);
  an->add_option("--out", an_out);
  an->add_flag("--log-y", log_y, "Logarithmic y axis for the loss and count plots");

  // pipeline
  auto* pl = app.add_subcommand("pipeline", "Run every stage, resuming finished ones");
  fs::path pl_config, pl_out;
  bool acceptance = false, pl_log_y = false;
  pl->add_option("--config", pl_config, "key=value config file")->check(CLI::ExistingFile);
  pl->add_option("--out", pl_out);
  pl->add_flag("--acceptance", acceptance, "Run the desk acceptance experiment and check its outcomes");
  pl->add_flag("--log-y", pl_log_y);

  CLI11_PARSE(app, argc, argv);
  if (threads > 0) kernels::set_threads(threads);

  try {
    const auto mcfg_default = model::RetroConfig::preset_named(preset);

    if (*synth) {
      spec.seed = sub_seed(seed, "corpus");
      if (synth_out.empty()) synth_out = artifact_root() / "corpus.jsonl";
      const auto corpus = synth::synth_corpus(spec);
      pipeline::write_text(synth_out, to_jsonl(corpus.docs));
      const auto v = tok::train_bpe(texts_of_split(corpus.docs, Split::train), spec.vocab);
      v.save(vocab_next_to(synth_out));
      std::cout << "wrote " << corpus.docs.size() << " documents (" << corpus.plantings.size()
                << " planted spans) to " << synth_out.string() << '\n';
      return 0;
    }

    if (*build) {
      if (db_m == 0) db_m = mcfg_default.m;
      if (db_out.empty()) db_out = artifact_root() / (include_split.empty() ? "db_train.rdb" : "db_trainval.rdb");
      const auto docs = read_jsonl(db_corpus);
      const auto vocab = pipeline::load_or_train_vocab(
          docs, db_vocab.empty() ? vocab_next_to(db_corpus) : db_vocab, vocab_size);
      const auto toks = pipeline::load_tokens(db_corpus, vocab, !include_split.empty());
      store::ChunkingConfig cc;
      cc.m = db_m;
      auto db = store::build_database(toks, cc, db_d, sub_seed(seed, "embedder"));
      if (ivf) db = store::build_ivf(std::move(db), ivf, ivf_iters, sub_seed(seed, "ivf"));
      if (db_out.has_parent_path()) fs::create_directories(db_out.parent_path());
      db.save(db_out);
      std::cout << "indexed " << db.size() << " pairs from " << toks.size() << " documents into "
                << db_out.string() << '\n';
      return 0;
    }

    if (*trn) {
      auto tcfg = train::TrainConfig::preset_named(preset);
      tcfg.seed = seed;
      if (steps) tcfg.steps = steps;
      if (batch) tcfg.batch = batch;
      if (lr > 0) tcfg.lr = lr;
      tcfg.checkpoint_interval = every;
      tcfg.clip = !no_clip;
      if (tr_out.empty()) tr_out = artifact_root() / "train";
      const auto vocab = tok::Vocab::load(tr_vocab.empty() ? vocab_next_to(tr_corpus) : tr_vocab);
      auto mcfg = mcfg_default;
      mcfg.vocab_size = vocab.size();
      const auto docs = pipeline::load_tokens(tr_corpus, vocab, false);
      const auto db = store::ChunkDatabase::load(tr_db);
      train::TrainOptions opts;
      opts.out_dir = tr_out;
      if (!tr_resume.empty()) opts.resume = tr_resume;
      opts.on_step = [&](std::size_t step, double loss) {
        if (step % 100 == 0 || step == tcfg.steps) log_line("step " + std::to_string(step) + " loss " + eval::format_double(loss));
      };
      const auto st = train::train(mcfg, tcfg, docs, db, opts);
      std::cout << "trained " << st.step() << " steps; checkpoints in " << tr_out.string() << '\n';
      return 0;
    }

    if (*ev) {
      if (ev_out.empty()) ev_out = artifact_root() / "eval";
      const auto cfg_path = ev_config.empty() ? ev_ckpt.parent_path() / "config.txt" : ev_config;
      const auto mcfg = model::RetroConfig::parse(pipeline::read_text(cfg_path));
      const auto vocab = tok::Vocab::load(ev_vocab.empty() ? vocab_next_to(ev_corpus) : ev_vocab);
      const auto params = model::ModelParams<float>::from_checkpoint(mcfg, read_checkpoint(ev_ckpt));
      const auto db = store::ChunkDatabase::load(ev_db);
      const auto val = select_split(pipeline::load_tokens(ev_corpus, vocab, true), Split::validation);
      const auto recs = eval::evaluate(params, mcfg, db, val);
      eval::write_records(ev_out / "records.csv", recs);
      const auto s = eval::summarize(recs);
      std::cout << "tokens " << s.tokens << "  mean loss on " << eval::format_double(s.mean_loss_on)
                << "  off " << eval::format_double(s.mean_loss_off) << '\n';
      return 0;
    }

    if (*an) {
      if (an_out.empty()) an_out = an_records.parent_path();
      pipeline::analyze(an_records, an_out, log_y);
      std::cout << "wrote report.csv, categories.csv and plots to " << an_out.string() << '\n';
      return 0;
    }

    if (*pl) {
      auto cfg = pl_config.empty() ? pipeline::PipelineConfig::preset(acceptance ? "desk" : preset, seed)
                                   : pipeline::PipelineConfig::load(pl_config);
      if (pl_log_y) cfg.log_y = true;
      cfg.out_dir = pl_out.empty() ? artifact_root() / (acceptance ? "acceptance" : "pipeline") : pl_out;
      pipeline::run_pipeline(cfg, log_line);
      std::cout << "artifacts and manifest in " << cfg.out_dir.string() << '\n';
      if (acceptance) {
        const auto recs = eval::read_records(cfg.out_dir / "eval" / "records.csv");
        bool ok = true;
        for (const auto& c : pipeline::reproduction_checks(recs, cfg.model.m)) {
          std::cout << (c.pass ? "PASS " : "FAIL ") << c.name << ": " << c.detail << '\n';
          ok = ok && c.pass;
        }
        return ok ? 0 : 1;
      }
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
