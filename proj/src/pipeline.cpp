#include "retro/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include "retro/checkpoint.hpp"
#include "retro/plots.hpp"

namespace retro::pipeline {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Files

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, std::string_view text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << text;
  }
  fs::rename(tmp, path);
}

std::uint64_t hash_file(const fs::path& path) { return fnv1a64(read_text(path)); }

// ---------------------------------------------------------------------------
// Config

PipelineConfig PipelineConfig::preset(std::string_view name, std::uint64_t seed) {
  PipelineConfig c;
  c.seed = seed;
  c.model = model::RetroConfig::preset_named(name);
  c.train = train::TrainConfig::preset_named(name);
  c.train.seed = seed;
  c.synth.seed = sub_seed(seed, "corpus");
  c.vocab = c.model.vocab_size;
  return c;
}

std::string PipelineConfig::serialize() const {
  std::ostringstream o;
  const auto d = [](double v) { return eval::format_double(v); };
  o << "preset=" << model.preset << '\n' << "seed=" << seed << '\n';
  if (corpus) o << "corpus=" << corpus->string() << '\n';
  o << "synth.n_docs=" << synth.n_docs << '\n'
    << "synth.doc_words=" << synth.doc_words << '\n'
    << "synth.lexicon=" << synth.lexicon << '\n'
    << "synth.successors=" << synth.successors << '\n'
    << "synth.skew=" << d(synth.skew) << '\n'
    << "synth.rho=" << d(synth.rho) << '\n'
    << "synth.train_dup_rate=" << d(synth.train_dup_rate) << '\n'
    << "synth.plant_words=" << synth.plant_words << '\n'
    << "synth.plant_max_offset=" << synth.plant_max_offset << '\n'
    << "synth.val_fraction=" << d(synth.val_fraction) << '\n'
    << "vocab=" << vocab << '\n'
    << "embed_dim=" << embed_dim << '\n'
    << "train.steps=" << train.steps << '\n'
    << "train.batch=" << train.batch << '\n'
    << "train.lr=" << d(train.lr) << '\n'
    << "train.checkpoint_interval=" << train.checkpoint_interval << '\n'
    << "train.clip=" << (train.clip ? 1 : 0) << '\n'
    << "train.clip_norm=" << d(train.clip_norm) << '\n'
    << "log_y=" << (log_y ? 1 : 0) << '\n';
  std::istringstream mc(model.serialize());
  for (std::string line; std::getline(mc, line);) {
    if (line.rfind("preset=", 0) != 0) o << "model." << line << '\n';
  }
  return o.str();
}

PipelineConfig PipelineConfig::parse(std::string_view text, const fs::path& base_dir) {
  std::vector<std::pair<std::string, std::string>> kv;
  std::istringstream in{std::string(text)};
  std::string preset = "desk";
  std::uint64_t seed = 0;
  for (std::string line; std::getline(in, line);) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("config line without '=': " + line);
    auto key = line.substr(0, eq), value = line.substr(eq + 1);
    if (key == "preset") preset = value;
    else if (key == "seed") seed = std::stoull(value);
    else kv.emplace_back(std::move(key), std::move(value));
  }
  PipelineConfig c = PipelineConfig::preset(preset, seed);
  std::string model_text = "preset=" + preset + "\n";
  for (const auto& [k, v] : kv) {
    const auto sz = [&] { return static_cast<std::size_t>(std::stoull(v)); };
    if (k == "corpus") {
      fs::path p(v);
      c.corpus = p.is_absolute() ? p : base_dir / p;
    } else if (k == "synth.n_docs") c.synth.n_docs = sz();
    else if (k == "synth.doc_words") c.synth.doc_words = sz();
    else if (k == "synth.lexicon") c.synth.lexicon = sz();
    else if (k == "synth.successors") c.synth.successors = sz();
    else if (k == "synth.skew") c.synth.skew = std::stod(v);
    else if (k == "synth.rho") c.synth.rho = std::stod(v);
    else if (k == "synth.train_dup_rate") c.synth.train_dup_rate = std::stod(v);
    else if (k == "synth.plant_words") c.synth.plant_words = sz();
    else if (k == "synth.plant_max_offset") c.synth.plant_max_offset = sz();
    else if (k == "synth.val_fraction") c.synth.val_fraction = std::stod(v);
    else if (k == "vocab") c.vocab = sz();
    else if (k == "embed_dim") c.embed_dim = sz();
    else if (k == "train.steps") c.train.steps = sz();
    else if (k == "train.batch") c.train.batch = sz();
    else if (k == "train.lr") c.train.lr = std::stod(v);
    else if (k == "train.checkpoint_interval") c.train.checkpoint_interval = sz();
    else if (k == "train.clip") c.train.clip = v != "0";
    else if (k == "train.clip_norm") c.train.clip_norm = std::stod(v);
    else if (k == "log_y") c.log_y = v != "0";
    else if (k.rfind("model.", 0) == 0) model_text += k.substr(6) + "=" + v + "\n";
    else throw std::invalid_argument("unknown config key " + k);
  }
  c.model = model::RetroConfig::parse(model_text);
  if (c.model.vocab_size != c.vocab) {
    // The model's vocab follows the tokenizer unless set explicitly.
    if (model_text.find("vocab_size=") == std::string::npos) c.model.vocab_size = c.vocab;
    else throw std::invalid_argument("model.vocab_size differs from vocab");
  }
  c.synth.validate();
  c.train.validate();
  return c;
}

PipelineConfig PipelineConfig::load(const fs::path& path) {
  return parse(read_text(path), path.parent_path());
}

// ---------------------------------------------------------------------------
// Stage helpers

tok::Vocab load_or_train_vocab(const std::vector<RawDocument>& docs,
                               const std::optional<fs::path>& vocab_path, std::size_t size) {
  if (vocab_path && fs::exists(*vocab_path)) return tok::Vocab::load(*vocab_path);
  const auto texts = texts_of_split(docs, Split::train);
  auto v = tok::train_bpe(texts, size);
  if (vocab_path) v.save(*vocab_path);
  return v;
}

std::vector<TokenSequence> load_tokens(const fs::path& corpus, const tok::Vocab& vocab,
                                       bool include_validation) {
  auto docs = read_jsonl(corpus);
  if (!include_validation) {
    docs.erase(std::remove_if(docs.begin(), docs.end(),
                              [](const RawDocument& d) { return d.split != Split::train; }),
               docs.end());
  }
  return tokenize_corpus(vocab, docs);
}

void analyze(const fs::path& records_path, const fs::path& out_dir, bool log_y) {
  const auto records = eval::read_records(records_path);
  if (records.empty()) throw std::runtime_error("no records in " + records_path.string());
  const auto rows = eval::bucket_report(records);
  eval::write_bucket_report(out_dir / "report.csv", rows);
  eval::write_category_report(out_dir / "categories.csv", eval::category_report(records));
  plots::write_analysis_plots(out_dir, rows, log_y);
}

std::vector<Check> reproduction_checks(std::span<const eval::TokenLossRecord> records, std::size_t m) {
  std::vector<Check> out;
  const auto s = eval::summarize(records);
  out.push_back({"mean loss with retrieval below mean loss without",
                 s.tokens > 0 && s.mean_loss_on < s.mean_loss_off,
                 "on " + eval::format_double(s.mean_loss_on) + " vs off " + eval::format_double(s.mean_loss_off)});

  double sum0 = 0, sum4 = 0;
  std::size_t n0 = 0, n4 = 0;
  for (const auto& r : records) {
    if (r.bucket == 0) sum0 += r.loss_on, ++n0;
    if (r.bucket >= 4) sum4 += r.loss_on, ++n4;
  }
  const double mean0 = n0 ? sum0 / double(n0) : 0, mean4 = n4 ? sum4 / double(n4) : 0;
  out.push_back({"mean loss for overlap >= 4 at most half the no-overlap loss",
                 n0 > 0 && n4 > 0 && mean4 <= 0.5 * mean0,
                 "n>=4 " + eval::format_double(mean4) + " (" + std::to_string(n4) + " tokens) vs n=0 " +
                     eval::format_double(mean0) + " (" + std::to_string(n0) + " tokens)"});

  const auto dec = eval::delta_decomposition(records);
  double overlap_total = 0, zero_total = 0;
  for (const auto& [n, d] : dec) (n == 0 ? zero_total : overlap_total) += d.total;
  out.push_back({"overlapping tokens carry more of the loss reduction than bucket 0",
                 overlap_total > zero_total,
                 "n>=1 " + eval::format_double(overlap_total) + " vs n=0 " + eval::format_double(zero_total)});

  std::size_t high = 0;
  for (const auto& [n, c] : eval::bucket_histogram(records)) {
    if (n >= m + 1 && n <= 2 * m) high += c;
  }
  out.push_back({"buckets m+1 .. 2m populated", high > 0, std::to_string(high) + " tokens"});
  return out;
}

// ---------------------------------------------------------------------------
// Pipeline

namespace {

struct Stage {
  std::string name;
  std::string key;                  // everything the outputs depend on
  std::vector<fs::path> outputs;    // must exist for a skip
  std::function<void()> run;
};

std::string stamp_of(const std::string& key) { return hex64(fnv1a64(key)) + "\n"; }

std::string file_key(const fs::path& p) { return p.filename().string() + ":" + hex64(hash_file(p)); }

}  // namespace

PipelineResult run_pipeline(const PipelineConfig& cfg, const Logger& log) {
  const auto say = [&](const std::string& s) {
    if (log) log(s);
  };
  if (cfg.out_dir.empty()) throw std::invalid_argument("pipeline needs an output directory");
  const fs::path out = cfg.out_dir;
  const fs::path stamps = out / ".stamps";
  fs::create_directories(stamps);

  const fs::path corpus = out / "corpus.jsonl";
  const fs::path vocab_path = out / "vocab.txt";
  const fs::path db_train = out / "db_train.rdb";
  const fs::path db_all = out / "db_trainval.rdb";
  const fs::path train_dir = out / "train";
  const fs::path final_ckpt = train_dir / train::checkpoint_name(cfg.train.steps);
  const fs::path eval_dir = out / "eval";
  const fs::path records = eval_dir / "records.csv";
  const fs::path analysis_dir = out / "analysis";
  const std::uint64_t embed_seed = sub_seed(cfg.seed, "embedder");

  PipelineResult result;
  const auto execute = [&](const Stage& st) {
    const fs::path stamp = stamps / st.name;
    const bool fresh = fs::exists(stamp) && read_text(stamp) == stamp_of(st.key) &&
                       std::all_of(st.outputs.begin(), st.outputs.end(),
                                   [](const fs::path& p) { return fs::exists(p); });
    if (fresh) {
      say("[" + st.name + "] up to date");
      result.skipped_stages.push_back(st.name);
      return;
    }
    say("[" + st.name + "] running");
    fs::remove(stamp);
    try {
      st.run();
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError(st.name, e.what());
    }
    write_text(stamp, stamp_of(st.key));
  };

  // 1. corpus and tokenizer
  {
    Stage st{"corpus", "", {corpus, vocab_path}, {}};
    std::ostringstream key;
    key << "vocab=" << cfg.vocab << '\n';
    if (cfg.corpus) {
      if (!fs::exists(*cfg.corpus)) throw StageError("corpus", "corpus file not found: " + cfg.corpus->string());
      key << "ingest " << file_key(*cfg.corpus);
    } else {
      key << "synth seed=" << cfg.synth.seed << " n=" << cfg.synth.n_docs
          << " words=" << cfg.synth.doc_words << " lex=" << cfg.synth.lexicon << " succ=" << cfg.synth.successors
          << " skew=" << eval::format_double(cfg.synth.skew)
          << " rho=" << eval::format_double(cfg.synth.rho)
          << " dup=" << eval::format_double(cfg.synth.train_dup_rate) << " plant=" << cfg.synth.plant_words
          << " off=" << cfg.synth.plant_max_offset << " val=" << eval::format_double(cfg.synth.val_fraction);
    }
    st.key = key.str();
    st.run = [&] {
      std::vector<RawDocument> docs;
      if (cfg.corpus) {
        docs = read_jsonl(*cfg.corpus);
      } else {
        docs = synth::synth_corpus(cfg.synth).docs;
      }
      write_text(corpus, to_jsonl(docs));
      fs::remove(vocab_path);
      const auto texts = texts_of_split(docs, Split::train);
      const auto v = tok::train_bpe(texts, cfg.vocab);
      write_text(vocab_path, v.serialize());
    };
    execute(st);
  }

  const auto corpus_key = [&] { return file_key(corpus) + " " + file_key(vocab_path); };

  // 2. training database
  const auto build_db = [&](const std::string& name, const fs::path& path, bool with_val) {
    Stage st{name, corpus_key() + " m=" + std::to_string(cfg.model.m) + " d=" + std::to_string(cfg.embed_dim) +
                       " seed=" + std::to_string(embed_seed) + (with_val ? " +val" : ""),
             {path}, {}};
    st.run = [&, with_val, path] {
      const auto vocab = tok::Vocab::load(vocab_path);
      const auto docs = load_tokens(corpus, vocab, with_val);
      store::ChunkingConfig cc;
      cc.m = cfg.model.m;
      store::build_database(docs, cc, cfg.embed_dim, embed_seed).save(path);
    };
    execute(st);
  };
  build_db("build-db-train", db_train, false);

  // 3. training
  {
    std::ostringstream key;
    key << corpus_key() << ' ' << file_key(db_train) << "\nmodel\n"
        << cfg.model.serialize() << "steps=" << cfg.train.steps << " batch=" << cfg.train.batch
        << " lr=" << eval::format_double(cfg.train.lr) << " seed=" << cfg.train.seed
        << " every=" << cfg.train.checkpoint_interval << " clip=" << cfg.train.clip << ':'
        << eval::format_double(cfg.train.clip_norm);
    Stage st{"train", key.str(), {final_ckpt, train_dir / "loss.csv"}, {}};
    st.run = [&] {
      const auto vocab = tok::Vocab::load(vocab_path);
      if (vocab.size() != cfg.model.vocab_size) {
        throw std::invalid_argument("tokenizer has " + std::to_string(vocab.size()) +
                                    " entries but the model expects " + std::to_string(cfg.model.vocab_size));
      }
      const auto docs = load_tokens(corpus, vocab, false);
      const auto db = store::ChunkDatabase::load(db_train);
      fs::remove_all(train_dir);
      train::TrainOptions opts;
      opts.out_dir = train_dir;
      const std::size_t every = std::max<std::size_t>(1, cfg.train.steps / 20);
      double window = 0;
      opts.on_step = [&](std::size_t step, double loss) {
        window += loss;
        if (step % every == 0) {
          say("  step " + std::to_string(step) + " loss " + eval::format_double(window / double(every)));
          window = 0;
        }
      };
      train::train(cfg.model, cfg.train, docs, db, opts);
    };
    execute(st);
  }

  // 4. evaluation database
  build_db("build-db-trainval", db_all, true);

  // 5. evaluation
  {
    Stage st{"eval", file_key(final_ckpt) + " " + file_key(db_all) + " " + corpus_key(),
             {records, eval_dir / "summary.txt"}, {}};
    st.run = [&] {
      const auto vocab = tok::Vocab::load(vocab_path);
      const auto params = model::ModelParams<float>::from_checkpoint(cfg.model, read_checkpoint(final_ckpt));
      const auto db = store::ChunkDatabase::load(db_all);
      const auto val = select_split(load_tokens(corpus, vocab, true), Split::validation);
      if (val.empty()) throw std::runtime_error("corpus has no validation documents");
      const auto recs = eval::evaluate(params, cfg.model, db, val);
      eval::write_records(records, recs);
      const auto s = eval::summarize(recs);
      std::size_t bytes = 0;
      for (const auto& r : recs) bytes += vocab.bytes_of(r.token).size();
      std::ostringstream o;
      o << "tokens=" << s.tokens << '\n'
        << "mean_loss_on=" << eval::format_double(s.mean_loss_on) << '\n'
        << "mean_loss_off=" << eval::format_double(s.mean_loss_off) << '\n';
      if (bytes) {
        o << "bpb_on=" << eval::format_double(eval::bits_per_byte(s.sum_loss_on, bytes)) << '\n'
          << "bpb_off=" << eval::format_double(eval::bits_per_byte(s.sum_loss_off, bytes)) << '\n';
      }
      write_text(eval_dir / "summary.txt", o.str());
      say("  mean loss on " + eval::format_double(s.mean_loss_on) + ", off " +
          eval::format_double(s.mean_loss_off));
    };
    execute(st);
  }

  // 6. analysis
  {
    Stage st{"analyze", file_key(records) + " log_y=" + std::to_string(cfg.log_y),
             {analysis_dir / "report.csv", analysis_dir / "bucket_hist.svg"}, {}};
    st.run = [&] { analyze(records, analysis_dir, cfg.log_y); };
    execute(st);
  }

  // Manifest: every artifact under out_dir, sorted by path.
  write_text(out / "config.txt", cfg.serialize());
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(out)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), out);
    if (rel == "manifest.txt" || *rel.begin() == ".stamps") continue;
    files.push_back(rel);
  }
  std::sort(files.begin(), files.end());
  std::ostringstream m;
  for (const auto& f : files) {
    const ManifestEntry me{f.generic_string(), hash_file(out / f)};
    result.manifest.push_back(me);
    m << hex64(me.hash) << "  " << me.path << '\n';
  }
  write_text(out / "manifest.txt", m.str());
  return result;
}

}  // namespace retro::pipeline
