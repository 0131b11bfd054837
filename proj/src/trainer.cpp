#include "retro/trainer.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <random>
#include <unordered_set>

#include "retro/checkpoint.hpp"

namespace retro::train {

namespace fs = std::filesystem;

TrainConfig TrainConfig::preset_named(std::string_view name) {
  TrainConfig c;
  if (name == "desk") return c;
  if (name == "paper-425m") {
    c.preset = "paper-425m";
    c.steps = 140000;
    c.batch = 16;
    c.lr = 1e-4;
    return c;
  }
  throw std::invalid_argument("unknown preset '" + std::string(name) + "'");
}

void TrainConfig::validate() const {
  if (steps < 1) throw std::invalid_argument("steps must be at least 1");
  if (batch < 1) throw std::invalid_argument("batch must be at least 1");
  if (!(lr > 0)) throw std::invalid_argument("lr must be positive");
  if (clip && !(clip_norm > 0)) throw std::invalid_argument("clip norm must be positive");
}

// ---------------------------------------------------------------------------

BatchStream::BatchStream(std::span<const TokenSequence> docs, std::size_t batch,
                         std::size_t max_len, std::uint64_t seed)
    : docs_(docs), batch_(batch), max_len_(max_len), seed_(seed) {
  if (docs.empty()) throw std::invalid_argument("empty training split");
  if (batch == 0 || max_len == 0) throw std::invalid_argument("batch and max_len must be positive");
}

const std::vector<std::size_t>& BatchStream::permutation(std::size_t epoch) const {
  if (epoch != cached_epoch_) {
    cached_perm_.resize(docs_.size());
    for (std::size_t i = 0; i < docs_.size(); ++i) cached_perm_[i] = i;
    std::mt19937_64 rng(mix64(seed_ ^ mix64(epoch + 1)));
    for (std::size_t i = docs_.size(); i > 1; --i) {
      std::swap(cached_perm_[i - 1], cached_perm_[rng() % i]);
    }
    cached_epoch_ = epoch;
  }
  return cached_perm_;
}

std::vector<std::size_t> BatchStream::indices(std::size_t step) const {
  std::vector<std::size_t> out;
  const std::size_t n = docs_.size();
  for (std::size_t j = 0; j < batch_; ++j) {
    const std::size_t s = step * batch_ + j;
    out.push_back(permutation(s / n)[s % n]);
  }
  return out;
}

std::vector<std::vector<TokenId>> BatchStream::at(std::size_t step) const {
  std::vector<std::vector<TokenId>> out;
  for (auto i : indices(step)) {
    const auto& t = docs_[i].tokens;
    out.emplace_back(t.begin(), t.begin() + std::min(t.size(), max_len_));
  }
  return out;
}

BatchStream make_batches(std::span<const TokenSequence> train_docs, const TrainConfig& cfg,
                         std::size_t max_len, std::uint64_t seed) {
  return BatchStream(train_docs, cfg.batch, max_len, seed);
}

std::string checkpoint_name(std::size_t step) { return "step-" + std::to_string(step) + ".rck1"; }

// ---------------------------------------------------------------------------
// Checkpoints carry parameters, Adam moments and the loss history.

void save_state(const fs::path& path, const model::RetroConfig& mcfg, const TrainState& state) {
  Checkpoint ck;
  ck.config_hash = mcfg.hash();
  ck.step = state.step();
  state.params.to_checkpoint(ck);
  const auto& names = state.params.names;
  if (!state.adam.m.empty()) {
    for (std::size_t i = 0; i < names.size(); ++i) {
      const auto& shape = state.params.tensors[i].shape();
      ck.records.push_back({"adam.m:" + names[i], shape, state.adam.m[i]});
      ck.records.push_back({"adam.v:" + names[i], shape, state.adam.v[i]});
    }
  }
  ck.records.push_back({"train.loss", {state.losses.size()}, state.losses});
  write_checkpoint(path, ck);
}

TrainState load_state(const fs::path& path, const model::RetroConfig& mcfg) {
  const auto ck = read_checkpoint(path);
  TrainState st{model::ModelParams<float>::from_checkpoint(mcfg, ck), {}, {}};
  if (const auto* rec = ck.find("train.loss")) st.losses = rec->data;
  if (st.losses.size() != ck.step) throw std::runtime_error("checkpoint loss history does not match its step");
  st.adam.step = static_cast<std::int64_t>(ck.step);
  if (ck.step > 0) {
    for (const auto& name : st.params.names) {
      const auto* m = ck.find("adam.m:" + name);
      const auto* v = ck.find("adam.v:" + name);
      if (!m || !v) throw std::runtime_error("checkpoint lacks optimizer state for " + name);
      st.adam.m.push_back(m->data);
      st.adam.v.push_back(v->data);
    }
  }
  return st;
}

void write_loss_csv(const fs::path& path, std::span<const float> losses) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "step,loss\n";
  char buf[64];
  for (std::size_t s = 0; s < losses.size(); ++s) {
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, losses[s]);
    out << (s + 1) << ',' << std::string_view(buf, p - buf) << '\n';
  }
}

// ---------------------------------------------------------------------------

TrainState train(const model::RetroConfig& mcfg, const TrainConfig& cfg,
                 std::span<const TokenSequence> train_docs, const store::ChunkDatabase& db,
                 const TrainOptions& opts) {
  mcfg.validate();
  cfg.validate();
  if (train_docs.empty()) throw std::invalid_argument("empty training split");
  if (db.m != mcfg.m) throw std::invalid_argument("database chunk size differs from model");
  std::unordered_set<std::uint32_t> train_ids;
  for (const auto& d : train_docs) {
    if (d.split != Split::train) throw std::invalid_argument("training documents must be in the train split");
    if (d.vocab_hash != db.vocab_hash) throw std::invalid_argument("vocab hash mismatch between corpus and database");
    train_ids.insert(d.doc_id);
  }
  for (auto id : db.doc_set()) {
    if (!train_ids.count(id)) {
      throw std::invalid_argument("training database holds document " + std::to_string(id) +
                                  " outside the training split");
    }
  }

  // Neighbors depend only on the frozen database, so one pass serves all steps.
  store::RetrievalConfig rcfg;
  rcfg.k = mcfg.k;
  std::vector<std::vector<std::vector<std::int64_t>>> cache(train_docs.size());
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < train_docs.size(); ++i) {
    const auto& t = train_docs[i].tokens;
    const std::span<const TokenId> seq(t.data(), std::min(t.size(), mcfg.max_len));
    cache[i] = store::retrieve_for_sequence(db, seq, train_docs[i].doc_id, rcfg);
  }
  for (std::size_t i = 0; i < train_docs.size(); ++i) {
    for (const auto& entry : cache[i]) {
      for (auto idx : entry) {
        if (idx >= 0 && db.doc_ids[idx] == train_docs[i].doc_id) {
          throw std::logic_error("neighbor from the query's own document (doc " +
                                 std::to_string(train_docs[i].doc_id) + ")");
        }
      }
    }
  }

  TrainState st = opts.resume ? load_state(*opts.resume, mcfg)
                              : TrainState{model::ModelParams<float>::init(mcfg, sub_seed(cfg.seed, "init")), {}, {}};
  if (st.step() > cfg.steps) throw std::invalid_argument("resume checkpoint is past the requested step count");

  if (!opts.out_dir.empty()) {
    fs::create_directories(opts.out_dir);
    std::ofstream(opts.out_dir / "config.txt", std::ios::binary) << mcfg.serialize();
  }

  const BatchStream stream(train_docs, cfg.batch, mcfg.max_len, sub_seed(cfg.seed, "shuffle"));
  optim::AdamConfig acfg;
  acfg.lr = cfg.lr;

  for (std::size_t step = st.step() + 1; step <= cfg.steps; ++step) {
    model::Batch batch;
    for (auto i : stream.indices(step - 1)) {
      const auto& t = train_docs[i].tokens;
      batch.sequences.emplace_back(t.begin(), t.begin() + std::min(t.size(), mcfg.max_len));
      batch.neighbors.push_back(model::NeighborBatch::from_indices(db, cache[i], mcfg.k));
    }
    tensor::Tape<float> tape;
    st.params.zero_grad();
    auto r = model::forward(tape, st.params, mcfg, batch, model::Mode::on);
    const float loss = r.mean_loss.item();
    if (!std::isfinite(loss)) {
      throw std::runtime_error("non-finite loss at step " + std::to_string(step));
    }
    tape.backward(r.mean_loss);
    if (cfg.clip) optim::clip_grad_norm(st.params.tensors, cfg.clip_norm);
    optim::adam_step(st.params.tensors, st.adam, acfg);
    st.losses.push_back(loss);
    if (opts.on_step) opts.on_step(step, loss);

    const bool last = step == cfg.steps;
    if (!opts.out_dir.empty() &&
        (last || (cfg.checkpoint_interval && step % cfg.checkpoint_interval == 0))) {
      save_state(opts.out_dir / checkpoint_name(step), mcfg, st);
    }
  }
  if (!opts.out_dir.empty()) write_loss_csv(opts.out_dir / "loss.csv", st.losses);
  return st;
}

}  // namespace retro::train
