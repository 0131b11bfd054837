#include "retro/model.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <random>
#include <sstream>

namespace retro::model {

using tensor::AttentionMask;
using tensor::RelativeBias;
using tensor::Tape;

// ---------------------------------------------------------------------------
// RetroConfig

RetroConfig RetroConfig::preset_named(std::string_view name) {
  RetroConfig c;
  if (name == "desk") return c;
  if (name == "paper-425m") {
    c.preset = "paper-425m";
    c.vocab_size = 32128;
    c.m = 64;
    c.k = 2;
    c.max_len = 1024;
    c.encoder = {2, 14, 896, 3584, {2}};
    c.decoder = {12, 12, 1536, 6144, {6, 9, 12}};
    return c;
  }
  throw std::invalid_argument("unknown preset '" + std::string(name) +
                              "' (expected desk or paper-425m)");
}

void RetroConfig::validate() const {
  const auto fail = [](const std::string& msg) { throw std::invalid_argument("config: " + msg); };
  if (vocab_size <= kNumSpecial) fail("vocab_size too small");
  if (m < 2) fail("m must be at least 2");
  if (k < 1) fail("k must be at least 1");
  if (max_len == 0 || max_len % m != 0) fail("max_len must be a positive multiple of m");
  for (const auto* s : {&encoder, &decoder}) {
    if (s->layers == 0 || s->heads == 0 || s->hidden == 0 || s->ffn == 0) {
      fail("stack dimensions must be positive");
    }
    if (s->hidden % s->heads != 0) fail("hidden size must divide evenly into heads");
    for (auto l : s->cross_layers) {
      if (l < 1 || l > s->layers) fail("cross-attention layer " + std::to_string(l) + " out of range");
    }
  }
  if (decoder.cross_layers.empty()) fail("decoder needs at least one CCA layer");
}

namespace {

std::string join(const std::vector<std::size_t>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(xs[i]);
  }
  return out;
}

std::vector<std::size_t> split_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stoul(item));
  }
  return out;
}

std::string fmt_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

}  // namespace

std::string RetroConfig::serialize() const {
  std::ostringstream o;
  o << "preset=" << preset << '\n'
    << "vocab_size=" << vocab_size << '\n'
    << "m=" << m << '\n'
    << "k=" << k << '\n'
    << "max_len=" << max_len << '\n';
  for (const auto& [name, s] : {std::pair{"encoder", &encoder}, std::pair{"decoder", &decoder}}) {
    o << name << ".layers=" << s->layers << '\n'
      << name << ".heads=" << s->heads << '\n'
      << name << ".hidden=" << s->hidden << '\n'
      << name << ".ffn=" << s->ffn << '\n'
      << name << ".cross_layers=" << join(s->cross_layers) << '\n';
  }
  o << "activation=" << (activation == tensor::Activation::gelu ? "gelu" : "relu") << '\n'
    << "init_std=" << fmt_double(init_std) << '\n';
  return o.str();
}

RetroConfig RetroConfig::parse(std::string_view text) {
  std::map<std::string, std::string> kv;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("config line without '=': " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  RetroConfig c = preset_named(kv.count("preset") ? kv["preset"] : "desk");
  const auto num = [&](const char* key, std::size_t& field) {
    if (auto it = kv.find(key); it != kv.end()) field = std::stoul(it->second);
  };
  num("vocab_size", c.vocab_size);
  num("m", c.m);
  num("k", c.k);
  num("max_len", c.max_len);
  for (const auto& [name, s] : {std::pair{std::string("encoder"), &c.encoder},
                                std::pair{std::string("decoder"), &c.decoder}}) {
    num((name + ".layers").c_str(), s->layers);
    num((name + ".heads").c_str(), s->heads);
    num((name + ".hidden").c_str(), s->hidden);
    num((name + ".ffn").c_str(), s->ffn);
    if (auto it = kv.find(name + ".cross_layers"); it != kv.end()) s->cross_layers = split_list(it->second);
  }
  if (auto it = kv.find("activation"); it != kv.end()) {
    if (it->second == "gelu") c.activation = tensor::Activation::gelu;
    else if (it->second == "relu") c.activation = tensor::Activation::relu;
    else throw std::invalid_argument("unknown activation " + it->second);
  }
  if (auto it = kv.find("init_std"); it != kv.end()) c.init_std = std::stod(it->second);
  c.validate();
  return c;
}

namespace {

struct ParamSpec {
  std::string name;
  tensor::Shape shape;
  enum class Init { normal, zeros, ones } init;
};

bool has_cross(const StackConfig& s, std::size_t layer) {
  return std::find(s.cross_layers.begin(), s.cross_layers.end(), layer) != s.cross_layers.end();
}

std::size_t dec_self_offsets(const RetroConfig& c) { return 2 * c.max_len - 1; }
std::size_t cca_offsets(const RetroConfig& c) { return c.max_len + 2 * c.m - 1; }
std::size_t enc_self_offsets(const RetroConfig& c) { return 4 * c.m - 1; }
std::size_t enc_ca_offsets(const RetroConfig& c) { return c.max_len + 2 * c.m - 1; }

void attention_specs(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t width,
                     std::size_t kv_width, std::size_t heads, std::size_t offsets) {
  using I = ParamSpec::Init;
  out.push_back({prefix + ".ln.g", {width}, I::ones});
  out.push_back({prefix + ".ln.b", {width}, I::zeros});
  out.push_back({prefix + ".wq", {width, width}, I::normal});
  out.push_back({prefix + ".wk", {kv_width, width}, I::normal});
  out.push_back({prefix + ".wv", {kv_width, width}, I::normal});
  out.push_back({prefix + ".wo", {width, width}, I::normal});
  out.push_back({prefix + ".rel", {heads, offsets}, I::zeros});
}

void ffn_specs(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t width,
               std::size_t ffn) {
  using I = ParamSpec::Init;
  out.push_back({prefix + ".ln.g", {width}, I::ones});
  out.push_back({prefix + ".ln.b", {width}, I::zeros});
  out.push_back({prefix + ".w1", {width, ffn}, I::normal});
  out.push_back({prefix + ".b1", {ffn}, I::zeros});
  out.push_back({prefix + ".w2", {ffn, width}, I::normal});
  out.push_back({prefix + ".b2", {width}, I::zeros});
}

std::vector<ParamSpec> param_specs(const RetroConfig& c) {
  using I = ParamSpec::Init;
  const std::size_t D = c.decoder.hidden, E = c.encoder.hidden, V = c.vocab_size;
  std::vector<ParamSpec> out;
  out.push_back({"dec.embed", {V, D}, I::normal});
  for (std::size_t l = 1; l <= c.decoder.layers; ++l) {
    const std::string p = "dec." + std::to_string(l);
    attention_specs(out, p + ".self", D, D, c.decoder.heads, dec_self_offsets(c));
    if (has_cross(c.decoder, l)) attention_specs(out, p + ".cca", D, E, c.decoder.heads, cca_offsets(c));
    ffn_specs(out, p + ".ffn", D, c.decoder.ffn);
  }
  out.push_back({"dec.final.g", {D}, I::ones});
  out.push_back({"dec.final.b", {D}, I::zeros});
  out.push_back({"dec.out.w", {D, V}, I::normal});
  out.push_back({"dec.out.b", {V}, I::zeros});
  out.push_back({"enc.embed", {V, E}, I::normal});
  for (std::size_t l = 1; l <= c.encoder.layers; ++l) {
    const std::string p = "enc." + std::to_string(l);
    attention_specs(out, p + ".self", E, E, c.encoder.heads, enc_self_offsets(c));
    if (has_cross(c.encoder, l)) attention_specs(out, p + ".ca", E, D, c.encoder.heads, enc_ca_offsets(c));
    ffn_specs(out, p + ".ffn", E, c.encoder.ffn);
  }
  out.push_back({"enc.final.g", {E}, I::ones});
  out.push_back({"enc.final.b", {E}, I::zeros});
  return out;
}

// Box-Muller on a 64-bit engine; stable across standard libraries.
double uniform01(std::mt19937_64& rng) { return double(rng() >> 11) * 0x1.0p-53; }

double truncated_normal(std::mt19937_64& rng) {
  while (true) {
    const double u1 = uniform01(rng), u2 = uniform01(rng);
    const double z = std::sqrt(-2.0 * std::log(1.0 - u1)) * std::cos(2.0 * M_PI * u2);
    if (std::abs(z) <= 2.0) return z;
  }
}

}  // namespace

std::size_t RetroConfig::parameter_count(bool include_embeddings) const {
  std::size_t n = 0;
  for (const auto& s : param_specs(*this)) {
    const bool embedding = s.name == "dec.embed" || s.name == "enc.embed" ||
                           s.name == "dec.out.w" || s.name == "dec.out.b";
    if (embedding && !include_embeddings) continue;
    n += tensor::numel(s.shape);
  }
  return n;
}

// ---------------------------------------------------------------------------
// ModelParams

namespace {

template <typename T>
void bind(ModelParams<T>& p, const RetroConfig& c) {
  const auto attn = [&](const std::string& prefix) {
    AttentionWeights<T> w;
    w.ln_gain = p.at(prefix + ".ln.g");
    w.ln_bias = p.at(prefix + ".ln.b");
    w.wq = p.at(prefix + ".wq");
    w.wk = p.at(prefix + ".wk");
    w.wv = p.at(prefix + ".wv");
    w.wo = p.at(prefix + ".wo");
    w.rel_bias = p.at(prefix + ".rel");
    return w;
  };
  const auto ffn = [&](const std::string& prefix) {
    FeedForwardWeights<T> w;
    w.ln_gain = p.at(prefix + ".ln.g");
    w.ln_bias = p.at(prefix + ".ln.b");
    w.w1 = p.at(prefix + ".w1");
    w.b1 = p.at(prefix + ".b1");
    w.w2 = p.at(prefix + ".w2");
    w.b2 = p.at(prefix + ".b2");
    return w;
  };
  const auto stack = [&](const std::string& name, const StackConfig& s, const char* cross) {
    std::vector<LayerWeights<T>> layers;
    for (std::size_t l = 1; l <= s.layers; ++l) {
      const std::string prefix = name + "." + std::to_string(l);
      LayerWeights<T> lw;
      lw.self = attn(prefix + ".self");
      if (has_cross(s, l)) lw.cross = attn(prefix + "." + cross);
      lw.ffn = ffn(prefix + ".ffn");
      layers.push_back(std::move(lw));
    }
    return layers;
  };
  p.dec_embed = p.at("dec.embed");
  p.enc_embed = p.at("enc.embed");
  p.decoder = stack("dec", c.decoder, "cca");
  p.encoder = stack("enc", c.encoder, "ca");
  p.dec_final_gain = p.at("dec.final.g");
  p.dec_final_bias = p.at("dec.final.b");
  p.enc_final_gain = p.at("enc.final.g");
  p.enc_final_bias = p.at("enc.final.b");
  p.out_w = p.at("dec.out.w");
  p.out_b = p.at("dec.out.b");
}

}  // namespace

template <typename T>
ModelParams<T> ModelParams<T>::init(const RetroConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelParams p;
  for (const auto& s : param_specs(cfg)) {
    std::vector<T> v(tensor::numel(s.shape), T(0));
    if (s.init == ParamSpec::Init::ones) {
      std::fill(v.begin(), v.end(), T(1));
    } else if (s.init == ParamSpec::Init::normal) {
      std::mt19937_64 rng(mix64(seed ^ fnv1a64(s.name)));
      for (auto& x : v) x = T(cfg.init_std * truncated_normal(rng));
    }
    p.names.push_back(s.name);
    p.tensors.push_back(Tensor<T>::from(s.shape, std::move(v), true));
  }
  bind(p, cfg);
  return p;
}

template <typename T>
ModelParams<T> ModelParams<T>::clone() const {
  ModelParams p;
  p.names = names;
  for (const auto& t : tensors) {
    p.tensors.push_back(Tensor<T>::from(t.shape(), std::vector<T>(t.values().begin(), t.values().end()),
                                        t.requires_grad()));
  }
  // Rebind by name: the layout is fully determined by the names.
  const auto find = [&](const Tensor<T>& t) -> std::size_t {
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      if (tensors[i].same_node(t)) return i;
    }
    throw std::logic_error("unregistered tensor");
  };
  const auto remap = [&](Tensor<T>& slot) {
    if (slot.defined()) slot = p.tensors[find(slot)];
  };
  p.dec_embed = dec_embed;
  p.enc_embed = enc_embed;
  p.decoder = decoder;
  p.encoder = encoder;
  p.dec_final_gain = dec_final_gain;
  p.dec_final_bias = dec_final_bias;
  p.enc_final_gain = enc_final_gain;
  p.enc_final_bias = enc_final_bias;
  p.out_w = out_w;
  p.out_b = out_b;
  for (auto* slot : {&p.dec_embed, &p.enc_embed, &p.dec_final_gain, &p.dec_final_bias,
                     &p.enc_final_gain, &p.enc_final_bias, &p.out_w, &p.out_b}) {
    remap(*slot);
  }
  for (auto* stack : {&p.decoder, &p.encoder}) {
    for (auto& l : *stack) {
      for (auto* a : {&l.self, l.cross ? &*l.cross : nullptr}) {
        if (!a) continue;
        for (auto* s : {&a->ln_gain, &a->ln_bias, &a->wq, &a->wk, &a->wv, &a->wo, &a->rel_bias}) remap(*s);
      }
      for (auto* s : {&l.ffn.ln_gain, &l.ffn.ln_bias, &l.ffn.w1, &l.ffn.b1, &l.ffn.w2, &l.ffn.b2}) remap(*s);
    }
  }
  return p;
}

template <typename T>
Tensor<T>& ModelParams<T>::at(std::string_view name) {
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == name) return tensors[i];
  }
  throw std::out_of_range("no parameter named " + std::string(name));
}

template <typename T>
const Tensor<T>& ModelParams<T>::at(std::string_view name) const {
  return const_cast<ModelParams*>(this)->at(name);
}

template <typename T>
void ModelParams<T>::zero_grad() {
  for (auto& t : tensors) t.zero_grad();
}

template <typename T>
void ModelParams<T>::to_checkpoint(Checkpoint& ckpt) const {
  for (std::size_t i = 0; i < names.size(); ++i) {
    const auto v = tensors[i].values();
    ckpt.records.push_back({names[i], tensors[i].shape(), std::vector<float>(v.begin(), v.end())});
  }
}

template <typename T>
ModelParams<T> ModelParams<T>::from_checkpoint(const RetroConfig& cfg, const Checkpoint& ckpt) {
  if (ckpt.config_hash != cfg.hash()) {
    throw std::invalid_argument("checkpoint was written for a different model config");
  }
  auto p = init(cfg, 0);
  for (std::size_t i = 0; i < p.names.size(); ++i) {
    const auto* rec = ckpt.find(p.names[i]);
    if (!rec) throw std::runtime_error("checkpoint lacks parameter " + p.names[i]);
    if (rec->shape != p.tensors[i].shape()) {
      throw std::runtime_error("checkpoint shape mismatch for " + p.names[i]);
    }
    auto dst = p.tensors[i].mutable_values();
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = T(rec->data[j]);
  }
  return p;
}

// ---------------------------------------------------------------------------
// NeighborBatch

NeighborBatch NeighborBatch::from_indices(const store::ChunkDatabase& db,
                                          const std::vector<std::vector<std::int64_t>>& indices,
                                          std::size_t k) {
  NeighborBatch nb;
  nb.k = k;
  nb.width = 2 * db.m;
  for (const auto& entry : indices) {
    if (entry.size() != k) throw std::invalid_argument("neighbor entry does not hold k pairs");
    for (auto idx : entry) {
      const auto pair = store::materialize(db, idx);
      nb.tokens.insert(nb.tokens.end(), pair.tokens.begin(), pair.tokens.end());
      nb.valid.push_back(pair.valid() ? 1 : 0);
    }
  }
  return nb;
}

// ---------------------------------------------------------------------------
// Forward

namespace {

template <typename T>
Tensor<T> linear(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w) {
  return tensor::matmul(tape, x, w);
}

struct Geometry {
  std::vector<std::int32_t> query_pos;
  std::vector<std::int32_t> key_pos;
  std::int64_t min_offset = 0;
  AttentionMask mask;
};

template <typename T>
Tensor<T> attend(Tape<T>& tape, const AttentionWeights<T>& w, const Tensor<T>& query_in,
                 const Tensor<T>& kv_in, std::size_t heads, const Geometry& g) {
  const auto q = linear(tape, query_in, w.wq);
  const auto k = linear(tape, kv_in, w.wk);
  const auto v = linear(tape, kv_in, w.wv);
  RelativeBias<T> rb{w.rel_bias, g.min_offset, g.query_pos, g.key_pos};
  const auto a = tensor::attention(tape, q, k, v, heads, &rb, g.mask);
  return linear(tape, a, w.wo);
}

template <typename T>
Tensor<T> feed_forward(Tape<T>& tape, const FeedForwardWeights<T>& w, const Tensor<T>& x,
                       tensor::Activation act) {
  const auto a = tensor::layer_norm(tape, x, w.ln_gain, w.ln_bias);
  auto h = tensor::add_bias(tape, linear(tape, a, w.w1), w.b1);
  h = tensor::activation(tape, h, act);
  return tensor::add_bias(tape, linear(tape, h, w.w2), w.b2);
}

template <typename T>
Tensor<T> self_block(Tape<T>& tape, const AttentionWeights<T>& w, const Tensor<T>& x,
                     std::size_t heads, const Geometry& g) {
  const auto a = tensor::layer_norm(tape, x, w.ln_gain, w.ln_bias);
  return tensor::add(tape, x, attend(tape, w, a, a, heads, g));
}

template <typename T>
Tensor<T> cross_block(Tape<T>& tape, const AttentionWeights<T>& w, const Tensor<T>& x,
                      const Tensor<T>& source, std::size_t heads, const Geometry& g) {
  const auto a = tensor::layer_norm(tape, x, w.ln_gain, w.ln_bias);
  return tensor::add(tape, x, attend(tape, w, a, source, heads, g));
}

// Row bookkeeping for the retrieval side of one batch.
struct NeighborLayout {
  std::vector<TokenId> ids;               // encoder rows
  std::vector<std::uint8_t> key_valid;    // encoder rows
  Geometry enc_self, enc_cross, cca;
  std::size_t rows = 0;
};

NeighborLayout layout_neighbors(const RetroConfig& cfg, const Batch& batch, std::size_t seq_rows,
                                const std::vector<std::int32_t>& dec_pos) {
  const std::size_t m = cfg.m, width = 2 * m, k = cfg.k;
  const std::size_t B = batch.sequences.size();
  if (batch.neighbors.size() != B) {
    throw std::invalid_argument("misaligned neighbor batch: expected one entry list per sequence");
  }
  NeighborLayout L;
  // block_start[b][e] = first encoder row of entry e of sequence b
  std::vector<std::vector<std::size_t>> entry_start(B);
  for (std::size_t b = 0; b < B; ++b) {
    const auto& nb = batch.neighbors[b];
    const std::size_t len = batch.sequences[b].size();
    const std::size_t entries = nb.entries();
    const std::size_t regular = (len + m - 1) / m - 1;
    const bool lookahead = len % m == 0 && entries == len / m;
    if (nb.k != k || nb.width != width || nb.tokens.size() != nb.valid.size() * width ||
        (entries != regular && !lookahead)) {
      throw std::invalid_argument("misaligned neighbor batch for sequence " + std::to_string(b) +
                                  ": " + std::to_string(entries) + " entries for " +
                                  std::to_string(len) + " tokens");
    }
    for (std::size_t e = 0; e < entries; ++e) {
      entry_start[b].push_back(L.rows);
      for (std::size_t j = 0; j < k; ++j) {
        const std::size_t block = e * k + j;
        const bool ok = nb.valid[block] != 0;
        const std::size_t block_row = L.rows;
        for (std::size_t t = 0; t < width; ++t) {
          const TokenId id = nb.tokens[block * width + t];
          if (id >= cfg.vocab_size) throw std::out_of_range("neighbor token id out of range");
          L.ids.push_back(id);
          L.key_valid.push_back(ok && id != kPad ? 1 : 0);
          // Encoder self-attention stays inside one neighbor.
          L.enc_self.query_pos.push_back(static_cast<std::int32_t>(t));
          L.enc_self.mask.begin.push_back(static_cast<std::uint32_t>(block_row));
          L.enc_self.mask.end.push_back(static_cast<std::uint32_t>(block_row + width));
          // Encoder CA sees the decoder states of the chunk that retrieved it.
          const std::size_t chunk_row = b * seq_rows + e * m;
          L.enc_cross.query_pos.push_back(static_cast<std::int32_t>(t));
          L.enc_cross.mask.begin.push_back(static_cast<std::uint32_t>(chunk_row));
          L.enc_cross.mask.end.push_back(static_cast<std::uint32_t>(chunk_row + m));
          ++L.rows;
        }
      }
    }
  }
  L.enc_self.key_pos = L.enc_self.query_pos;
  L.enc_self.min_offset = -static_cast<std::int64_t>(width - 1);
  L.enc_self.mask.queries = L.enc_self.mask.keys = L.rows;
  L.enc_self.mask.key_valid = L.key_valid;

  L.enc_cross.key_pos = dec_pos;
  L.enc_cross.min_offset = -static_cast<std::int64_t>(width - 1);
  L.enc_cross.mask.queries = L.rows;
  L.enc_cross.mask.keys = B * seq_rows;

  // CCA: position p reads entry floor((p + 1) / m) - 1.
  L.cca.query_pos = dec_pos;
  L.cca.key_pos = L.enc_self.query_pos;
  L.cca.min_offset = -static_cast<std::int64_t>(cfg.max_len - 1);
  L.cca.mask.queries = B * seq_rows;
  L.cca.mask.keys = L.rows;
  L.cca.mask.key_valid = L.key_valid;
  L.cca.mask.begin.assign(B * seq_rows, 0);
  L.cca.mask.end.assign(B * seq_rows, 0);
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t len = batch.sequences[b].size();
    for (std::size_t p = 0; p < len; ++p) {
      const std::size_t q = (p + 1) / m;
      if (q == 0 || q - 1 >= entry_start[b].size()) continue;
      const std::size_t start = entry_start[b][q - 1];
      L.cca.mask.begin[b * seq_rows + p] = static_cast<std::uint32_t>(start);
      L.cca.mask.end[b * seq_rows + p] = static_cast<std::uint32_t>(start + k * width);
    }
  }
  return L;
}

template <typename T>
Tensor<T> run_encoder(Tape<T>& tape, const ModelParams<T>& params, const RetroConfig& cfg,
                      const NeighborLayout& L, const Tensor<T>& decoder_states) {
  auto e = tensor::embedding_lookup(tape, params.enc_embed, L.ids);
  for (const auto& layer : params.encoder) {
    e = self_block(tape, layer.self, e, cfg.encoder.heads, L.enc_self);
    if (layer.cross) {
      e = cross_block(tape, *layer.cross, e, decoder_states, cfg.encoder.heads, L.enc_cross);
    }
    e = tensor::add(tape, e, feed_forward(tape, layer.ffn, e, cfg.activation));
  }
  return tensor::layer_norm(tape, e, params.enc_final_gain, params.enc_final_bias);
}

}  // namespace

template <typename T>
ForwardResult<T> forward(Tape<T>& tape, const ModelParams<T>& params, const RetroConfig& cfg,
                         const Batch& batch, Mode mode) {
  const std::size_t B = batch.sequences.size();
  if (B == 0) throw std::invalid_argument("empty batch");
  std::size_t seq_rows = 0;
  for (const auto& s : batch.sequences) {
    if (s.empty()) throw std::invalid_argument("empty sequence");
    if (s.size() > cfg.max_len) {
      throw std::invalid_argument("sequence length " + std::to_string(s.size()) +
                                  " exceeds max_len " + std::to_string(cfg.max_len));
    }
    seq_rows = std::max(seq_rows, s.size());
  }
  const std::size_t rows = B * seq_rows;
  std::vector<TokenId> ids(rows, kPad), targets(rows, kPad);
  std::vector<std::int32_t> pos(rows);
  Geometry self;
  self.mask.queries = self.mask.keys = rows;
  self.mask.begin.resize(rows);
  self.mask.end.resize(rows);
  std::size_t target_count = 0;
  for (std::size_t b = 0; b < B; ++b) {
    const auto& s = batch.sequences[b];
    for (std::size_t p = 0; p < seq_rows; ++p) {
      const std::size_t r = b * seq_rows + p;
      if (p < s.size()) {
        if (s[p] >= cfg.vocab_size) throw std::out_of_range("token id out of range");
        ids[r] = s[p];
      }
      if (p + 1 < s.size()) {
        targets[r] = s[p + 1];
        if (targets[r] != kPad) ++target_count;
      }
      pos[r] = static_cast<std::int32_t>(p);
      self.mask.begin[r] = static_cast<std::uint32_t>(b * seq_rows);
      self.mask.end[r] = static_cast<std::uint32_t>(r + 1);
    }
  }
  self.query_pos = pos;
  self.key_pos = pos;
  self.min_offset = -static_cast<std::int64_t>(cfg.max_len - 1);

  std::optional<NeighborLayout> nl;
  if (mode == Mode::on) {
    nl = layout_neighbors(cfg, batch, seq_rows, pos);
    if (nl->rows == 0) nl.reset();  // nothing to attend to: identical to the bypass
  }

  auto h = tensor::embedding_lookup(tape, params.dec_embed, ids);
  Tensor<T> encoded;
  for (const auto& layer : params.decoder) {
    h = self_block(tape, layer.self, h, cfg.decoder.heads, self);
    if (layer.cross && nl) {
      if (!encoded.defined()) encoded = run_encoder(tape, params, cfg, *nl, h);
      h = cross_block(tape, *layer.cross, h, encoded, cfg.decoder.heads, nl->cca);
    }
    h = tensor::add(tape, h, feed_forward(tape, layer.ffn, h, cfg.activation));
  }
  h = tensor::layer_norm(tape, h, params.dec_final_gain, params.dec_final_bias);

  ForwardResult<T> r;
  r.logits = tensor::add_bias(tape, linear(tape, h, params.out_w), params.out_b);
  r.losses = tensor::softmax_ce(tape, r.logits, targets, kPad);
  r.rows_per_seq = seq_rows;
  r.target_count = target_count;
  r.mean_loss = tensor::scale(tape, tensor::sum(tape, r.losses),
                              T(1) / T(std::max<std::size_t>(target_count, 1)));
  return r;
}

template <typename T>
ForwardResult<T> forward_on(Tape<T>& tape, const ModelParams<T>& params, const RetroConfig& cfg,
                            const std::vector<TokenId>& sequence, const NeighborBatch& neighbors) {
  Batch b;
  b.sequences.push_back(sequence);
  b.neighbors.push_back(neighbors);
  return forward(tape, params, cfg, b, Mode::on);
}

template <typename T>
ForwardResult<T> forward_off(Tape<T>& tape, const ModelParams<T>& params, const RetroConfig& cfg,
                             const std::vector<TokenId>& sequence) {
  Batch b;
  b.sequences.push_back(sequence);
  return forward(tape, params, cfg, b, Mode::off);
}

// ---------------------------------------------------------------------------
// Generation

std::vector<TokenId> generate(const ModelParams<float>& params, const RetroConfig& cfg,
                              const store::ChunkDatabase* db, const store::RetrievalConfig& rcfg,
                              std::vector<TokenId> prompt, std::size_t steps,
                              const Sampling& sampling, Mode mode) {
  if (prompt.empty()) throw std::invalid_argument("prompt must be non-empty");
  if (mode == Mode::on && !db) throw std::invalid_argument("generation with retrieval needs a database");
  if (prompt.size() + steps > cfg.max_len) {
    throw std::invalid_argument("prompt plus steps exceeds max_len");
  }
  if (db && db->m != cfg.m) throw std::invalid_argument("database chunk size differs from model");
  std::mt19937_64 rng(sampling.seed);
  constexpr std::uint32_t kNoDoc = 0xffffffffu;
  std::vector<std::vector<std::int64_t>> entries;
  auto seq = std::move(prompt);
  for (std::size_t step = 0; step < steps; ++step) {
    Batch batch;
    batch.sequences.push_back(seq);
    if (mode == Mode::on) {
      // Fetch RET(C_u) for every chunk completed so far.
      while (entries.size() < seq.size() / cfg.m) {
        const std::size_t u = entries.size() + 1;
        const auto key = store::embed_chunk(
            std::span<const TokenId>(seq).subspan((u - 1) * cfg.m, cfg.m), db->d, db->embed_seed);
        entries.push_back(store::search(*db, key, kNoDoc, rcfg));
      }
      batch.neighbors.push_back(NeighborBatch::from_indices(*db, entries, cfg.k));
    }
    Tape<float> tape(false);
    const auto r = forward(tape, params, cfg, batch, mode);
    const auto logits = r.logits.values().subspan((seq.size() - 1) * cfg.vocab_size, cfg.vocab_size);
    TokenId next = 0;
    if (sampling.greedy) {
      next = static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    } else {
      std::vector<double> p(logits.begin(), logits.end());
      for (auto& x : p) x /= sampling.temperature;
      tensor::softmax_inplace(std::span<double>(p));
      double u = double(rng() >> 11) * 0x1.0p-53, acc = 0;
      next = static_cast<TokenId>(p.size() - 1);
      for (std::size_t i = 0; i < p.size(); ++i) {
        acc += p[i];
        if (u < acc) {
          next = static_cast<TokenId>(i);
          break;
        }
      }
    }
    seq.push_back(next);
  }
  return seq;
}

#define RETRO_INSTANTIATE(T)                                                                   \
  template struct ModelParams<T>;                                                              \
  template ForwardResult<T> forward(Tape<T>&, const ModelParams<T>&, const RetroConfig&,       \
                                    const Batch&, Mode);                                       \
  template ForwardResult<T> forward_on(Tape<T>&, const ModelParams<T>&, const RetroConfig&,    \
                                       const std::vector<TokenId>&, const NeighborBatch&);     \
  template ForwardResult<T> forward_off(Tape<T>&, const ModelParams<T>&, const RetroConfig&,   \
                                        const std::vector<TokenId>&);

RETRO_INSTANTIATE(float)
RETRO_INSTANTIATE(double)
#undef RETRO_INSTANTIATE

}  // namespace retro::model
