#include "retro/synth.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <unordered_set>

namespace retro::synth {

void CorpusSpec::validate() const {
  if (!(rho >= 0 && rho <= 1)) throw std::invalid_argument("rho must lie in [0, 1]");
  if (!(train_dup_rate >= 0 && train_dup_rate <= 1)) {
    throw std::invalid_argument("train duplicate rate must lie in [0, 1]");
  }
  if (!(val_fraction > 0 && val_fraction < 1)) throw std::invalid_argument("validation fraction must lie in (0, 1)");
  if (n_docs < 2) throw std::invalid_argument("need at least two documents");
  if (doc_words == 0 || lexicon < 2 || successors == 0) throw std::invalid_argument("empty generator");
  if (!(skew >= 0)) throw std::invalid_argument("skew must be non-negative");
  if (plant_words == 0 || plant_words > doc_words) throw std::invalid_argument("planted span must fit in a document");
}

namespace {

double uniform01(std::mt19937_64& rng) { return double(rng() >> 11) * 0x1.0p-53; }
std::size_t below(std::mt19937_64& rng, std::size_t n) { return rng() % n; }

std::vector<std::string> make_lexicon(std::size_t n, std::mt19937_64& rng) {
  static constexpr char kCons[] = "bcdfghjklmnpqrstvwxz";
  static constexpr char kVow[] = "aeiouy";
  std::vector<std::string> words;
  std::unordered_set<std::string> seen;
  while (words.size() < n) {
    std::string w;
    const std::size_t syl = 1 + below(rng, 3);
    for (std::size_t s = 0; s < syl; ++s) {
      w += kCons[below(rng, sizeof kCons - 1)];
      w += kVow[below(rng, sizeof kVow - 1)];
      if (below(rng, 4) == 0) w += kCons[below(rng, sizeof kCons - 1)];
    }
    if (seen.insert(w).second) words.push_back(std::move(w));
  }
  return words;
}

// The r-th most likely successor of word w is a hash of (w, r), so large
// lexicons need no transition table.
struct Chain {
  std::uint64_t key = 0;
  std::size_t lexicon = 0;
  std::vector<double> cdf;  // shared Zipf cdf over ranks

  std::uint32_t step(std::uint32_t w, std::mt19937_64& rng) const {
    const double u = uniform01(rng);
    const std::size_t r = std::min<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin(),
                                                cdf.size() - 1);
    return static_cast<std::uint32_t>(mix64(key ^ mix64((std::uint64_t(w) << 32) | r)) % lexicon);
  }
};

Chain make_chain(std::size_t lexicon, std::size_t successors, double skew, std::mt19937_64& rng) {
  Chain c;
  c.key = rng();
  c.lexicon = lexicon;
  double z = 0;
  for (std::size_t r = 0; r < successors; ++r) z += std::pow(double(r + 1), -skew);
  double acc = 0;
  for (std::size_t r = 0; r < successors; ++r) {
    acc += std::pow(double(r + 1), -skew) / z;
    c.cdf.push_back(acc);
  }
  return c;
}

std::string join_words(const std::vector<std::uint32_t>& ids, const std::vector<std::string>& lex) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += lex[ids[i]];
  }
  return out;
}

}  // namespace

SynthCorpus synth_corpus(const CorpusSpec& spec) {
  spec.validate();
  std::mt19937_64 lex_rng(sub_seed(spec.seed, "synth.lexicon"));
  const auto lex = make_lexicon(spec.lexicon, lex_rng);
  const auto chain = make_chain(spec.lexicon, spec.successors, spec.skew, lex_rng);

  const std::size_t n_val = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(double(spec.n_docs) * spec.val_fraction)));
  const std::size_t n_train = spec.n_docs - n_val;
  if (n_train < 2) throw std::invalid_argument("need at least two training documents");

  std::mt19937_64 rng(sub_seed(spec.seed, "synth.text"));
  std::vector<std::vector<std::uint32_t>> words(spec.n_docs);
  for (auto& doc : words) {
    std::uint32_t w = static_cast<std::uint32_t>(below(rng, spec.lexicon));
    for (std::size_t i = 0; i < spec.doc_words; ++i) {
      doc.push_back(w);
      w = chain.step(w, rng);
    }
  }

  SynthCorpus out;
  std::mt19937_64 plant_rng(sub_seed(spec.seed, "synth.plant"));
  const auto plant = [&](std::size_t dst, std::size_t src) {
    const std::size_t from = below(plant_rng, spec.doc_words - spec.plant_words + 1);
    const std::size_t max_off = std::min(spec.plant_max_offset, spec.doc_words - spec.plant_words);
    const std::size_t to = below(plant_rng, max_off + 1);
    std::copy_n(words[src].begin() + from, spec.plant_words, words[dst].begin() + to);
    out.plantings.push_back({static_cast<std::uint32_t>(dst), static_cast<std::uint32_t>(src), to,
                             spec.plant_words});
  };
  // Train-to-train copies first, so validation copies see final training text.
  for (std::size_t d = 0; d < n_train; ++d) {
    if (uniform01(plant_rng) < spec.train_dup_rate) {
      std::size_t src = below(plant_rng, n_train - 1);
      if (src >= d) ++src;
      plant(d, src);
    }
  }
  for (std::size_t d = n_train; d < spec.n_docs; ++d) {
    if (uniform01(plant_rng) < spec.rho) plant(d, below(plant_rng, n_train));
  }

  static constexpr Category kCats[] = {Category::web, Category::wiki, Category::code, Category::books,
                                       Category::news};
  for (std::size_t d = 0; d < spec.n_docs; ++d) {
    RawDocument doc;
    doc.id = static_cast<std::uint32_t>(d);
    doc.text = join_words(words[d], lex);
    doc.split = d < n_train ? Split::train : Split::validation;
    doc.category = kCats[d % 5];
    out.docs.push_back(std::move(doc));
  }
  return out;
}

}  // namespace retro::synth
