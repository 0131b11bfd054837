#pragma once

#include <cstdint>
#include <vector>

#include "retro/corpus.hpp"

namespace retro::synth {

/// Seeded corpus of pseudo-word text from a word-level Markov chain. Some
/// documents carry a verbatim span of words copied from a training document:
/// validation documents with probability rho, training documents with
/// probability train_dup_rate (so copying can be learned in training).
struct CorpusSpec {
  std::size_t n_docs = 2200;
  std::size_t doc_words = 40;
  std::size_t lexicon = 1000000;
  std::size_t successors = 4096;   // out-degree of every word in the chain
  double skew = 0.0;               // Zipf exponent over successor ranks; 0 is uniform
  double rho = 0.5;
  double train_dup_rate = 1.0;
  std::size_t plant_words = 24;    // length of a copied span
  std::size_t plant_max_offset = 4;  // copied spans start within this many words
  double val_fraction = 0.1;
  std::size_t vocab = 512;         // BPE target for the companion vocab
  std::uint64_t seed = 0;

  void validate() const;
};

struct Planting {
  std::uint32_t doc_id = 0;
  std::uint32_t source_doc = 0;
  std::size_t word_offset = 0;
  std::size_t words = 0;
};

struct SynthCorpus {
  std::vector<RawDocument> docs;  // ids 0..n-1: training first, then validation
  std::vector<Planting> plantings;
};

SynthCorpus synth_corpus(const CorpusSpec& spec);

}  // namespace retro::synth
