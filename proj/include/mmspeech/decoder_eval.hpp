// mmspeech/decoder_eval.hpp

// Copyright 2026  The mmspeech authors

// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.

// Beam search with shallow fusion, a count-based n-gram LM and token error
// rate. Symbols are 0..V-1 with eos == V; prefixes never include bos.

#pragma once

#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "mmspeech/common.hpp"
#include "mmspeech/model.hpp"

namespace mmspeech {

// Anything that yields next-symbol log-probabilities over V+1 outputs.
class SequenceScorer {
 public:
  virtual ~SequenceScorer() = default;
  virtual int symbols() const = 0;
  int eos() const { return symbols(); }
  virtual std::vector<double> next_log_probs(std::span<const int> prefix) const = 0;
};

struct NgramConfig {
  int order = 3;
  double alpha = 0.1;  // add-alpha pseudo-count per symbol at every level

  void validate() const;
};

// Interpolated add-alpha n-gram model:
//   p_1(w)   = (c(w) + alpha) / (N + alpha (V+1))
//   p_n(w|h) = (c(h w) + alpha (V+1) p_{n-1}(w|h')) / (c(h) + alpha (V+1))
// Histories are left-padded with a begin marker.
class NgramLM : public SequenceScorer {
 public:
  NgramLM() = default;
  static NgramLM train(const std::vector<TokenSeq>& corpus, int symbols, const NgramConfig& cfg);

  int symbols() const override { return symbols_; }
  const NgramConfig& config() const { return cfg_; }
  std::vector<double> next_log_probs(std::span<const int> prefix) const override;
  // Sum of log-probabilities of seq followed by eos.
  double sequence_log_prob(std::span<const int> seq) const;
  // exp(-mean log-prob per predicted symbol, eos included).
  double perplexity(const std::vector<TokenSeq>& corpus) const;

  std::string serialize() const;
  static NgramLM parse(const std::string& text);
  void save(const std::string& path) const;
  static NgramLM load(const std::string& path);
  bool operator==(const NgramLM& o) const {
    return symbols_ == o.symbols_ && cfg_.order == o.cfg_.order && cfg_.alpha == o.cfg_.alpha && counts_ == o.counts_;
  }

 private:
  struct Context {
    int64_t total = 0;
    std::map<int, int64_t> next;
    bool operator==(const Context&) const = default;
  };
  uint64_t key(std::span<const int> history) const;

  int symbols_ = 0;
  NgramConfig cfg_;
  // counts_[n] holds contexts of length n (n = 0 is the unigram level).
  std::vector<std::map<uint64_t, Context>> counts_;
};

// The encoder-decoder as a scorer over one utterance's encoder output.
class ModelScorer : public SequenceScorer {
 public:
  ModelScorer(const Model<float>& model, Matrix<float> memory, OutputSpace space)
      : model_(model), memory_(std::move(memory)), space_(space) {}
  int symbols() const override { return model_.vocab(space_).symbols; }
  std::vector<double> next_log_probs(std::span<const int> prefix) const override;

 private:
  const Model<float>& model_;
  Matrix<float> memory_;
  OutputSpace space_;
};

struct BeamConfig {
  int beam_size = 4;
  double lm_weight = 0.3;
  double length_penalty = 0.0;  // beta in ((5+len)/6)^beta
  int max_len = 24;             // emitted symbols, eos included

  void validate() const;
};

struct Hypothesis {
  TokenSeq tokens;      // without eos
  double score = 0.0;   // fused score / length penalty
  double model_log_prob = 0.0;
  double lm_log_prob = 0.0;
  bool terminated = true;
};

double length_penalty(int length, double beta);

// Per-step score: log p_model + lm_weight * log p_lm. With lm == nullptr
// or lm_weight == 0 the LM is never queried. Ties are broken in favour of
// the lexicographically smaller token sequence.
Hypothesis beam_decode(const SequenceScorer& model, const SequenceScorer* lm, const BeamConfig& cfg);
Hypothesis greedy_decode(const SequenceScorer& model, int max_len);

struct EditStats {
  int64_t substitutions = 0;
  int64_t insertions = 0;
  int64_t deletions = 0;
  int64_t reference_tokens = 0;
  int64_t errors() const { return substitutions + insertions + deletions; }
};

EditStats edit_stats(std::span<const int> hyp, std::span<const int> ref);
double token_error_rate(const std::vector<TokenSeq>& hyps, const std::vector<TokenSeq>& refs);

struct HypothesisRecord {
  std::string id;
  double score = 0.0;
  TokenSeq tokens;
};

// id<TAB>score<TAB>tokens, one per line; a two-field id<TAB>tokens form is
// accepted on read (reference files).
std::string serialize_hypotheses(const std::vector<HypothesisRecord>& recs);
std::vector<HypothesisRecord> parse_hypotheses(const std::string& text, const std::string& source);

// Decodes each (features) in order; utterances run on up to `threads` workers.
std::vector<Hypothesis> decode_batch(const Model<float>& model, const std::vector<const Matrix<float>*>& feats,
                                     const SequenceScorer* lm, const BeamConfig& cfg, int threads);

}  // namespace mmspeech
