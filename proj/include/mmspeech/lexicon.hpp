// mmspeech/lexicon.hpp

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

#pragma once

#include <string>
#include <vector>

#include "mmspeech/common.hpp"

namespace mmspeech {

// Many-to-one map from text tokens 0..V-1 onto phonemes 1..I. Phoneme id 0
// and ids above I are reserved for the special symbols.
class Lexicon {
 public:
  Lexicon() = default;
  Lexicon(std::vector<int> text_to_phoneme, int phoneme_vocab_size);

  // Deterministic synthetic dictionary: ceil(homophone_rate * V) tokens are
  // extra homophones mapped onto phonemes already covered by the rest.
  static Lexicon synthetic(int text_vocab_size, int phoneme_vocab_size, double homophone_rate,
                           uint64_t seed);

  int text_vocab_size() const { return static_cast<int>(map_.size()); }
  int phoneme_vocab_size() const { return phoneme_vocab_; }
  int pad_id() const { return 0; }
  int mask_id() const { return phoneme_vocab_ + 1; }
  int bos_id() const { return phoneme_vocab_ + 2; }
  int eos_id() const { return phoneme_vocab_ + 3; }
  bool is_phoneme(int id) const { return id >= 1 && id <= phoneme_vocab_; }

  int phoneme(int text_token) const;
  const std::vector<int>& table() const { return map_; }
  // Text tokens grouped by shared phoneme; only groups of size >= 2.
  std::vector<std::vector<int>> homophone_groups() const;

  // `#phoneme_vocab_size<TAB>I` header, then `token_id<TAB>phoneme_id` lines.
  std::string serialize() const;
  static Lexicon parse(const std::string& text);
  void save(const std::string& path) const;
  static Lexicon load(const std::string& path);

  bool operator==(const Lexicon&) const = default;

 private:
  std::vector<int> map_;
  int phoneme_vocab_ = 0;
};

TokenSeq text_to_phonemes(const Lexicon& lex, std::span<const int> text);

struct NoiseConfig {
  double mask_ratio = 0.30;
  int max_span = 3;
  double replace_fraction = 0.1;
  uint64_t seed = 0;

  void validate() const;
};

struct NoisedPhonemes {
  TokenSeq noisy;
  std::vector<bool> corrupted;
};

// Span corruption with an exact position budget of ceil(mask_ratio * n):
// spans (length 1 + Geometric(1/2), capped at max_span) are placed at uniform
// starts until the budget is spent; the last span is trimmed to the budget.
NoisedPhonemes noise_phonemes(std::span<const int> seq, const Lexicon& lex,
                              const NoiseConfig& cfg);

}  // namespace mmspeech
