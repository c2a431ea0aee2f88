// src/lexicon.cpp

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

#include "mmspeech/lexicon.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

namespace mmspeech {

Lexicon::Lexicon(std::vector<int> text_to_phoneme, int phoneme_vocab_size)
    : map_(std::move(text_to_phoneme)), phoneme_vocab_(phoneme_vocab_size) {
  if (phoneme_vocab_ < 1) fail(ErrorKind::kConfig, "lexicon: phoneme vocabulary must be >= 1");
  for (size_t k = 0; k < map_.size(); ++k) {
    if (!is_phoneme(map_[k])) {
      fail(ErrorKind::kConfig, "lexicon: token " + std::to_string(k) + " maps to non-phoneme " +
                                   std::to_string(map_[k]));
    }
  }
}

Lexicon Lexicon::synthetic(int text_vocab_size, int phoneme_vocab_size, double homophone_rate,
                           uint64_t seed) {
  if (phoneme_vocab_size < 1 || text_vocab_size < phoneme_vocab_size) {
    fail(ErrorKind::kConfig, "lexicon: need 1 <= phoneme_vocab_size <= text_vocab_size");
  }
  if (homophone_rate < 0.0 || homophone_rate > 1.0) {
    fail(ErrorKind::kConfig, "lexicon: homophone_rate must lie in [0,1]");
  }
  const int extra = static_cast<int>(std::ceil(homophone_rate * text_vocab_size - 1e-12));
  const int base = text_vocab_size - extra;
  if (base < phoneme_vocab_size) {
    fail(ErrorKind::kConfig, "lexicon: homophone_rate too high, only " + std::to_string(base) +
                                 " base tokens for " + std::to_string(phoneme_vocab_size) +
                                 " phonemes");
  }
  Rng rng(derive_seed(seed, 0x1e71c0));
  std::vector<int> order(text_vocab_size);
  std::iota(order.begin(), order.end(), 0);
  for (int i = text_vocab_size - 1; i > 0; --i) std::swap(order[i], order[uniform_int(rng, 0, i)]);
  std::vector<int> map(text_vocab_size);
  for (int k = 0; k < text_vocab_size; ++k) {
    map[order[k]] = k < base ? (k % phoneme_vocab_size) + 1 : uniform_int(rng, 1, phoneme_vocab_size);
  }
  return Lexicon(std::move(map), phoneme_vocab_size);
}

int Lexicon::phoneme(int text_token) const {
  if (text_token < 0 || text_token >= text_vocab_size()) {
    fail(ErrorKind::kUnknownToken, "unknown text token " + std::to_string(text_token));
  }
  return map_[text_token];
}

std::vector<std::vector<int>> Lexicon::homophone_groups() const {
  std::map<int, std::vector<int>> by_phoneme;
  for (int k = 0; k < text_vocab_size(); ++k) by_phoneme[map_[k]].push_back(k);
  std::vector<std::vector<int>> out;
  for (auto& [p, toks] : by_phoneme) {
    if (toks.size() >= 2) out.push_back(toks);
  }
  return out;
}

std::string Lexicon::serialize() const {
  std::ostringstream os;
  os << "#phoneme_vocab_size\t" << phoneme_vocab_ << "\n";
  for (int k = 0; k < text_vocab_size(); ++k) os << k << '\t' << map_[k] << '\n';
  return os.str();
}

Lexicon Lexicon::parse(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  int line_no = 0;
  int vocab = -1;
  std::vector<int> map;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    if (line[0] == '#') {
      std::string key;
      ls >> key;
      if (key == "#phoneme_vocab_size" && !(ls >> vocab)) {
        fail(ErrorKind::kParse, "lexicon line " + std::to_string(line_no) + ": bad header");
      }
      continue;
    }
    int token = 0, phoneme = 0;
    if (!(ls >> token >> phoneme)) {
      fail(ErrorKind::kParse, "lexicon line " + std::to_string(line_no) + ": expected token<TAB>phoneme");
    }
    if (token != static_cast<int>(map.size())) {
      fail(ErrorKind::kParse, "lexicon line " + std::to_string(line_no) + ": tokens must be dense and ordered");
    }
    map.push_back(phoneme);
  }
  if (vocab < 0) vocab = map.empty() ? 0 : *std::max_element(map.begin(), map.end());
  return Lexicon(std::move(map), vocab);
}

void Lexicon::save(const std::string& path) const { write_file_atomic(path, serialize()); }

Lexicon Lexicon::load(const std::string& path) { return parse(read_file(path)); }

TokenSeq text_to_phonemes(const Lexicon& lex, std::span<const int> text) {
  TokenSeq out(text.size());
  for (size_t k = 0; k < text.size(); ++k) {
    if (text[k] < 0 || text[k] >= lex.text_vocab_size()) {
      fail(ErrorKind::kUnknownToken, "text_to_phonemes: unknown token " + std::to_string(text[k]) +
                                         " at position " + std::to_string(k));
    }
    out[k] = lex.table()[text[k]];
  }
  return out;
}

void NoiseConfig::validate() const {
  if (mask_ratio < 0.0 || mask_ratio > 1.0) fail(ErrorKind::kConfig, "noise: mask_ratio must lie in [0,1]");
  if (max_span < 1) fail(ErrorKind::kConfig, "noise: max_span must be >= 1");
  if (replace_fraction < 0.0 || replace_fraction > 1.0) {
    fail(ErrorKind::kConfig, "noise: replace_fraction must lie in [0,1]");
  }
}

NoisedPhonemes noise_phonemes(std::span<const int> seq, const Lexicon& lex, const NoiseConfig& cfg) {
  cfg.validate();
  const int n = static_cast<int>(seq.size());
  NoisedPhonemes out{TokenSeq(seq.begin(), seq.end()), std::vector<bool>(n, false)};
  if (n == 0) fail(ErrorKind::kEmpty, "noise_phonemes: empty sequence");
  const int budget = std::min(n, static_cast<int>(std::ceil(cfg.mask_ratio * n - 1e-9)));
  Rng rng(derive_seed(cfg.seed, 0x5fa11));
  int used = 0;
  while (used < budget) {
    int len = 1;
    while (len < cfg.max_span && uniform01(rng) < 0.5) ++len;
    int start = uniform_int(rng, 0, n - 1);
    for (int i = start; i < std::min(n, start + len) && used < budget; ++i) {
      if (!out.corrupted[i]) {
        out.corrupted[i] = true;
        ++used;
      }
    }
  }
  for (int i = 0; i < n; ++i) {
    if (!out.corrupted[i]) continue;
    if (uniform01(rng) < cfg.replace_fraction) {
      out.noisy[i] = uniform_int(rng, 1, lex.phoneme_vocab_size());
    } else {
      out.noisy[i] = lex.mask_id();
    }
  }
  return out;
}

}  // namespace mmspeech
