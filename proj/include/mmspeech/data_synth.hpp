// mmspeech/data_synth.hpp

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

// Synthetic corpus: text from a sparse first-order Markov chain, phonemes via
// a synthetic lexicon, and "speech" frames drawn around a fixed mean vector
// per phoneme.

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mmspeech/common.hpp"
#include "mmspeech/lexicon.hpp"

namespace mmspeech {

struct SyntheticCorpusConfig {
  uint64_t seed = 1;
  int n_text_utts = 50000;
  int n_unlabeled_speech_utts = 10000;
  int n_paired_utts = 2000;
  int text_vocab_size = 48;
  int phoneme_vocab_size = 24;
  double homophone_rate = 0.5;
  int feature_dim = 16;
  int frames_per_phoneme_min = 4;
  int frames_per_phoneme_max = 8;
  double noise_std = 0.8;
  int min_text_len = 4;
  int max_text_len = 10;
  // Successors per token in the Markov chain; small values make context
  // informative for resolving homophones.
  int markov_branching = 3;
  double paired_dev_fraction = 0.1;
  double paired_test_fraction = 0.1;
  double text_dev_fraction = 0.02;

  void validate() const;
};

enum class Split { kTrain, kDev, kTest };
enum class UttKind { kSpeech, kText, kPaired };

const char* split_name(Split s);
const char* kind_name(UttKind k);
Split parse_split(const std::string& s);
UttKind parse_kind(const std::string& s);

struct Utterance {
  std::string id;
  UttKind kind = UttKind::kPaired;
  Split split = Split::kTrain;
  std::optional<Matrix<float>> features;
  std::optional<TokenSeq> text;
  // Ground-truth phoneme per frame; only present for freshly synthesized
  // speech, never stored.
  std::vector<int> frame_phonemes;
};

struct ManifestEntry {
  std::string id;
  UttKind kind = UttKind::kPaired;
  Split split = Split::kTrain;
  std::string features_ref;  // "<file>@<byte offset>" or empty
  std::optional<TokenSeq> text;

  bool operator==(const ManifestEntry&) const = default;
};

struct Manifest {
  std::string base_dir;
  std::vector<ManifestEntry> entries;

  const ManifestEntry& find(const std::string& id) const;
  bool operator==(const Manifest& o) const { return entries == o.entries; }
};

struct SyntheticCorpus {
  SyntheticCorpusConfig config;
  Lexicon lexicon;
  Matrix<float> phoneme_means;  // row p-1 is the mean frame of phoneme p
  std::vector<Utterance> utterances;

  std::vector<const Utterance*> select(UttKind kind, Split split) const;
};

SyntheticCorpus synth_corpus(const SyntheticCorpusConfig& cfg);

// Writes manifest.tsv, feats.bin and lexicon.tsv into dir.
Manifest store_corpus(const SyntheticCorpus& corpus, const std::string& dir);

Manifest parse_manifest(const std::string& text, const std::string& base_dir,
                        const std::string& source_name = "manifest");
std::string serialize_manifest(const Manifest& manifest);
Manifest load_manifest(const std::string& path);
Utterance load_utterance(const Manifest& manifest, const std::string& id);
// Bulk load keeping manifest order.
std::vector<Utterance> load_utterances(const Manifest& manifest);

// Feature record: int32 T, int32 F, then T*F float32, all little-endian.
std::string encode_feature_record(const Matrix<float>& features);
Matrix<float> decode_feature_record(const std::string& bytes, size_t offset, const std::string& what);

}  // namespace mmspeech
