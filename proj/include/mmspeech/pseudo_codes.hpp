// mmspeech/pseudo_codes.hpp

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

// Unlabeled speech -> pseudo-codes: frozen teacher features, k-means units,
// run-length deduplication and BPE.

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "mmspeech/common.hpp"

namespace mmspeech {

// Frozen stand-in for a pre-trained speech encoder: a seeded random
// projection followed by non-overlapping window averaging.
class TeacherFeaturizer {
 public:
  TeacherFeaturizer() = default;
  TeacherFeaturizer(Matrix<double> projection, int window);
  static TeacherFeaturizer create(int feature_dim, int out_dim, int window, uint64_t seed);

  int input_dim() const { return projection_.rows(); }
  int output_dim() const { return projection_.cols(); }
  int window() const { return window_; }
  const Matrix<double>& projection() const { return projection_; }

  // T x F -> ceil(T / window) x D
  Matrix<double> featurize(const Matrix<float>& frames) const;

  bool operator==(const TeacherFeaturizer&) const = default;

 private:
  Matrix<double> projection_;
  int window_ = 1;
};

struct Codebook {
  Matrix<double> centroids;  // K x D
  int k() const { return centroids.rows(); }
  int dim() const { return centroids.cols(); }
  void validate() const;
  bool operator==(const Codebook&) const = default;
};

struct KMeansResult {
  Codebook codebook;
  std::vector<int> assignment;
  // Inertia after each assignment step, including the final one.
  std::vector<double> inertia_history;
  int iterations = 0;
  int empty_reseeds = 0;
};

Matrix<double> kmeans_plusplus_init(const Matrix<double>& vectors, int k, Rng& rng);
// Lloyd iterations from the given centroids. Stops when the largest centroid
// shift drops below tol or after max_iters updates. Empty clusters are
// re-seeded to the point farthest from its assigned centroid.
KMeansResult lloyd(const Matrix<double>& vectors, Matrix<double> init, int max_iters, double tol);
KMeansResult kmeans_fit(const Matrix<double>& vectors, int k, int max_iters, double tol, uint64_t seed);

// Nearest centroid per row, ties to the lowest index.
std::vector<int> quantize(const Codebook& cb, const Matrix<double>& frames);

TokenSeq deduplicate(std::span<const int> units);

struct BpeModel {
  int base_vocab = 0;
  std::vector<std::pair<int, int>> merges;  // merge r creates symbol base_vocab + r

  int vocab_size() const { return base_vocab + static_cast<int>(merges.size()); }
  std::string serialize() const;
  static BpeModel parse(const std::string& text);
  bool operator==(const BpeModel&) const = default;
};

// Repeatedly merges the most frequent adjacent pair (ties to the smallest
// pair) until target_vocab symbols exist or no pair occurs twice.
BpeModel bpe_train(const std::vector<TokenSeq>& corpus, int base_vocab, int target_vocab);
TokenSeq bpe_encode(const BpeModel& model, std::span<const int> units);
TokenSeq bpe_decode(const BpeModel& model, std::span<const int> codes);

std::string serialize_codebook(const TeacherFeaturizer& featurizer, const Codebook& cb);
std::pair<TeacherFeaturizer, Codebook> parse_codebook(const std::string& text);

TokenSeq speech_to_pseudocodes(const TeacherFeaturizer& featurizer, const Codebook& cb,
                               const BpeModel& bpe, const Matrix<float>& features);

// Deduplicated unit sequence for one utterance (the BPE training input).
TokenSeq speech_to_units(const TeacherFeaturizer& featurizer, const Codebook& cb,
                         const Matrix<float>& features);

// End-to-end settings for building the code artifacts from unlabeled speech.
struct PseudoCodeConfig {
  int teacher_dim = 8;
  int teacher_window = 2;
  int clusters = 32;
  int kmeans_iters = 50;
  double kmeans_tol = 1e-6;
  int code_vocab = 128;  // BPE target, units included
  uint64_t seed = 1;

  void validate() const;
};

struct CodebookArtifact {
  TeacherFeaturizer featurizer;
  KMeansResult kmeans;
};

// Featurizes every utterance, stacks the rows and fits k-means.
CodebookArtifact train_codebook(const std::vector<const Matrix<float>*>& speech, int feature_dim,
                                const PseudoCodeConfig& cfg);
BpeModel train_code_bpe(const std::vector<const Matrix<float>*>& speech, const TeacherFeaturizer& featurizer,
                        const Codebook& cb, const PseudoCodeConfig& cfg);

}  // namespace mmspeech
