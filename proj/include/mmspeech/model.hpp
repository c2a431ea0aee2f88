// mmspeech/model.hpp

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

// Encoder-decoder with two input paths into one shared encoder:
//
//   speech:   conv(k3,s2) -> conv(k3,s2) -> LN -> [span mask] -> speech enc -+
//                                                                           +-> shared enc -> H
//   phonemes: phoneme embedding E (+ special rows) ------------------------+
//
// The decoder (causal self-attention + cross-attention over H) has one trunk
// and separate embedding tables / output heads for text and pseudo-codes.
// Phoneme distributions are softmax(H E^T); CTC adds a blank row in front.

#pragma once

#include <string>
#include <vector>

#include "mmspeech/autograd.hpp"
#include "mmspeech/common.hpp"

namespace mmspeech {

struct ModelConfig {
  int feature_dim = 16;
  int model_dim = 64;
  int ffn_dim = 128;
  int heads = 4;
  int layers_speech_enc = 2;
  int layers_shared_enc = 2;
  int layers_dec = 2;
  // The speech feature extractor is fixed at two layers.
  int conv_kernel = 3;
  int conv_stride = 2;
  int phoneme_vocab = 24;
  int text_vocab = 48;
  int code_vocab = 128;
  double dropout = 0.1;
  uint64_t seed = 1;

  void validate() const;
  // T' after the two strided convolutions: ceil(ceil(T/2)/2) for the defaults.
  int downsampled_length(int frames) const;
  int conv_pad() const { return conv_kernel / 2; }
  bool operator==(const ModelConfig&) const = default;
};

enum class OutputSpace { kText, kCodes };

// Decoder vocabularies: real symbols 0..V-1, eos = V, bos = V+1. The output
// head covers V+1 classes (bos is never predicted).
struct DecoderVocab {
  int symbols = 0;
  int eos() const { return symbols; }
  int bos() const { return symbols + 1; }
  int output_size() const { return symbols + 1; }
  int input_size() const { return symbols + 2; }
};

template <typename T>
class Model {
 public:
  explicit Model(const ModelConfig& cfg);
  Model(const ModelConfig& cfg, ParamStore<T> params);

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  DecoderVocab vocab(OutputSpace space) const;
  int phoneme_embedding_index() const { return params_.index("phoneme_embedding"); }

  // Speech -> H (T' x d). frame_mask, when given, marks input frames; a
  // latent step is masked iff any frame in its receptive field is masked.
  // dropout_rng == nullptr disables dropout.
  Var<T> encode_speech(Tape<T>& tape, const Matrix<T>& features, const std::vector<bool>* frame_mask,
                       Rng* dropout_rng = nullptr) const;
  // Phoneme ids (1..I plus specials) -> H^e through the shared encoder only.
  Var<T> encode_phonemes(Tape<T>& tape, std::span<const int> ids, Rng* dropout_rng = nullptr) const;
  // Teacher-forced decoder: inputs start with bos; returns |inputs| x V+1
  // log-probabilities.
  Var<T> decoder_log_probs(Tape<T>& tape, Var<T> memory, std::span<const int> inputs,
                           OutputSpace space, Rng* dropout_rng = nullptr) const;
  // H E^T (T' x I), or [blank; E] giving T' x (I+1) with blank at column 0.
  Var<T> phoneme_logits(Tape<T>& tape, Var<T> memory, bool with_blank) const;

  Matrix<T> encode_speech_value(const Matrix<T>& features, const std::vector<bool>* frame_mask = nullptr) const;
  Matrix<T> encode_phonemes_value(std::span<const int> ids) const;
  // Log-probabilities of the next symbol after prefix (which starts with bos).
  std::vector<T> decode_step(const Matrix<T>& memory, std::span<const int> prefix, OutputSpace space) const;

  std::vector<bool> latent_mask(const std::vector<bool>& frame_mask) const;

 private:
  Var<T> linear(Tape<T>& tape, Var<T> x, const std::string& prefix) const;
  Var<T> norm(Tape<T>& tape, Var<T> x, const std::string& prefix) const;
  Var<T> self_attention(Tape<T>& tape, Var<T> x, const std::string& prefix, bool causal) const;
  Var<T> cross_attention(Tape<T>& tape, Var<T> x, Var<T> memory, const std::string& prefix) const;
  Var<T> feed_forward(Tape<T>& tape, Var<T> x, const std::string& prefix, Rng* rng) const;
  Var<T> encoder_stack(Tape<T>& tape, Var<T> x, const std::string& prefix, int layers, Rng* rng) const;
  Var<T> add_positions(Tape<T>& tape, Var<T> x) const;
  Var<T> residual(Var<T> x, Var<T> sub, Rng* rng) const;

  ModelConfig cfg_;
  ParamStore<T> params_;
};

template <typename T>
ParamStore<T> init_params(const ModelConfig& cfg);

Matrix<double> sinusoidal_positions(int length, int dim);

// Adam with decoupled step count. Defaults are the usual transformer ones.
struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  int64_t step = 0;
  std::vector<Matrix<T>> m;
  std::vector<Matrix<T>> v;

  static AdamState zeros(const ParamStore<T>& params);
  bool operator==(const AdamState&) const = default;
};

// Updates every touched, non-frozen parameter. Frozen or untouched
// parameters and their moments are left bit-identical.
template <typename T>
void adam_step(ParamStore<T>& params, const GradientSet<T>& grads, AdamState<T>& state,
               const AdamConfig& cfg, double lr, const std::vector<bool>& frozen);

struct ModelCheckpoint {
  ModelConfig config;
  ParamStore<float> params;
  bool has_optimizer = false;
  AdamState<float> optimizer;
  std::string trainer_state;  // opaque JSON owned by the trainer
};

// Binary container; byte layout documented in FORMATS.md.
std::string serialize_checkpoint(const ModelCheckpoint& ckpt);
ModelCheckpoint parse_checkpoint(const std::string& bytes);
void save_checkpoint(const ModelCheckpoint& ckpt, const std::string& path);
ModelCheckpoint load_checkpoint(const std::string& path);

std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& json);

}  // namespace mmspeech
