// src/model.cpp

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

#include "mmspeech/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "json.hpp"
#include "mmspeech/masking.hpp"

namespace mmspeech {

void ModelConfig::validate() const {
  if (feature_dim < 1 || model_dim < 1 || ffn_dim < 1 || heads < 1) fail(ErrorKind::kConfig, "model: dims must be >= 1");
  if (model_dim % heads != 0) fail(ErrorKind::kConfig, "model: model_dim must be divisible by heads");
  if (layers_speech_enc < 0 || layers_shared_enc < 0 || layers_dec < 1) fail(ErrorKind::kConfig, "model: bad layer counts");
  if (conv_kernel < 1 || conv_stride < 1) fail(ErrorKind::kConfig, "model: bad conv geometry");
  if (phoneme_vocab < 1 || text_vocab < 1 || code_vocab < 1) fail(ErrorKind::kConfig, "model: vocab sizes must be >= 1");
  if (dropout < 0.0 || dropout >= 1.0) fail(ErrorKind::kConfig, "model: dropout must lie in [0,1)");
}

int ModelConfig::downsampled_length(int frames) const {
  int len = frames;
  for (int l = 0; l < 2; ++l) len = (len + 2 * conv_pad() - conv_kernel) / conv_stride + 1;
  return len;
}

Matrix<double> sinusoidal_positions(int length, int dim) {
  Matrix<double> pe(length, dim);
  for (int p = 0; p < length; ++p) {
    for (int i = 0; i < dim; i += 2) {
      double freq = std::pow(10000.0, -static_cast<double>(i) / dim);
      pe(p, i) = std::sin(p * freq);
      if (i + 1 < dim) pe(p, i + 1) = std::cos(p * freq);
    }
  }
  return pe;
}

namespace {

template <typename T>
class Initializer {
 public:
  Initializer(ParamStore<T>& store, uint64_t seed) : store_(store), rng_(derive_seed(seed, 0x1417)) {}

  void uniform(const std::string& name, int rows, int cols, double bound) {
    Matrix<T> m(rows, cols);
    for (auto& x : m.storage()) x = static_cast<T>((2.0 * uniform01(rng_) - 1.0) * bound);
    store_.add(name, std::move(m));
  }
  // Xavier-uniform weight plus zero bias.
  void linear(const std::string& prefix, int in, int out) {
    uniform(prefix + ".weight", in, out, std::sqrt(6.0 / (in + out)));
    store_.add(prefix + ".bias", Matrix<T>(1, out));
  }
  void norm(const std::string& prefix, int dim) {
    store_.add(prefix + ".gain", Matrix<T>(1, dim, T(1)));
    store_.add(prefix + ".bias", Matrix<T>(1, dim));
  }
  void embedding(const std::string& name, int rows, int dim) {
    uniform(name, rows, dim, 1.0 / std::sqrt(static_cast<double>(dim)));
  }
  void attention(const std::string& prefix, int d) {
    for (const char* p : {".q", ".k", ".v", ".o"}) linear(prefix + p, d, d);
  }
  void ffn(const std::string& prefix, int d, int inner) {
    linear(prefix + ".fc1", d, inner);
    linear(prefix + ".fc2", inner, d);
  }

 private:
  ParamStore<T>& store_;
  Rng rng_;
};

}  // namespace

template <typename T>
ParamStore<T> init_params(const ModelConfig& cfg) {
  cfg.validate();
  ParamStore<T> store;
  Initializer<T> init(store, cfg.seed);
  const int d = cfg.model_dim, k = cfg.conv_kernel;
  init.linear("conv1", k * cfg.feature_dim, d);
  init.linear("conv2", k * d, d);
  init.norm("feature_ln", d);
  init.embedding("speech_mask_embedding", 1, d);
  for (int l = 0; l < cfg.layers_speech_enc; ++l) {
    std::string p = "speech_enc." + std::to_string(l);
    init.norm(p + ".ln1", d);
    init.attention(p + ".attn", d);
    init.norm(p + ".ln2", d);
    init.ffn(p + ".ffn", d, cfg.ffn_dim);
  }
  for (int l = 0; l < cfg.layers_shared_enc; ++l) {
    std::string p = "shared_enc." + std::to_string(l);
    init.norm(p + ".ln1", d);
    init.attention(p + ".attn", d);
    init.norm(p + ".ln2", d);
    init.ffn(p + ".ffn", d, cfg.ffn_dim);
  }
  init.norm("shared_enc.final_ln", d);
  init.embedding("phoneme_embedding", cfg.phoneme_vocab, d);
  init.embedding("phoneme_special_embedding", 4, d);
  init.embedding("blank_embedding", 1, d);
  init.embedding("dec.text_embedding", cfg.text_vocab + 2, d);
  init.embedding("dec.code_embedding", cfg.code_vocab + 2, d);
  for (int l = 0; l < cfg.layers_dec; ++l) {
    std::string p = "dec." + std::to_string(l);
    init.norm(p + ".ln1", d);
    init.attention(p + ".self_attn", d);
    init.norm(p + ".ln2", d);
    init.attention(p + ".cross_attn", d);
    init.norm(p + ".ln3", d);
    init.ffn(p + ".ffn", d, cfg.ffn_dim);
  }
  init.norm("dec.final_ln", d);
  init.linear("dec.text_head", d, cfg.text_vocab + 1);
  init.linear("dec.code_head", d, cfg.code_vocab + 1);
  return store;
}

template <typename T>
Model<T>::Model(const ModelConfig& cfg) : cfg_(cfg), params_(init_params<T>(cfg)) {}

template <typename T>
Model<T>::Model(const ModelConfig& cfg, ParamStore<T> params) : cfg_(cfg), params_(std::move(params)) {
  cfg_.validate();
  ParamStore<T> ref = init_params<T>(cfg_);
  if (ref.size() != params_.size()) fail(ErrorKind::kDimension, "model: parameter set does not match config");
  for (int i = 0; i < ref.size(); ++i) {
    const auto& a = ref.value(i);
    const auto& b = params_.value(ref.name(i));
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
      fail(ErrorKind::kDimension, "model: parameter " + ref.name(i) + " has wrong shape");
    }
  }
}

template <typename T>
DecoderVocab Model<T>::vocab(OutputSpace space) const {
  return {space == OutputSpace::kText ? cfg_.text_vocab : cfg_.code_vocab};
}

template <typename T>
Var<T> Model<T>::linear(Tape<T>& tape, Var<T> x, const std::string& prefix) const {
  return ag::add_row(ag::matmul(x, tape.param(prefix + ".weight")), tape.param(prefix + ".bias"));
}

template <typename T>
Var<T> Model<T>::norm(Tape<T>& tape, Var<T> x, const std::string& prefix) const {
  return ag::layer_norm(x, tape.param(prefix + ".gain"), tape.param(prefix + ".bias"));
}

template <typename T>
Var<T> Model<T>::self_attention(Tape<T>& tape, Var<T> x, const std::string& prefix, bool causal) const {
  Var<T> q = linear(tape, x, prefix + ".q");
  Var<T> k = linear(tape, x, prefix + ".k");
  Var<T> v = linear(tape, x, prefix + ".v");
  return linear(tape, ag::attention(q, k, v, cfg_.heads, causal), prefix + ".o");
}

template <typename T>
Var<T> Model<T>::cross_attention(Tape<T>& tape, Var<T> x, Var<T> memory, const std::string& prefix) const {
  Var<T> q = linear(tape, x, prefix + ".q");
  Var<T> k = linear(tape, memory, prefix + ".k");
  Var<T> v = linear(tape, memory, prefix + ".v");
  return linear(tape, ag::attention(q, k, v, cfg_.heads, false), prefix + ".o");
}

template <typename T>
Var<T> Model<T>::feed_forward(Tape<T>& tape, Var<T> x, const std::string& prefix, Rng* rng) const {
  Var<T> h = ag::relu(linear(tape, x, prefix + ".fc1"));
  if (rng) h = ag::dropout(h, cfg_.dropout, *rng);
  return linear(tape, h, prefix + ".fc2");
}

template <typename T>
Var<T> Model<T>::residual(Var<T> x, Var<T> sub, Rng* rng) const {
  if (rng) sub = ag::dropout(sub, cfg_.dropout, *rng);
  return ag::add(x, sub);
}

template <typename T>
Var<T> Model<T>::encoder_stack(Tape<T>& tape, Var<T> x, const std::string& prefix, int layers, Rng* rng) const {
  for (int l = 0; l < layers; ++l) {
    std::string p = prefix + "." + std::to_string(l);
    x = residual(x, self_attention(tape, norm(tape, x, p + ".ln1"), p + ".attn", false), rng);
    x = residual(x, feed_forward(tape, norm(tape, x, p + ".ln2"), p + ".ffn", rng), rng);
  }
  return x;
}

template <typename T>
Var<T> Model<T>::add_positions(Tape<T>& tape, Var<T> x) const {
  const Matrix<T>& v = tape.value(x);
  return ag::add(x, tape.constant(sinusoidal_positions(v.rows(), v.cols()).template cast<T>()));
}

template <typename T>
std::vector<bool> Model<T>::latent_mask(const std::vector<bool>& frame_mask) const {
  return downsample_mask(frame_mask, 2, cfg_.conv_kernel, cfg_.conv_stride, cfg_.conv_pad());
}

template <typename T>
Var<T> Model<T>::encode_speech(Tape<T>& tape, const Matrix<T>& features, const std::vector<bool>* frame_mask,
                               Rng* rng) const {
  if (features.rows() < 1) fail(ErrorKind::kEmpty, "encode_speech: zero-length input");
  if (features.cols() != cfg_.feature_dim) {
    fail(ErrorKind::kDimension, "encode_speech: feature dim " + std::to_string(features.cols()) + " != " +
                                    std::to_string(cfg_.feature_dim));
  }
  for (T x : features.storage()) {
    if (!std::isfinite(x)) fail(ErrorKind::kNonFinite, "encode_speech: non-finite input feature");
  }
  if (frame_mask && static_cast<int>(frame_mask->size()) != features.rows()) {
    fail(ErrorKind::kDimension, "encode_speech: mask length != frame count");
  }
  const int k = cfg_.conv_kernel, s = cfg_.conv_stride, pad = cfg_.conv_pad();
  Var<T> x = tape.constant(features);
  x = ag::relu(linear(tape, ag::im2col(x, k, s, pad), "conv1"));
  x = ag::relu(linear(tape, ag::im2col(x, k, s, pad), "conv2"));
  x = norm(tape, x, "feature_ln");
  if (frame_mask) {
    std::vector<bool> latent = latent_mask(*frame_mask);
    if (std::find(latent.begin(), latent.end(), true) != latent.end()) {
      x = ag::replace_rows(x, latent, tape.param("speech_mask_embedding"));
    }
  }
  x = add_positions(tape, x);
  x = encoder_stack(tape, x, "speech_enc", cfg_.layers_speech_enc, rng);
  x = encoder_stack(tape, x, "shared_enc", cfg_.layers_shared_enc, rng);
  return norm(tape, x, "shared_enc.final_ln");
}

template <typename T>
Var<T> Model<T>::encode_phonemes(Tape<T>& tape, std::span<const int> ids, Rng* rng) const {
  if (ids.empty()) fail(ErrorKind::kEmpty, "encode_phonemes: empty sequence");
  const int n_phon = cfg_.phoneme_vocab;
  std::vector<int> rows(ids.size());
  for (size_t i = 0; i < ids.size(); ++i) {
    int id = ids[i];
    if (id < 0 || id > n_phon + 3) {
      fail(ErrorKind::kUnknownToken, "encode_phonemes: unknown phoneme id " + std::to_string(id) +
                                         " at position " + std::to_string(i));
    }
    // phonemes 1..I -> rows 0..I-1; pad (0) -> I; mask/bos/eos keep their id
    rows[i] = id == 0 ? n_phon : (id <= n_phon ? id - 1 : id);
  }
  Var<T> table = ag::concat_rows(tape.param("phoneme_embedding"), tape.param("phoneme_special_embedding"));
  Var<T> x = ag::scale(ag::embedding(table, rows), static_cast<T>(std::sqrt(static_cast<double>(cfg_.model_dim))));
  x = add_positions(tape, x);
  x = encoder_stack(tape, x, "shared_enc", cfg_.layers_shared_enc, rng);
  return norm(tape, x, "shared_enc.final_ln");
}

template <typename T>
Var<T> Model<T>::decoder_log_probs(Tape<T>& tape, Var<T> memory, std::span<const int> inputs, OutputSpace space,
                                   Rng* rng) const {
  if (inputs.empty()) fail(ErrorKind::kEmpty, "decoder: empty prefix");
  const DecoderVocab voc = vocab(space);
  if (inputs[0] != voc.bos()) fail(ErrorKind::kConfig, "decoder: prefix must start with bos");
  const std::string emb = space == OutputSpace::kText ? "dec.text_embedding" : "dec.code_embedding";
  const std::string head = space == OutputSpace::kText ? "dec.text_head" : "dec.code_head";
  Var<T> x = ag::scale(ag::embedding(tape.param(emb), inputs), static_cast<T>(std::sqrt(static_cast<double>(cfg_.model_dim))));
  x = add_positions(tape, x);
  for (int l = 0; l < cfg_.layers_dec; ++l) {
    std::string p = "dec." + std::to_string(l);
    x = residual(x, self_attention(tape, norm(tape, x, p + ".ln1"), p + ".self_attn", true), rng);
    x = residual(x, cross_attention(tape, norm(tape, x, p + ".ln2"), memory, p + ".cross_attn"), rng);
    x = residual(x, feed_forward(tape, norm(tape, x, p + ".ln3"), p + ".ffn", rng), rng);
  }
  x = norm(tape, x, "dec.final_ln");
  return ag::log_softmax_rows(linear(tape, x, head));
}

template <typename T>
Var<T> Model<T>::phoneme_logits(Tape<T>& tape, Var<T> memory, bool with_blank) const {
  Var<T> table = tape.param("phoneme_embedding");
  if (with_blank) table = ag::concat_rows(tape.param("blank_embedding"), table);
  return ag::matmul_nt(memory, table);
}

template <typename T>
Matrix<T> Model<T>::encode_speech_value(const Matrix<T>& features, const std::vector<bool>* frame_mask) const {
  Tape<T> tape(&params_);
  tape.set_recording(false);
  return tape.value(encode_speech(tape, features, frame_mask));
}

template <typename T>
Matrix<T> Model<T>::encode_phonemes_value(std::span<const int> ids) const {
  Tape<T> tape(&params_);
  tape.set_recording(false);
  return tape.value(encode_phonemes(tape, ids));
}

template <typename T>
std::vector<T> Model<T>::decode_step(const Matrix<T>& memory, std::span<const int> prefix, OutputSpace space) const {
  Tape<T> tape(&params_);
  tape.set_recording(false);
  Var<T> lp = decoder_log_probs(tape, tape.constant(memory), prefix, space);
  auto last = tape.value(lp).row(tape.value(lp).rows() - 1);
  return {last.begin(), last.end()};
}

template <typename T>
AdamState<T> AdamState<T>::zeros(const ParamStore<T>& params) {
  AdamState s;
  for (int i = 0; i < params.size(); ++i) {
    s.m.emplace_back(params.value(i).rows(), params.value(i).cols());
    s.v.emplace_back(params.value(i).rows(), params.value(i).cols());
  }
  return s;
}

template <typename T>
void adam_step(ParamStore<T>& params, const GradientSet<T>& grads, AdamState<T>& state, const AdamConfig& cfg,
               double lr, const std::vector<bool>& frozen) {
  if (state.m.size() != static_cast<size_t>(params.size())) state = AdamState<T>::zeros(params);
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  for (int i = 0; i < params.size(); ++i) {
    if (!grads.touched(i)) continue;
    if (i < static_cast<int>(frozen.size()) && frozen[i]) continue;
    auto& p = params.value(i).storage();
    auto& m = state.m[i].storage();
    auto& v = state.v[i].storage();
    const auto& g = grads.grad(i).storage();
    for (size_t j = 0; j < p.size(); ++j) {
      m[j] = b1 * m[j] + (T(1) - b1) * g[j];
      v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
      const double mh = m[j] / bc1, vh = v[j] / bc2;
      p[j] -= static_cast<T>(lr * mh / (std::sqrt(vh) + cfg.eps));
    }
  }
}

// ---------------------------------------------------------------------------
// Checkpoints

std::string model_config_to_json(const ModelConfig& c) {
  nlohmann::ordered_json j = {
      {"feature_dim", c.feature_dim},   {"model_dim", c.model_dim},
      {"ffn_dim", c.ffn_dim},           {"heads", c.heads},
      {"layers_speech_enc", c.layers_speech_enc}, {"layers_shared_enc", c.layers_shared_enc},
      {"layers_dec", c.layers_dec},     {"conv_kernel", c.conv_kernel},
      {"conv_stride", c.conv_stride},   {"phoneme_vocab", c.phoneme_vocab},
      {"text_vocab", c.text_vocab},     {"code_vocab", c.code_vocab},
      {"dropout", c.dropout},           {"seed", c.seed},
  };
  return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
  ModelConfig c;
  try {
    auto j = nlohmann::json::parse(text);
    c.feature_dim = j.at("feature_dim");
    c.model_dim = j.at("model_dim");
    c.ffn_dim = j.at("ffn_dim");
    c.heads = j.at("heads");
    c.layers_speech_enc = j.at("layers_speech_enc");
    c.layers_shared_enc = j.at("layers_shared_enc");
    c.layers_dec = j.at("layers_dec");
    c.conv_kernel = j.at("conv_kernel");
    c.conv_stride = j.at("conv_stride");
    c.phoneme_vocab = j.at("phoneme_vocab");
    c.text_vocab = j.at("text_vocab");
    c.code_vocab = j.at("code_vocab");
    c.dropout = j.at("dropout");
    c.seed = j.at("seed");
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kParse, std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

namespace {

constexpr char kCkptMagic[8] = {'M', 'M', 'S', 'P', 'C', 'K', 'P', 'T'};
constexpr uint32_t kCkptVersion = 1;

class ByteWriter {
 public:
  template <typename U>
  void pod(U v) {
    out_.append(reinterpret_cast<const char*>(&v), sizeof(U));
  }
  void bytes(const std::string& s) {
    pod<uint64_t>(s.size());
    out_ += s;
  }
  void matrix(const Matrix<float>& m) { out_.append(reinterpret_cast<const char*>(m.data()), m.size() * 4); }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::string& in) : in_(in) {}
  template <typename U>
  U pod(const char* what) {
    need(sizeof(U), what);
    U v;
    std::memcpy(&v, in_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }
  std::string bytes(const char* what) {
    auto n = pod<uint64_t>(what);
    need(n, what);
    std::string s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void matrix(Matrix<float>& m, const char* what) {
    need(m.size() * 4, what);
    std::memcpy(m.data(), in_.data() + pos_, m.size() * 4);
    pos_ += m.size() * 4;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  void need(size_t n, const char* what) {
    if (pos_ + n > in_.size()) fail(ErrorKind::kParse, std::string("checkpoint truncated while reading ") + what);
  }
  const std::string& in_;
  size_t pos_ = 0;
};

}  // namespace

std::string serialize_checkpoint(const ModelCheckpoint& ckpt) {
  ByteWriter w;
  for (char c : kCkptMagic) w.pod(c);
  w.pod<uint32_t>(kCkptVersion);
  w.pod<uint32_t>(4);  // scalar width
  w.bytes(model_config_to_json(ckpt.config));
  w.bytes(ckpt.trainer_state);
  w.pod<uint32_t>(ckpt.params.size());
  for (int i = 0; i < ckpt.params.size(); ++i) {
    w.bytes(ckpt.params.name(i));
    w.pod<int32_t>(ckpt.params.value(i).rows());
    w.pod<int32_t>(ckpt.params.value(i).cols());
    w.matrix(ckpt.params.value(i));
  }
  w.pod<uint32_t>(ckpt.has_optimizer ? 1 : 0);
  if (ckpt.has_optimizer) {
    w.pod<int64_t>(ckpt.optimizer.step);
    for (int i = 0; i < ckpt.params.size(); ++i) {
      w.matrix(ckpt.optimizer.m[i]);
      w.matrix(ckpt.optimizer.v[i]);
    }
  }
  return w.take();
}

ModelCheckpoint parse_checkpoint(const std::string& bytes) {
  ByteReader r(bytes);
  for (char c : kCkptMagic) {
    if (r.pod<char>("magic") != c) fail(ErrorKind::kParse, "checkpoint: bad magic");
  }
  if (r.pod<uint32_t>("version") != kCkptVersion) fail(ErrorKind::kParse, "checkpoint: unsupported version");
  if (r.pod<uint32_t>("scalar width") != 4) fail(ErrorKind::kParse, "checkpoint: unsupported scalar width");
  ModelCheckpoint ck;
  ck.config = model_config_from_json(r.bytes("model config"));
  ck.trainer_state = r.bytes("trainer state");
  auto n = r.pod<uint32_t>("tensor count");
  for (uint32_t i = 0; i < n; ++i) {
    std::string name = r.bytes("tensor name");
    auto rows = r.pod<int32_t>("rows");
    auto cols = r.pod<int32_t>("cols");
    if (rows < 0 || cols < 0) fail(ErrorKind::kParse, "checkpoint: bad shape for " + name);
    Matrix<float> m(rows, cols);
    r.matrix(m, "tensor data");
    ck.params.add(name, std::move(m));
  }
  ck.has_optimizer = r.pod<uint32_t>("optimizer flag") != 0;
  if (ck.has_optimizer) {
    ck.optimizer.step = r.pod<int64_t>("optimizer step");
    for (int i = 0; i < ck.params.size(); ++i) {
      Matrix<float> m(ck.params.value(i).rows(), ck.params.value(i).cols());
      Matrix<float> v(m.rows(), m.cols());
      r.matrix(m, "optimizer m");
      r.matrix(v, "optimizer v");
      ck.optimizer.m.push_back(std::move(m));
      ck.optimizer.v.push_back(std::move(v));
    }
  }
  if (!r.done()) fail(ErrorKind::kParse, "checkpoint: trailing bytes");
  return ck;
}

void save_checkpoint(const ModelCheckpoint& ckpt, const std::string& path) {
  write_file_atomic(path, serialize_checkpoint(ckpt));
}

ModelCheckpoint load_checkpoint(const std::string& path) { return parse_checkpoint(read_file(path)); }

template class Model<float>;
template class Model<double>;
template ParamStore<float> init_params<float>(const ModelConfig&);
template ParamStore<double> init_params<double>(const ModelConfig&);
template struct AdamState<float>;
template struct AdamState<double>;
template void adam_step<float>(ParamStore<float>&, const GradientSet<float>&, AdamState<float>&, const AdamConfig&,
                               double, const std::vector<bool>&);
template void adam_step<double>(ParamStore<double>&, const GradientSet<double>&, AdamState<double>&,
                                const AdamConfig&, double, const std::vector<bool>&);

}  // namespace mmspeech
