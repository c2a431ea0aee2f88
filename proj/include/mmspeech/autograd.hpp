// mmspeech/autograd.hpp

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

// Tape-based reverse-mode differentiation over dense matrices. The op set is
// exactly what the encoder-decoder needs; attention and layer norm are fused
// with hand-written backward passes.

#pragma once

#include <deque>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mmspeech/common.hpp"

namespace mmspeech {

template <typename T>
class Tape;

template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;
};

// Named parameter tensors in insertion order.
template <typename T>
class ParamStore {
 public:
  int add(const std::string& name, Matrix<T> value);
  int index(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  int size() const { return static_cast<int>(values_.size()); }
  const std::string& name(int i) const { return names_[i]; }
  Matrix<T>& value(int i) { return values_[i]; }
  const Matrix<T>& value(int i) const { return values_[i]; }
  Matrix<T>& value(const std::string& name) { return values_[index(name)]; }
  const Matrix<T>& value(const std::string& name) const { return values_[index(name)]; }
  size_t scalar_count() const;

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (int i = 0; i < size(); ++i) out.add(names_[i], values_[i].template cast<U>());
    return out;
  }

  bool operator==(const ParamStore& other) const {
    return names_ == other.names_ && values_ == other.values_;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Matrix<T>> values_;
  std::unordered_map<std::string, int> index_;
};

// Per-parameter gradients. A parameter is "touched" once any gradient has
// been accumulated into it; untouched parameters are skipped by the optimizer.
// Storage is allocated on first use; untouched entries read as zeros.
template <typename T>
class GradientSet {
 public:
  GradientSet() = default;
  explicit GradientSet(const ParamStore<T>& store);

  int size() const { return static_cast<int>(grads_.size()); }
  Matrix<T>& grad(int i) { return materialize(i); }
  const Matrix<T>& grad(int i) const { return materialize(i); }
  bool touched(int i) const { return touched_[i]; }

  void accumulate(int i, const Matrix<T>& g);
  void accumulate(const GradientSet& other);
  void scale(T s);
  double squared_norm() const;
  bool all_finite() const;

 private:
  Matrix<T>& materialize(int i) const;

  mutable std::vector<Matrix<T>> grads_;
  std::vector<std::pair<int, int>> shapes_;
  std::vector<bool> touched_;
};

template <typename T>
class Tape {
 public:
  using Backward = std::function<void()>;

  explicit Tape(const ParamStore<T>* params = nullptr) : params_(params) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Parameters flagged here enter the tape as constants: they receive no
  // gradient from anything recorded on this tape.
  void set_frozen(std::vector<bool> frozen) { frozen_ = std::move(frozen); }
  // With recording off, every node is a constant and no closures are kept.
  void set_recording(bool on) { recording_ = on; }
  bool recording() const { return recording_; }

  Var<T> constant(Matrix<T> value);
  Var<T> variable(Matrix<T> value);
  Var<T> param(int index);
  Var<T> param(const std::string& name) { return param(params_->index(name)); }

  Var<T> push(Matrix<T> value, bool requires_grad, Backward fn);

  const Matrix<T>& value(Var<T> v) const { return node(v.id).value(); }
  const Matrix<T>& value(int id) const { return node(id).value(); }
  bool requires_grad(Var<T> v) const { return node(v.id).requires_grad; }
  bool requires_grad(int id) const { return node(id).requires_grad; }
  Matrix<T>& grad(int id);
  Matrix<T>& grad(Var<T> v) { return grad(v.id); }
  bool has_grad(int id) const { return !node(id).grad.empty(); }

  T scalar(Var<T> v) const { return value(v).storage().at(0); }
  int size() const { return static_cast<int>(nodes_.size()); }

  void backward(Var<T> root);
  void collect(GradientSet<T>& out) const;
  void clear();

 private:
  struct Node {
    Matrix<T> own;
    const Matrix<T>* ext = nullptr;
    Matrix<T> grad;
    bool requires_grad = false;
    Backward fn;
    int param = -1;
    const Matrix<T>& value() const { return ext ? *ext : own; }
  };

  Node& node(int id) { return nodes_[id]; }
  const Node& node(int id) const { return nodes_[id]; }

  const ParamStore<T>* params_;
  std::vector<bool> frozen_;
  bool recording_ = true;
  std::deque<Node> nodes_;
  std::unordered_map<int, int> param_nodes_;
};

namespace ag {

template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
// a * b^T
template <typename T> Var<T> matmul_nt(Var<T> a, Var<T> b);
template <typename T> Var<T> add(Var<T> a, Var<T> b);
// a + broadcast of the 1 x n row bias
template <typename T> Var<T> add_row(Var<T> a, Var<T> bias);
template <typename T> Var<T> scale(Var<T> a, T s);
template <typename T> Var<T> relu(Var<T> a);
template <typename T> Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps = T(1e-5));
// Rows of the zero-padded input gathered into [T_out x kernel*cols] patches.
template <typename T> Var<T> im2col(Var<T> x, int kernel, int stride, int pad);
template <typename T> Var<T> embedding(Var<T> table, std::span<const int> ids);
template <typename T> Var<T> concat_rows(Var<T> a, Var<T> b);
// Rows where mask[r] is set are replaced by the 1 x n vector.
template <typename T> Var<T> replace_rows(Var<T> x, const std::vector<bool>& mask, Var<T> vec);
template <typename T> Var<T> dropout(Var<T> x, double p, Rng& rng);
template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, int heads, bool causal);
template <typename T> Var<T> log_softmax_rows(Var<T> x);
template <typename T> Var<T> sum(Var<T> x);
// -sum_r logp(r, targets[r])
template <typename T> Var<T> nll_sum(Var<T> logp, std::span<const int> targets);

}  // namespace ag

}  // namespace mmspeech
