// src/autograd.cpp

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

#include "mmspeech/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "eigen_util.hpp"

namespace mmspeech {

// ---------------------------------------------------------------------------
// ParamStore / GradientSet

template <typename T>
int ParamStore<T>::add(const std::string& name, Matrix<T> value) {
  if (index_.count(name)) fail(ErrorKind::kConfig, "duplicate parameter name: " + name);
  int id = static_cast<int>(values_.size());
  names_.push_back(name);
  values_.push_back(std::move(value));
  index_[name] = id;
  return id;
}

template <typename T>
int ParamStore<T>::index(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) fail(ErrorKind::kMissingId, "no parameter named " + name);
  return it->second;
}

template <typename T>
size_t ParamStore<T>::scalar_count() const {
  size_t n = 0;
  for (const auto& v : values_) n += v.size();
  return n;
}

template <typename T>
GradientSet<T>::GradientSet(const ParamStore<T>& store)
    : grads_(store.size()), shapes_(store.size()), touched_(store.size(), false) {
  for (int i = 0; i < store.size(); ++i) shapes_[i] = {store.value(i).rows(), store.value(i).cols()};
}

template <typename T>
Matrix<T>& GradientSet<T>::materialize(int i) const {
  if (grads_[i].empty() && shapes_[i].first * shapes_[i].second > 0) {
    grads_[i] = Matrix<T>(shapes_[i].first, shapes_[i].second);
  }
  return grads_[i];
}

template <typename T>
void GradientSet<T>::accumulate(int i, const Matrix<T>& g) {
  if (!touched_[i] && grads_[i].empty()) {
    // first contribution: copy instead of zero-fill + add
    grads_[i] = g;
  } else {
    auto& dst = materialize(i).storage();
    const auto& src = g.storage();
    for (size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
  }
  touched_[i] = true;
}

template <typename T>
void GradientSet<T>::accumulate(const GradientSet& other) {
  for (int i = 0; i < size(); ++i) {
    if (other.touched_[i]) accumulate(i, other.grads_[i]);
  }
}

template <typename T>
void GradientSet<T>::scale(T s) {
  for (auto& g : grads_) {
    for (auto& x : g.storage()) x *= s;
  }
}

template <typename T>
double GradientSet<T>::squared_norm() const {
  double acc = 0;
  for (const auto& g : grads_) {
    for (T x : g.storage()) acc += static_cast<double>(x) * x;
  }
  return acc;
}

template <typename T>
bool GradientSet<T>::all_finite() const {
  for (const auto& g : grads_) {
    for (T x : g.storage()) {
      if (!std::isfinite(x)) return false;
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// Tape

template <typename T>
Var<T> Tape<T>::push(Matrix<T> value, bool requires_grad, Backward fn) {
  Node n;
  n.own = std::move(value);
  n.requires_grad = recording_ && requires_grad;
  if (n.requires_grad) n.fn = std::move(fn);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
Var<T> Tape<T>::constant(Matrix<T> value) {
  return push(std::move(value), false, {});
}

template <typename T>
Var<T> Tape<T>::variable(Matrix<T> value) {
  Node n;
  n.own = std::move(value);
  n.requires_grad = recording_;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
Var<T> Tape<T>::param(int index) {
  auto it = param_nodes_.find(index);
  if (it != param_nodes_.end()) return {this, it->second};
  Node n;
  n.ext = &params_->value(index);
  bool frozen = index < static_cast<int>(frozen_.size()) && frozen_[index];
  n.requires_grad = recording_ && !frozen;
  n.param = n.requires_grad ? index : -1;
  nodes_.push_back(std::move(n));
  int id = static_cast<int>(nodes_.size()) - 1;
  param_nodes_[index] = id;
  return {this, id};
}

template <typename T>
Matrix<T>& Tape<T>::grad(int id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = Matrix<T>(n.value().rows(), n.value().cols());
  return n.grad;
}

template <typename T>
void Tape<T>::backward(Var<T> root) {
  if (!node(root.id).requires_grad) return;
  grad(root.id).fill(T(1));
  for (int id = root.id; id >= 0; --id) {
    Node& n = nodes_[id];
    if (n.requires_grad && n.fn && !n.grad.empty()) n.fn();
  }
}

template <typename T>
void Tape<T>::collect(GradientSet<T>& out) const {
  for (const auto& n : nodes_) {
    if (n.param >= 0 && !n.grad.empty()) out.accumulate(n.param, n.grad);
  }
}

template <typename T>
void Tape<T>::clear() {
  nodes_.clear();
  param_nodes_.clear();
}

// ---------------------------------------------------------------------------
// Ops

namespace ag {

namespace {

template <typename T>
void check_same_shape(const Matrix<T>& a, const Matrix<T>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    fail(ErrorKind::kDimension, std::string(op) + ": shape mismatch " +
                                    std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                                    " vs " + std::to_string(b.rows()) + "x" +
                                    std::to_string(b.cols()));
  }
}

}  // namespace

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  Tape<T>& t = *a.tape;
  const Matrix<T>& va = t.value(a);
  const Matrix<T>& vb = t.value(b);
  if (va.cols() != vb.rows()) fail(ErrorKind::kDimension, "matmul: inner dimension mismatch");
  Matrix<T> out(va.rows(), vb.cols());
  emap(out).noalias() = emap(va) * emap(vb);
  bool rg = t.requires_grad(a) || t.requires_grad(b);
  int ia = a.id, ib = b.id, io = t.size();
  return t.push(std::move(out), rg, [&t, ia, ib, io] {
    const Matrix<T>& g = t.grad(io);
    if (t.requires_grad(ia)) emap(t.grad(ia)).noalias() += emap(g) * emap(t.value(ib)).transpose();
    if (t.requires_grad(ib)) emap(t.grad(ib)).noalias() += emap(t.value(ia)).transpose() * emap(g);
  });
}

template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  Tape<T>& t = *a.tape;
  const Matrix<T>& va = t.value(a);
  const Matrix<T>& vb = t.value(b);
  if (va.cols() != vb.cols()) fail(ErrorKind::kDimension, "matmul_nt: inner dimension mismatch");
  Matrix<T> out(va.rows(), vb.rows());
  emap(out).noalias() = emap(va) * emap(vb).transpose();
  bool rg = t.requires_grad(a) || t.requires_grad(b);
  int ia = a.id, ib = b.id, io = t.size();
  return t.push(std::move(out), rg, [&t, ia, ib, io] {
    const Matrix<T>& g = t.grad(io);
    if (t.requires_grad(ia)) emap(t.grad(ia)).noalias() += emap(g) * emap(t.value(ib));
    if (t.requires_grad(ib)) emap(t.grad(ib)).noalias() += emap(g).transpose() * emap(t.value(ia));
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  Tape<T>& t = *a.tape;
  check_same_shape(t.value(a), t.value(b), "add");
  Matrix<T> out = t.value(a);
  const auto& vb = t.value(b).storage();
  for (size_t i = 0; i < vb.size(); ++i) out.storage()[i] += vb[i];
  bool rg = t.requires_grad(a) || t.requires_grad(b);
  int ia = a.id, ib = b.id, io = t.size();
  return t.push(std::move(out), rg, [&t, ia, ib, io] {
    const Matrix<T>& g = t.grad(io);
    if (t.requires_grad(ia)) emap(t.grad(ia)) += emap(g);
    if (t.requires_grad(ib)) emap(t.grad(ib)) += emap(g);
  });
}

template <typename T>
Var<T> add_row(Var<T> a, Var<T> bias) {
  Tape<T>& t = *a.tape;
  const Matrix<T>& va = t.value(a);
  const Matrix<T>& vb = t.value(bias);
  if (vb.rows() != 1 || vb.cols() != va.cols()) fail(ErrorKind::kDimension, "add_row: bad bias");
  Matrix<T> out = va;
  emap(out).rowwise() += emap(vb).row(0);
  bool rg = t.requires_grad(a) || t.requires_grad(bias);
  int ia = a.id, ib = bias.id, io = t.size();
  return t.push(std::move(out), rg, [&t, ia, ib, io] {
    const Matrix<T>& g = t.grad(io);
    if (t.requires_grad(ia)) emap(t.grad(ia)) += emap(g);
    if (t.requires_grad(ib)) emap(t.grad(ib)).row(0) += emap(g).colwise().sum();
  });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  Tape<T>& t = *a.tape;
  Matrix<T> out = t.value(a);
  for (auto& x : out.storage()) x *= s;
  int ia = a.id, io = t.size();
  return t.push(std::move(out), t.requires_grad(a), [&t, ia, io, s] {
    emap(t.grad(ia)) += s * emap(t.grad(io));
  });
}

template <typename T>
Var<T> relu(Var<T> a) {
  Tape<T>& t = *a.tape;
  Matrix<T> out = t.value(a);
  for (auto& x : out.storage()) x = x > T(0) ? x : T(0);
  int ia = a.id, io = t.size();
  return t.push(std::move(out), t.requires_grad(a), [&t, ia, io] {
    const auto& g = t.grad(io).storage();
    const auto& y = t.value(io).storage();
    auto& ga = t.grad(ia).storage();
    for (size_t i = 0; i < g.size(); ++i) {
      if (y[i] > T(0)) ga[i] += g[i];
    }
  });
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps) {
  Tape<T>& t = *x.tape;
  const Matrix<T>& vx = t.value(x);
  const Matrix<T>& vg = t.value(gain);
  const Matrix<T>& vb = t.value(bias);
  const int rows = vx.rows(), cols = vx.cols();
  if (vg.cols() != cols || vb.cols() != cols) fail(ErrorKind::kDimension, "layer_norm: bad gain");
  auto xhat = std::make_shared<Matrix<T>>(rows, cols);
  auto rstd = std::make_shared<std::vector<T>>(rows);
  Matrix<T> out(rows, cols);
  for (int r = 0; r < rows; ++r) {
    auto xr = vx.row(r);
    T mean = 0;
    for (T v : xr) mean += v;
    mean /= cols;
    T var = 0;
    for (T v : xr) var += (v - mean) * (v - mean);
    var /= cols;
    T rs = T(1) / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (int c = 0; c < cols; ++c) {
      T h = (xr[c] - mean) * rs;
      (*xhat)(r, c) = h;
      out(r, c) = h * vg(0, c) + vb(0, c);
    }
  }
  bool rg = t.requires_grad(x) || t.requires_grad(gain) || t.requires_grad(bias);
  int ix = x.id, ig = gain.id, ib = bias.id, io = t.size();
  return t.push(std::move(out), rg, [&t, ix, ig, ib, io, xhat, rstd] {
    const Matrix<T>& g = t.grad(io);
    const Matrix<T>& vg = t.value(ig);
    const int rows = g.rows(), cols = g.cols();
    if (t.requires_grad(ig)) {
      Matrix<T>& gg = t.grad(ig);
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) gg(0, c) += g(r, c) * (*xhat)(r, c);
    }
    if (t.requires_grad(ib)) emap(t.grad(ib)).row(0) += emap(g).colwise().sum();
    if (t.requires_grad(ix)) {
      Matrix<T>& gx = t.grad(ix);
      std::vector<T> dxhat(cols);
      for (int r = 0; r < rows; ++r) {
        T mean_d = 0, mean_dx = 0;
        for (int c = 0; c < cols; ++c) {
          dxhat[c] = g(r, c) * vg(0, c);
          mean_d += dxhat[c];
          mean_dx += dxhat[c] * (*xhat)(r, c);
        }
        mean_d /= cols;
        mean_dx /= cols;
        for (int c = 0; c < cols; ++c) {
          gx(r, c) += (*rstd)[r] * (dxhat[c] - mean_d - (*xhat)(r, c) * mean_dx);
        }
      }
    }
  });
}

template <typename T>
Var<T> im2col(Var<T> x, int kernel, int stride, int pad) {
  Tape<T>& t = *x.tape;
  const Matrix<T>& vx = t.value(x);
  const int len = vx.rows(), ch = vx.cols();
  const int out_len = (len + 2 * pad - kernel) / stride + 1;
  if (out_len < 1) fail(ErrorKind::kDimension, "im2col: input too short");
  Matrix<T> out(out_len, kernel * ch);
  for (int r = 0; r < out_len; ++r) {
    for (int j = 0; j < kernel; ++j) {
      int src = r * stride - pad + j;
      if (src < 0 || src >= len) continue;
      std::copy_n(vx.row(src).data(), ch, out.row(r).data() + j * ch);
    }
  }
  int ix = x.id, io = t.size();
  return t.push(std::move(out), t.requires_grad(x), [&t, ix, io, kernel, stride, pad] {
    const Matrix<T>& g = t.grad(io);
    Matrix<T>& gx = t.grad(ix);
    const int len = gx.rows(), ch = gx.cols();
    for (int r = 0; r < g.rows(); ++r) {
      for (int j = 0; j < kernel; ++j) {
        int src = r * stride - pad + j;
        if (src < 0 || src >= len) continue;
        for (int c = 0; c < ch; ++c) gx(src, c) += g(r, j * ch + c);
      }
    }
  });
}

template <typename T>
Var<T> embedding(Var<T> table, std::span<const int> ids) {
  Tape<T>& t = *table.tape;
  const Matrix<T>& vt = t.value(table);
  Matrix<T> out(static_cast<int>(ids.size()), vt.cols());
  for (size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || ids[r] >= vt.rows()) {
      fail(ErrorKind::kUnknownToken, "embedding: id " + std::to_string(ids[r]) +
                                         " at position " + std::to_string(r) + " out of range");
    }
    std::copy_n(vt.row(ids[r]).data(), vt.cols(), out.row(static_cast<int>(r)).data());
  }
  std::vector<int> idv(ids.begin(), ids.end());
  int it = table.id, io = t.size();
  return t.push(std::move(out), t.requires_grad(table), [&t, it, io, idv = std::move(idv)] {
    const Matrix<T>& g = t.grad(io);
    Matrix<T>& gt = t.grad(it);
    for (size_t r = 0; r < idv.size(); ++r) {
      auto src = g.row(static_cast<int>(r));
      auto dst = gt.row(idv[r]);
      for (size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
    }
  });
}

template <typename T>
Var<T> concat_rows(Var<T> a, Var<T> b) {
  Tape<T>& t = *a.tape;
  const Matrix<T>& va = t.value(a);
  const Matrix<T>& vb = t.value(b);
  if (va.cols() != vb.cols()) fail(ErrorKind::kDimension, "concat_rows: column mismatch");
  Matrix<T> out(va.rows() + vb.rows(), va.cols());
  std::copy(va.storage().begin(), va.storage().end(), out.storage().begin());
  std::copy(vb.storage().begin(), vb.storage().end(), out.storage().begin() + va.size());
  bool rg = t.requires_grad(a) || t.requires_grad(b);
  int ia = a.id, ib = b.id, io = t.size();
  return t.push(std::move(out), rg, [&t, ia, ib, io] {
    const auto& g = t.grad(io).storage();
    size_t na = t.value(ia).size();
    if (t.requires_grad(ia)) {
      auto& ga = t.grad(ia).storage();
      for (size_t i = 0; i < na; ++i) ga[i] += g[i];
    }
    if (t.requires_grad(ib)) {
      auto& gb = t.grad(ib).storage();
      for (size_t i = 0; i < gb.size(); ++i) gb[i] += g[na + i];
    }
  });
}

template <typename T>
Var<T> replace_rows(Var<T> x, const std::vector<bool>& mask, Var<T> vec) {
  Tape<T>& t = *x.tape;
  const Matrix<T>& vx = t.value(x);
  const Matrix<T>& vv = t.value(vec);
  if (static_cast<int>(mask.size()) != vx.rows()) fail(ErrorKind::kDimension, "replace_rows: mask length");
  if (vv.rows() != 1 || vv.cols() != vx.cols()) fail(ErrorKind::kDimension, "replace_rows: bad vector");
  Matrix<T> out = vx;
  for (int r = 0; r < vx.rows(); ++r) {
    if (mask[r]) std::copy_n(vv.data(), vv.cols(), out.row(r).data());
  }
  bool rg = t.requires_grad(x) || t.requires_grad(vec);
  int ix = x.id, iv = vec.id, io = t.size();
  return t.push(std::move(out), rg, [&t, ix, iv, io, mask] {
    const Matrix<T>& g = t.grad(io);
    for (int r = 0; r < g.rows(); ++r) {
      if (mask[r]) {
        if (t.requires_grad(iv)) emap(t.grad(iv)).row(0) += emap(g).row(r);
      } else if (t.requires_grad(ix)) {
        emap(t.grad(ix)).row(r) += emap(g).row(r);
      }
    }
  });
}

template <typename T>
Var<T> dropout(Var<T> x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  Tape<T>& t = *x.tape;
  Matrix<T> out = t.value(x);
  auto keep = std::make_shared<std::vector<T>>(out.size());
  const T s = static_cast<T>(1.0 / (1.0 - p));
  for (size_t i = 0; i < out.size(); ++i) {
    (*keep)[i] = uniform01(rng) < p ? T(0) : s;
    out.storage()[i] *= (*keep)[i];
  }
  int ix = x.id, io = t.size();
  return t.push(std::move(out), t.requires_grad(x), [&t, ix, io, keep] {
    const auto& g = t.grad(io).storage();
    auto& gx = t.grad(ix).storage();
    for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*keep)[i];
  });
}

template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, int heads, bool causal) {
  Tape<T>& t = *q.tape;
  const Matrix<T>& vq = t.value(q);
  const Matrix<T>& vk = t.value(k);
  const Matrix<T>& vv = t.value(v);
  const int tq = vq.rows(), tk = vk.rows(), d = vq.cols();
  if (vk.cols() != d || vv.cols() != d || vv.rows() != tk || d % heads != 0) {
    fail(ErrorKind::kDimension, "attention: incompatible shapes");
  }
  if (causal && tq != tk) fail(ErrorKind::kDimension, "attention: causal needs square scores");
  const int dh = d / heads;
  const T sc = T(1) / std::sqrt(static_cast<T>(dh));
  auto probs = std::make_shared<std::vector<EMat<T>>>(heads);
  Matrix<T> out(tq, d);
  auto Q = emap(vq);
  auto K = emap(vk);
  auto V = emap(vv);
  auto O = emap(out);
  for (int h = 0; h < heads; ++h) {
    EMat<T> s = (Q.middleCols(h * dh, dh) * K.middleCols(h * dh, dh).transpose()) * sc;
    for (int i = 0; i < tq; ++i) {
      int lim = causal ? i + 1 : tk;
      T mx = s.row(i).head(lim).maxCoeff();
      T z = 0;
      for (int j = 0; j < tk; ++j) {
        T e = j < lim ? std::exp(s(i, j) - mx) : T(0);
        s(i, j) = e;
        z += e;
      }
      s.row(i) /= z;
    }
    O.middleCols(h * dh, dh).noalias() = s * V.middleCols(h * dh, dh);
    (*probs)[h] = std::move(s);
  }
  bool rg = t.requires_grad(q) || t.requires_grad(k) || t.requires_grad(v);
  int iq = q.id, ik = k.id, iv = v.id, io = t.size();
  return t.push(std::move(out), rg, [&t, iq, ik, iv, io, heads, dh, sc, probs] {
    auto G = emap(t.grad(io));
    auto Q = emap(t.value(iq));
    auto K = emap(t.value(ik));
    auto V = emap(t.value(iv));
    for (int h = 0; h < heads; ++h) {
      const EMat<T>& P = (*probs)[h];
      auto Gh = G.middleCols(h * dh, dh);
      if (t.requires_grad(iv)) emap(t.grad(iv)).middleCols(h * dh, dh).noalias() += P.transpose() * Gh;
      if (!t.requires_grad(iq) && !t.requires_grad(ik)) continue;
      EMat<T> dp = Gh * V.middleCols(h * dh, dh).transpose();
      EMat<T> ds = P.cwiseProduct(dp);
      auto rowdot = ds.rowwise().sum();
      ds -= P.cwiseProduct(rowdot.replicate(1, P.cols()));
      ds *= sc;
      if (t.requires_grad(iq)) emap(t.grad(iq)).middleCols(h * dh, dh).noalias() += ds * K.middleCols(h * dh, dh);
      if (t.requires_grad(ik)) emap(t.grad(ik)).middleCols(h * dh, dh).noalias() += ds.transpose() * Q.middleCols(h * dh, dh);
    }
  });
}

template <typename T>
Var<T> log_softmax_rows(Var<T> x) {
  Tape<T>& t = *x.tape;
  Matrix<T> out = t.value(x);
  for (int r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    T mx = *std::max_element(row.begin(), row.end());
    T z = 0;
    for (T v : row) z += std::exp(v - mx);
    T lse = mx + std::log(z);
    for (T& v : row) v -= lse;
  }
  int ix = x.id, io = t.size();
  return t.push(std::move(out), t.requires_grad(x), [&t, ix, io] {
    const Matrix<T>& g = t.grad(io);
    const Matrix<T>& y = t.value(io);
    Matrix<T>& gx = t.grad(ix);
    for (int r = 0; r < g.rows(); ++r) {
      T gs = 0;
      for (int c = 0; c < g.cols(); ++c) gs += g(r, c);
      for (int c = 0; c < g.cols(); ++c) gx(r, c) += g(r, c) - std::exp(y(r, c)) * gs;
    }
  });
}

template <typename T>
Var<T> sum(Var<T> x) {
  Tape<T>& t = *x.tape;
  Matrix<T> out(1, 1);
  for (T v : t.value(x).storage()) out(0, 0) += v;
  int ix = x.id, io = t.size();
  return t.push(std::move(out), t.requires_grad(x), [&t, ix, io] {
    T g = t.grad(io)(0, 0);
    for (auto& v : t.grad(ix).storage()) v += g;
  });
}

template <typename T>
Var<T> nll_sum(Var<T> logp, std::span<const int> targets) {
  Tape<T>& t = *logp.tape;
  const Matrix<T>& lp = t.value(logp);
  if (static_cast<int>(targets.size()) != lp.rows()) {
    fail(ErrorKind::kDimension, "nll_sum: " + std::to_string(targets.size()) + " targets for " +
                                    std::to_string(lp.rows()) + " rows");
  }
  Matrix<T> out(1, 1);
  for (int r = 0; r < lp.rows(); ++r) {
    if (targets[r] < 0 || targets[r] >= lp.cols()) fail(ErrorKind::kUnknownToken, "nll_sum: target out of range");
    out(0, 0) -= lp(r, targets[r]);
  }
  std::vector<int> tv(targets.begin(), targets.end());
  int il = logp.id, io = t.size();
  return t.push(std::move(out), t.requires_grad(logp), [&t, il, io, tv = std::move(tv)] {
    T g = t.grad(io)(0, 0);
    Matrix<T>& gl = t.grad(il);
    for (size_t r = 0; r < tv.size(); ++r) gl(static_cast<int>(r), tv[r]) -= g;
  });
}

#define MMSPEECH_INSTANTIATE_OPS(T)                                                     \
  template Var<T> matmul(Var<T>, Var<T>);                                               \
  template Var<T> matmul_nt(Var<T>, Var<T>);                                            \
  template Var<T> add(Var<T>, Var<T>);                                                  \
  template Var<T> add_row(Var<T>, Var<T>);                                              \
  template Var<T> scale(Var<T>, T);                                                     \
  template Var<T> relu(Var<T>);                                                         \
  template Var<T> layer_norm(Var<T>, Var<T>, Var<T>, T);                                \
  template Var<T> im2col(Var<T>, int, int, int);                                        \
  template Var<T> embedding(Var<T>, std::span<const int>);                              \
  template Var<T> concat_rows(Var<T>, Var<T>);                                          \
  template Var<T> replace_rows(Var<T>, const std::vector<bool>&, Var<T>);               \
  template Var<T> dropout(Var<T>, double, Rng&);                                        \
  template Var<T> attention(Var<T>, Var<T>, Var<T>, int, bool);                         \
  template Var<T> log_softmax_rows(Var<T>);                                             \
  template Var<T> sum(Var<T>);                                                          \
  template Var<T> nll_sum(Var<T>, std::span<const int>);

MMSPEECH_INSTANTIATE_OPS(float)
MMSPEECH_INSTANTIATE_OPS(double)

}  // namespace ag

template class ParamStore<float>;
template class ParamStore<double>;
template class GradientSet<float>;
template class GradientSet<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace mmspeech
