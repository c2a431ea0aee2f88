// tests/oracles.hpp

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

// Slow reference implementations used only by tests. None of them shares
// code with the library.

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <vector>

#include <unistd.h>

#include "mmspeech/autograd.hpp"
#include "mmspeech/common.hpp"
#include "mmspeech/decoder_eval.hpp"
#include "mmspeech/model.hpp"

namespace oracle {

using mmspeech::Matrix;

// Collapse repeats, then drop blanks (class 0).
inline std::vector<int> ctc_collapse(const std::vector<int>& path) {
  std::vector<int> out;
  int prev = -1;
  for (int c : path) {
    if (c != prev && c != 0) out.push_back(c);
    prev = c;
  }
  return out;
}

// -log sum over every path in C^T whose collapse equals target.
inline double ctc_brute_force(const Matrix<double>& probs, const std::vector<int>& target) {
  const int T = probs.rows(), C = probs.cols();
  std::vector<int> path(T, 0);
  double total = 0;
  while (true) {
    if (ctc_collapse(path) == target) {
      double p = 1;
      for (int t = 0; t < T; ++t) p *= probs(t, path[t]);
      total += p;
    }
    int t = T - 1;
    while (t >= 0 && ++path[t] == C) path[t--] = 0;
    if (t < 0) break;
  }
  return -std::log(total);
}

inline long ctc_count_paths(int T, int C, const std::vector<int>& target) {
  std::vector<int> path(T, 0);
  long n = 0;
  while (true) {
    if (ctc_collapse(path) == target) ++n;
    int t = T - 1;
    while (t >= 0 && ++path[t] == C) path[t--] = 0;
    if (t < 0) break;
  }
  return n;
}

inline std::vector<double> naive_softmax(const std::vector<double>& z) {
  double s = 0;
  for (double v : z) s += std::exp(v);
  std::vector<double> out;
  for (double v : z) out.push_back(std::exp(v) / s);
  return out;
}

inline int edit_distance(const std::vector<int>& a, const std::vector<int>& b) {
  std::vector<std::vector<int>> d(a.size() + 1, std::vector<int>(b.size() + 1));
  for (size_t i = 0; i <= a.size(); ++i) d[i][0] = static_cast<int>(i);
  for (size_t j = 0; j <= b.size(); ++j) d[0][j] = static_cast<int>(j);
  for (size_t i = 1; i <= a.size(); ++i) {
    for (size_t j = 1; j <= b.size(); ++j) {
      d[i][j] = std::min({d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (a[i - 1] != b[j - 1])});
    }
  }
  return d[a.size()][b.size()];
}

// Reference pair-merge BPE encoder: rescans for the lowest-rank pair each pass.
inline std::vector<int> bpe_encode_ref(const std::vector<std::pair<int, int>>& merges, int base,
                                       std::vector<int> seq) {
  while (true) {
    int best = -1;
    for (size_t i = 0; i + 1 < seq.size(); ++i) {
      for (size_t r = 0; r < merges.size(); ++r) {
        if (merges[r].first == seq[i] && merges[r].second == seq[i + 1]) {
          if (best < 0 || static_cast<int>(r) < best) best = static_cast<int>(r);
          break;
        }
      }
    }
    if (best < 0) return seq;
    std::vector<int> next;
    for (size_t i = 0; i < seq.size(); ++i) {
      if (i + 1 < seq.size() && seq[i] == merges[best].first && seq[i + 1] == merges[best].second) {
        next.push_back(base + best);
        ++i;
      } else {
        next.push_back(seq[i]);
      }
    }
    seq = std::move(next);
  }
}

// Central finite-difference check on randomly sampled scalar parameters.
struct GradCheckResult {
  int checked = 0;
  double max_rel_err = 0;
  double max_abs_err = 0;
};

inline GradCheckResult grad_check(mmspeech::ParamStore<double>& params, const std::vector<bool>& eligible,
                                  const mmspeech::GradientSet<double>& analytic,
                                  const std::function<double()>& loss, int samples, uint64_t seed,
                                  double h = 1e-3) {
  std::vector<std::pair<int, size_t>> pool;
  for (int i = 0; i < params.size(); ++i) {
    if (!eligible[i]) continue;
    for (size_t j = 0; j < params.value(i).size(); ++j) pool.emplace_back(i, j);
  }
  mmspeech::Rng rng(seed);
  GradCheckResult res;
  for (int s = 0; s < samples && !pool.empty(); ++s) {
    auto [i, j] = pool[rng() % pool.size()];
    double& w = params.value(i).storage()[j];
    const double w0 = w;
    auto at = [&](double d) {
      w = w0 + d;
      return loss();
    };
    // fourth-order stencil: a wider step keeps rounding noise small without
    // paying for it in truncation error
    double num = (8 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12 * h);
    w = w0;
    double ana = analytic.touched(i) ? analytic.grad(i).storage()[j] : 0.0;
    double abs_err = std::abs(num - ana);
    double denom = std::max({std::abs(num), std::abs(ana), 1e-6});
    res.max_rel_err = std::max(res.max_rel_err, abs_err / denom);
    res.max_abs_err = std::max(res.max_abs_err, abs_err);
    ++res.checked;
  }
  return res;
}

// Analytic gradient of one scalar loss built on a fresh tape, compared with
// finite differences over parameters the loss actually reaches.
inline GradCheckResult check_model_loss(mmspeech::Model<double>& model,
                                        const std::function<mmspeech::Var<double>(mmspeech::Tape<double>&)>& build,
                                        const std::vector<bool>& frozen, uint64_t seed, int samples = 60) {
  mmspeech::GradientSet<double> grads(model.params());
  {
    mmspeech::Tape<double> tape(&model.params());
    tape.set_frozen(frozen);
    mmspeech::Var<double> loss = build(tape);
    tape.backward(loss);
    tape.collect(grads);
  }
  auto value = [&] {
    mmspeech::Tape<double> tape(&model.params());
    tape.set_recording(false);
    return tape.scalar(build(tape));
  };
  std::vector<bool> eligible(model.params().size());
  for (int i = 0; i < model.params().size(); ++i) {
    eligible[i] = grads.touched(i) && (i >= static_cast<int>(frozen.size()) || !frozen[i]);
  }
  return grad_check(model.params(), eligible, grads, value, samples, seed);
}

// Random but fixed next-symbol distributions keyed by the prefix.
class TableScorer : public mmspeech::SequenceScorer {
 public:
  TableScorer(int symbols, uint64_t seed, double spread = 1.5) : symbols_(symbols), seed_(seed), spread_(spread) {}
  int symbols() const override { return symbols_; }
  std::vector<double> next_log_probs(std::span<const int> prefix) const override {
    uint64_t h = seed_;
    for (int t : prefix) h = mmspeech::derive_seed(h, static_cast<uint64_t>(t) + 1);
    h = mmspeech::derive_seed(h, prefix.size());
    mmspeech::Rng rng(h);
    std::vector<double> z(symbols_ + 1);
    for (double& v : z) v = spread_ * mmspeech::normal01(rng);
    auto p = naive_softmax(z);
    for (double& v : p) v = std::log(v);
    return p;
  }

 private:
  int symbols_;
  uint64_t seed_;
  double spread_;
};

// Best eos-terminated sequence of at most max_len emitted symbols.
inline mmspeech::Hypothesis exhaustive_decode(const mmspeech::SequenceScorer& m, const mmspeech::SequenceScorer* lm,
                                              const mmspeech::BeamConfig& cfg) {
  mmspeech::Hypothesis best;
  best.score = -INFINITY;
  std::function<void(mmspeech::TokenSeq&, double)> rec = [&](mmspeech::TokenSeq& pre, double score) {
    auto pm = m.next_log_probs(pre);
    std::vector<double> pl;
    if (lm && cfg.lm_weight > 0) pl = lm->next_log_probs(pre);
    auto fused = [&](int w) { return pm[w] + (pl.empty() ? 0.0 : cfg.lm_weight * pl[w]); };
    double done =
        (score + fused(m.eos())) / mmspeech::length_penalty(static_cast<int>(pre.size()) + 1, cfg.length_penalty);
    if (done > best.score || (done == best.score && pre < best.tokens)) {
      best.score = done;
      best.tokens = pre;
    }
    if (static_cast<int>(pre.size()) + 1 >= cfg.max_len) return;
    for (int w = 0; w < m.symbols(); ++w) {
      pre.push_back(w);
      rec(pre, score + fused(w));
      pre.pop_back();
    }
  };
  mmspeech::TokenSeq empty;
  rec(empty, 0.0);
  return best;
}

}  // namespace oracle

namespace scratch {

// Fresh directory under the system temp dir, removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() / ("mmspeech-test-" + tag + "-" + std::to_string(::getpid()));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string str() const { return path.string(); }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
};

}  // namespace scratch
