// src/losses.cpp

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

#include "mmspeech/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "json.hpp"

namespace mmspeech {

const char* task_name(Task t) {
  switch (t) {
    case Task::kMsp: return "msp";
    case Task::kPp: return "pp";
    case Task::kS2c: return "s2c";
    case Task::kP2t: return "p2t";
    case Task::kS2t: return "s2t";
  }
  return "?";
}

Task parse_task(const std::string& name) {
  std::string n = name;
  std::transform(n.begin(), n.end(), n.begin(), [](unsigned char c) { return std::tolower(c); });
  for (int k = 0; k < kNumTasks; ++k) {
    if (n == task_name(static_cast<Task>(k))) return static_cast<Task>(k);
  }
  fail(ErrorKind::kConfig, "unknown task '" + name + "' (expected msp, pp, s2c, p2t or s2t)");
}

namespace losses {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

template <typename T>
std::vector<double> softmax_row(std::span<const T> row) {
  std::vector<double> out(row.size());
  double mx = -std::numeric_limits<double>::infinity();
  for (T v : row) mx = std::max(mx, static_cast<double>(v));
  double z = 0;
  for (size_t i = 0; i < row.size(); ++i) z += out[i] = std::exp(static_cast<double>(row[i]) - mx);
  for (double& v : out) v /= z;
  return out;
}

template <typename T>
void check_stochastic_shapes(const Matrix<T>& a, const Matrix<T>& b, const std::vector<bool>& mask,
                             const char* who) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) fail(ErrorKind::kDimension, std::string(who) + ": shape mismatch");
  if (static_cast<int>(mask.size()) != a.rows()) fail(ErrorKind::kDimension, std::string(who) + ": mask length mismatch");
}

}  // namespace

template <typename T>
double cross_entropy(const Matrix<T>& log_probs, std::span<const int> targets) {
  if (static_cast<int>(targets.size()) != log_probs.rows()) {
    fail(ErrorKind::kDimension, "cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                                    std::to_string(log_probs.rows()) + " rows");
  }
  double s = 0;
  for (int r = 0; r < log_probs.rows(); ++r) {
    if (targets[r] < 0 || targets[r] >= log_probs.cols()) fail(ErrorKind::kUnknownToken, "cross_entropy: target out of range");
    s -= log_probs(r, targets[r]);
  }
  return s;
}

template <typename T>
Matrix<T> target_phoneme_distribution(const Matrix<T>& H, const Matrix<T>& E) {
  if (H.cols() != E.cols()) fail(ErrorKind::kDimension, "target_phoneme_distribution: dim mismatch");
  Matrix<T> logits(H.rows(), E.rows());
  for (int t = 0; t < H.rows(); ++t) {
    for (int i = 0; i < E.rows(); ++i) {
      double s = 0;
      for (int d = 0; d < H.cols(); ++d) s += static_cast<double>(H(t, d)) * E(i, d);
      logits(t, i) = static_cast<T>(s);
    }
  }
  Matrix<T> out(H.rows(), E.rows());
  for (int t = 0; t < H.rows(); ++t) {
    auto p = softmax_row<T>(logits.row(t));
    for (int i = 0; i < E.rows(); ++i) out(t, i) = static_cast<T>(p[i]);
  }
  return out;
}

template <typename T>
double loss_msp(const Matrix<T>& target, const Matrix<T>& pred, const std::vector<bool>& latent_mask) {
  check_stochastic_shapes(target, pred, latent_mask, "loss_msp");
  double s = 0;
  for (int t = 0; t < target.rows(); ++t) {
    if (!latent_mask[t]) continue;
    for (int i = 0; i < target.cols(); ++i) {
      double q = target(t, i);
      if (q <= 0) continue;
      s += q * (std::log(q) - std::log(static_cast<double>(pred(t, i))));
    }
  }
  return s;
}

int ctc_min_frames(std::span<const int> target) {
  int n = static_cast<int>(target.size());
  for (size_t i = 1; i < target.size(); ++i) {
    if (target[i] == target[i - 1]) ++n;
  }
  return n;
}

template <typename T>
double ctc_neg_log_likelihood(const Matrix<T>& log_probs, std::span<const int> target, Matrix<T>* grad_logits) {
  const int frames = log_probs.rows();
  const int classes = log_probs.cols();
  if (frames < 1) fail(ErrorKind::kEmpty, "ctc: no frames");
  for (int y : target) {
    if (y < 1 || y >= classes) fail(ErrorKind::kUnknownToken, "ctc: label " + std::to_string(y) + " outside 1.." + std::to_string(classes - 1));
  }
  const int need = ctc_min_frames(target);
  if (frames < need) {
    fail(ErrorKind::kInfeasible, "ctc: " + std::to_string(frames) + " frames cannot align " +
                                     std::to_string(target.size()) + " labels (need " + std::to_string(need) + ")");
  }

  // Extended label sequence: blank y1 blank y2 ... blank.
  const int S = 2 * static_cast<int>(target.size()) + 1;
  std::vector<int> ext(S, 0);
  for (size_t i = 0; i < target.size(); ++i) ext[2 * i + 1] = target[i];
  auto lp = [&](int t, int s) { return static_cast<double>(log_probs(t, ext[s])); };
  auto can_skip = [&](int s) { return s >= 2 && ext[s] != 0 && ext[s] != ext[s - 2]; };

  std::vector<double> alpha(static_cast<size_t>(frames) * S, kNegInf);
  auto A = [&](int t, int s) -> double& { return alpha[static_cast<size_t>(t) * S + s]; };
  A(0, 0) = lp(0, 0);
  if (S > 1) A(0, 1) = lp(0, 1);
  for (int t = 1; t < frames; ++t) {
    for (int s = 0; s < S; ++s) {
      double a = A(t - 1, s);
      if (s >= 1) a = log_add(a, A(t - 1, s - 1));
      if (can_skip(s)) a = log_add(a, A(t - 1, s - 2));
      if (a != kNegInf) A(t, s) = a + lp(t, s);
    }
  }
  double log_p = A(frames - 1, S - 1);
  if (S > 1) log_p = log_add(log_p, A(frames - 1, S - 2));
  if (log_p == kNegInf) fail(ErrorKind::kNonFinite, "ctc: zero-probability target");

  if (grad_logits) {
    std::vector<double> beta(static_cast<size_t>(frames) * S, kNegInf);
    auto B = [&](int t, int s) -> double& { return beta[static_cast<size_t>(t) * S + s]; };
    B(frames - 1, S - 1) = lp(frames - 1, S - 1);
    if (S > 1) B(frames - 1, S - 2) = lp(frames - 1, S - 2);
    for (int t = frames - 2; t >= 0; --t) {
      for (int s = 0; s < S; ++s) {
        double b = B(t + 1, s);
        if (s + 1 < S) b = log_add(b, B(t + 1, s + 1));
        if (s + 2 < S && can_skip(s + 2)) b = log_add(b, B(t + 1, s + 2));
        if (b != kNegInf) B(t, s) = b + lp(t, s);
      }
    }
    *grad_logits = Matrix<T>(frames, classes);
    std::vector<double> occ(classes);
    for (int t = 0; t < frames; ++t) {
      std::fill(occ.begin(), occ.end(), kNegInf);
      for (int s = 0; s < S; ++s) {
        double g = A(t, s) + B(t, s) - lp(t, s);
        occ[ext[s]] = log_add(occ[ext[s]], g);
      }
      for (int k = 0; k < classes; ++k) {
        double y = std::exp(static_cast<double>(log_probs(t, k)));
        (*grad_logits)(t, k) = static_cast<T>(y - std::exp(occ[k] - log_p));
      }
    }
  }
  return -log_p;
}

template <typename T>
double loss_pp(const Matrix<T>& pred_probs, std::span<const int> target) {
  Matrix<T> lp(pred_probs.rows(), pred_probs.cols());
  for (size_t i = 0; i < lp.size(); ++i) lp.storage()[i] = static_cast<T>(std::log(static_cast<double>(pred_probs.storage()[i])));
  return ctc_neg_log_likelihood(lp, target);
}

template <typename T>
double mean_entropy(const Matrix<T>& probs, const std::vector<bool>* mask) {
  if (mask && static_cast<int>(mask->size()) != probs.rows()) fail(ErrorKind::kDimension, "mean_entropy: mask length mismatch");
  double total = 0;
  int n = 0;
  for (int t = 0; t < probs.rows(); ++t) {
    if (mask && !(*mask)[t]) continue;
    double h = 0;
    for (T p : probs.row(t)) {
      if (p > 0) h -= p * std::log(static_cast<double>(p));
    }
    total += h;
    ++n;
  }
  return n ? total / n : 0.0;
}

template <typename T>
double marginal_entropy(const Matrix<T>& probs, const std::vector<bool>* mask) {
  std::vector<double> avg(probs.cols(), 0.0);
  int n = 0;
  for (int t = 0; t < probs.rows(); ++t) {
    if (mask && !(*mask)[t]) continue;
    for (int i = 0; i < probs.cols(); ++i) avg[i] += probs(t, i);
    ++n;
  }
  if (!n) return 0.0;
  double h = 0;
  for (double p : avg) {
    p /= n;
    if (p > 0) h -= p * std::log(p);
  }
  return h;
}

LossBreakdown total_loss(LossBreakdown b, const LossWeights& weights) {
  b.total = 0;
  for (int k = 0; k < kNumTasks; ++k) {
    if (b.component[k]) b.total += weights.lambda[k] * *b.component[k];
  }
  return b;
}

std::string metrics_record(int64_t step, const std::string& stage, Task task, const LossBreakdown& b) {
  nlohmann::json j;
  j["step"] = step;
  j["stage"] = stage;
  j["task"] = task_name(task);
  j["value"] = b.total;
  nlohmann::json d = nlohmann::json::object();
  for (int k = 0; k < kNumTasks; ++k) {
    if (b.component[k]) d[std::string("loss_") + task_name(static_cast<Task>(k))] = *b.component[k];
  }
  if (task == Task::kMsp) {
    d["masked_frames"] = b.masked_frames;
    d["target_entropy"] = b.mean_target_entropy;
    d["pred_entropy"] = b.mean_pred_entropy;
    d["marginal_pred_entropy"] = b.marginal_pred_entropy;
  }
  if (task == Task::kPp) {
    d["ctc_infeasible"] = b.ctc_infeasible;
    d["ctc_valid_paths"] = b.ctc_valid_paths;
  }
  j["diagnostics"] = d;
  return j.dump();
}

template <typename T>
Var<T> cross_entropy_op(Var<T> log_probs, std::span<const int> targets) {
  return ag::nll_sum(log_probs, targets);
}

template <typename T>
Var<T> msp_op(Var<T> pred_logits, const Matrix<T>& target, const std::vector<bool>& latent_mask) {
  Tape<T>& t = *pred_logits.tape;
  const Matrix<T>& z = t.value(pred_logits);
  check_stochastic_shapes(z, target, latent_mask, "msp_op");
  Matrix<T> grad(z.rows(), z.cols());
  double s = 0;
  for (int r = 0; r < z.rows(); ++r) {
    if (!latent_mask[r]) continue;
    auto p = softmax_row<T>(z.row(r));
    double mx = *std::max_element(z.row(r).begin(), z.row(r).end());
    double lse = 0;
    for (T v : z.row(r)) lse += std::exp(v - mx);
    lse = mx + std::log(lse);
    for (int i = 0; i < z.cols(); ++i) {
      double q = target(r, i);
      if (q > 0) s += q * (std::log(q) - (z(r, i) - lse));
      grad(r, i) = static_cast<T>(p[i] - q);
    }
  }
  Matrix<T> out(1, 1, static_cast<T>(s));
  int iz = pred_logits.id, io = t.size();
  return t.push(std::move(out), t.requires_grad(pred_logits), [&t, iz, io, grad = std::move(grad)] {
    T g = t.grad(io)(0, 0);
    Matrix<T>& gz = t.grad(iz);
    for (size_t i = 0; i < grad.size(); ++i) gz.storage()[i] += g * grad.storage()[i];
  });
}

template <typename T>
Var<T> ctc_op(Var<T> logits, std::span<const int> target) {
  Tape<T>& t = *logits.tape;
  const Matrix<T>& z = t.value(logits);
  Matrix<T> lp(z.rows(), z.cols());
  for (int r = 0; r < z.rows(); ++r) {
    double mx = *std::max_element(z.row(r).begin(), z.row(r).end());
    double lse = 0;
    for (T v : z.row(r)) lse += std::exp(v - mx);
    lse = mx + std::log(lse);
    for (int c = 0; c < z.cols(); ++c) lp(r, c) = static_cast<T>(z(r, c) - lse);
  }
  const bool need_grad = t.recording() && t.requires_grad(logits);
  Matrix<T> grad;
  double loss = ctc_neg_log_likelihood(lp, target, need_grad ? &grad : nullptr);
  Matrix<T> out(1, 1, static_cast<T>(loss));
  int iz = logits.id, io = t.size();
  return t.push(std::move(out), t.requires_grad(logits), [&t, iz, io, grad = std::move(grad)] {
    T g = t.grad(io)(0, 0);
    Matrix<T>& gz = t.grad(iz);
    for (size_t i = 0; i < grad.size(); ++i) gz.storage()[i] += g * grad.storage()[i];
  });
}

#define MMSPEECH_INSTANTIATE_LOSSES(T)                                                          \
  template double cross_entropy(const Matrix<T>&, std::span<const int>);                        \
  template Matrix<T> target_phoneme_distribution(const Matrix<T>&, const Matrix<T>&);           \
  template double loss_msp(const Matrix<T>&, const Matrix<T>&, const std::vector<bool>&);        \
  template double ctc_neg_log_likelihood(const Matrix<T>&, std::span<const int>, Matrix<T>*);   \
  template double loss_pp(const Matrix<T>&, std::span<const int>);                              \
  template double mean_entropy(const Matrix<T>&, const std::vector<bool>*);                     \
  template double marginal_entropy(const Matrix<T>&, const std::vector<bool>*);                 \
  template Var<T> cross_entropy_op(Var<T>, std::span<const int>);                               \
  template Var<T> msp_op(Var<T>, const Matrix<T>&, const std::vector<bool>&);                   \
  template Var<T> ctc_op(Var<T>, std::span<const int>);

MMSPEECH_INSTANTIATE_LOSSES(float)
MMSPEECH_INSTANTIATE_LOSSES(double)

}  // namespace losses
}  // namespace mmspeech
