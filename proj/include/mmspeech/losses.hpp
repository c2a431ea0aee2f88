// mmspeech/losses.hpp

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

// The five pre-training objectives. Value-level functions are pure
// computations on matrices; the *_op variants record on a tape for training.
//
//   P2T / S2C / S2T : sum_l -log p(y_l | y_<l, H)        (teacher forced)
//   MSP             : sum_{t masked} KL(p(.|h_t) || p(.|h~_t)),
//                     p(e_i|h) = softmax_i(h . e_i)
//   PP              : CTC over [blank; phonemes], blank = class 0
//   total           : sum_k lambda_k L_k over the tasks present

#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mmspeech/autograd.hpp"
#include "mmspeech/common.hpp"

namespace mmspeech {

enum class Task { kMsp = 0, kPp = 1, kS2c = 2, kP2t = 3, kS2t = 4 };
constexpr int kNumTasks = 5;
const char* task_name(Task t);
Task parse_task(const std::string& name);

namespace losses {

// Sum of -log_probs(r, targets[r]); targets already include eos.
template <typename T>
double cross_entropy(const Matrix<T>& log_probs, std::span<const int> targets);

template <typename T>
double loss_p2t(const Matrix<T>& log_probs, std::span<const int> targets) { return cross_entropy(log_probs, targets); }
template <typename T>
double loss_s2c(const Matrix<T>& log_probs, std::span<const int> targets) { return cross_entropy(log_probs, targets); }
template <typename T>
double loss_s2t(const Matrix<T>& log_probs, std::span<const int> targets) { return cross_entropy(log_probs, targets); }

// Row-wise stabilized softmax of H E^T (T' x I).
template <typename T>
Matrix<T> target_phoneme_distribution(const Matrix<T>& H, const Matrix<T>& E);

// Masked KL divergence; both arguments are row-stochastic T' x I.
template <typename T>
double loss_msp(const Matrix<T>& target, const Matrix<T>& pred, const std::vector<bool>& latent_mask);

// Frames needed for a CTC alignment: |target| plus one blank per repeat.
int ctc_min_frames(std::span<const int> target);

// CTC negative log-likelihood of target (labels in 1..C-1) under per-frame
// log-probabilities (T' x C, blank = 0). When grad_logits is non-null it
// receives d loss / d logits assuming log_probs = log_softmax(logits).
// Throws ErrorKind::kInfeasible when T' < ctc_min_frames(target).
template <typename T>
double ctc_neg_log_likelihood(const Matrix<T>& log_probs, std::span<const int> target,
                              Matrix<T>* grad_logits = nullptr);

// PP loss from a row-stochastic T' x (I+1) matrix.
template <typename T>
double loss_pp(const Matrix<T>& pred_probs, std::span<const int> target);

// Mean row entropy (nats), optionally restricted to masked rows.
template <typename T>
double mean_entropy(const Matrix<T>& probs, const std::vector<bool>* mask = nullptr);
// Entropy of the row-averaged distribution.
template <typename T>
double marginal_entropy(const Matrix<T>& probs, const std::vector<bool>* mask = nullptr);

struct LossWeights {
  std::array<double, kNumTasks> lambda{1.0, 1.0, 1.0, 1.0, 1.0};
};

struct LossBreakdown {
  std::array<std::optional<double>, kNumTasks> component;
  double total = 0.0;
  int masked_frames = 0;
  double mean_target_entropy = 0.0;
  double mean_pred_entropy = 0.0;
  double marginal_pred_entropy = 0.0;
  int ctc_infeasible = 0;
  bool ctc_valid_paths = true;

  std::optional<double>& operator[](Task t) { return component[static_cast<int>(t)]; }
  const std::optional<double>& operator[](Task t) const { return component[static_cast<int>(t)]; }
};

// Sets total to the lambda-weighted sum of the present components.
LossBreakdown total_loss(LossBreakdown components, const LossWeights& weights);

// One metrics line: {"step":..,"task":..,"value":..,"diagnostics":{..}}.
std::string metrics_record(int64_t step, const std::string& stage, Task task, const LossBreakdown& b);

// --- tape ops --------------------------------------------------------------

template <typename T>
Var<T> cross_entropy_op(Var<T> log_probs, std::span<const int> targets);

// KL(target || softmax(logits)) summed over masked rows; target is constant.
template <typename T>
Var<T> msp_op(Var<T> pred_logits, const Matrix<T>& target, const std::vector<bool>& latent_mask);

template <typename T>
Var<T> ctc_op(Var<T> logits, std::span<const int> target);

}  // namespace losses
}  // namespace mmspeech
