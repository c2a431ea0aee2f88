// src/masking.cpp

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

#include "mmspeech/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mmspeech {

void SpanMaskConfig::validate() const {
  if (!(start_prob > 0.0 && start_prob <= 1.0)) fail(ErrorKind::kConfig, "span mask: start_prob must lie in (0,1]");
  if (span_len < 1) fail(ErrorKind::kConfig, "span mask: span_len must be >= 1");
}

std::vector<bool> mask_from_starts(int length, std::span<const int> starts, int span_len) {
  std::vector<bool> mask(std::max(length, 0), false);
  for (int s : starts) {
    for (int t = std::max(s, 0); t < std::min(s + span_len, length); ++t) mask[t] = true;
  }
  return mask;
}

namespace {

std::vector<int> draw_starts(int length, const SpanMaskConfig& cfg, Rng& rng) {
  std::vector<int> starts;
  if (cfg.policy == SpanStartPolicy::kBernoulli) {
    for (int t = 0; t < length; ++t) {
      if (uniform01(rng) < cfg.start_prob) starts.push_back(t);
    }
  } else {
    int n = std::max(1, static_cast<int>(std::lround(cfg.start_prob * length)));
    n = std::min(n, length);
    std::vector<int> all(length);
    std::iota(all.begin(), all.end(), 0);
    for (int i = 0; i < n; ++i) std::swap(all[i], all[uniform_int(rng, i, length - 1)]);
    starts.assign(all.begin(), all.begin() + n);
  }
  return starts;
}

}  // namespace

std::vector<bool> sample_span_mask(int length, const SpanMaskConfig& cfg) {
  cfg.validate();
  if (length < 1) fail(ErrorKind::kEmpty, "sample_span_mask: length must be >= 1");
  Rng rng(derive_seed(cfg.seed, 0x59a4));
  auto starts = draw_starts(length, cfg, rng);
  if (starts.empty() && cfg.force_nonempty) starts = draw_starts(length, cfg, rng);
  if (starts.empty() && cfg.force_nonempty) starts.push_back(0);
  return mask_from_starts(length, starts, cfg.span_len);
}

std::vector<bool> downsample_mask(const std::vector<bool>& frame_mask, int layers, int kernel, int stride, int pad) {
  std::vector<bool> cur = frame_mask;
  for (int l = 0; l < layers; ++l) {
    const int len = static_cast<int>(cur.size());
    const int out_len = (len + 2 * pad - kernel) / stride + 1;
    std::vector<bool> next(std::max(out_len, 0), false);
    for (int r = 0; r < out_len; ++r) {
      for (int j = 0; j < kernel; ++j) {
        int src = r * stride - pad + j;
        if (src >= 0 && src < len && cur[src]) next[r] = true;
      }
    }
    cur = std::move(next);
  }
  return cur;
}

double masked_fraction(const std::vector<bool>& mask) {
  if (mask.empty()) return 0.0;
  return static_cast<double>(std::count(mask.begin(), mask.end(), true)) / mask.size();
}

}  // namespace mmspeech
