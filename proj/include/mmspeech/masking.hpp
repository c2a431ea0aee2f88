// mmspeech/masking.hpp

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

#pragma once

#include <vector>

#include "mmspeech/common.hpp"

namespace mmspeech {

enum class SpanStartPolicy {
  kBernoulli,   // every frame starts a span independently with start_prob
  kExactCount,  // exactly round(start_prob * T) distinct starts, at least 1
};

struct SpanMaskConfig {
  double start_prob = 0.07;
  int span_len = 10;
  SpanStartPolicy policy = SpanStartPolicy::kBernoulli;
  // Guarantees at least one masked frame: one re-draw, then frame 0.
  bool force_nonempty = true;
  uint64_t seed = 0;

  void validate() const;
};

std::vector<bool> sample_span_mask(int length, const SpanMaskConfig& cfg);

// Span mask built from explicit start positions; spans are truncated at the
// sequence end and overlaps are unioned.
std::vector<bool> mask_from_starts(int length, std::span<const int> starts, int span_len);

// Maps a frame-level mask to the output of `layers` stacked conv layers of
// the given kernel/stride/padding: an output step is masked iff any frame in
// its receptive field is masked.
std::vector<bool> downsample_mask(const std::vector<bool>& frame_mask, int layers, int kernel,
                                  int stride, int pad);

double masked_fraction(const std::vector<bool>& mask);

}  // namespace mmspeech
