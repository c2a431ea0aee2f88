// mmspeech/common.hpp

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

#include <cstdint>
#include <functional>
#include <new>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mmspeech {

enum class ErrorKind {
  kConfig,
  kParse,
  kIo,
  kMissingId,
  kUnknownToken,
  kDimension,
  kInsufficientData,
  kInfeasible,
  kNonFinite,
  kDependency,
  kEmpty,
};

const char* error_kind_name(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& what);

using TokenSeq = std::vector<int>;

// Cache-line aligned allocator. Vectorized kernels choose their peeling from
// the buffer address, so unaligned storage would make float sums depend on
// where malloc happened to put them.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, size_t) { ::operator delete(p, kAlign); }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

// Dense row-major matrix; the storage type for features, activations and
// parameters.
template <typename T>
class Matrix {
 public:
  Matrix() = default;
  Matrix(int rows, int cols, T fill = T(0))
      : rows_(rows), cols_(cols),
        data_(static_cast<size_t>(rows) * static_cast<size_t>(cols), fill) {}

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  using Storage = std::vector<T, AlignedAllocator<T>>;
  Storage& storage() { return data_; }
  const Storage& storage() const { return data_; }

  T& operator()(int r, int c) { return data_[static_cast<size_t>(r) * cols_ + c]; }
  T operator()(int r, int c) const {
    return data_[static_cast<size_t>(r) * cols_ + c];
  }

  std::span<T> row(int r) {
    return {data_.data() + static_cast<size_t>(r) * cols_, static_cast<size_t>(cols_)};
  }
  std::span<const T> row(int r) const {
    return {data_.data() + static_cast<size_t>(r) * cols_, static_cast<size_t>(cols_)};
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename U>
  Matrix<U> cast() const {
    Matrix<U> out(rows_, cols_);
    for (size_t i = 0; i < data_.size(); ++i) out.storage()[i] = static_cast<U>(data_[i]);
    return out;
  }

  bool operator==(const Matrix& other) const = default;

 private:
  int rows_ = 0;
  int cols_ = 0;
  Storage data_;
};

// All randomness flows through explicitly seeded engines. derive_seed mixes
// a base seed with stream identifiers (splitmix64) so that independent
// consumers never share a stream.
uint64_t derive_seed(uint64_t seed, uint64_t a, uint64_t b = 0, uint64_t c = 0);

using Rng = std::mt19937_64;

inline double uniform01(Rng& rng) {
  // 53 random bits -> [0, 1)
  return static_cast<double>(rng() >> 11) * (1.0 / 9007199254740992.0);
}

inline int uniform_int(Rng& rng, int lo, int hi) {  // inclusive range
  return lo + static_cast<int>(rng() % static_cast<uint64_t>(hi - lo + 1));
}

double normal01(Rng& rng);

// FNV-1a 64-bit, used for artifact provenance.
uint64_t fnv1a64(std::span<const unsigned char> bytes, uint64_t h = 1469598103934665603ULL);
uint64_t fnv1a64_file(const std::string& path);
std::string hex64(uint64_t v);

std::string join_tokens(std::span<const int> tokens);
TokenSeq parse_tokens(const std::string& text);

// Writes to path + ".tmp" then renames, so readers never observe a partial file.
void write_file_atomic(const std::string& path, const std::string& bytes);
std::string read_file(const std::string& path);

// Runs fn(0..n-1) on up to `threads` workers with a static contiguous
// partition. The first exception by index order is rethrown.
void parallel_for(int n, int threads, const std::function<void(int)>& fn);

}  // namespace mmspeech
