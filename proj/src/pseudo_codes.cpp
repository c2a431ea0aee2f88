// src/pseudo_codes.cpp

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

#include "mmspeech/pseudo_codes.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <unordered_map>

namespace mmspeech {

TeacherFeaturizer::TeacherFeaturizer(Matrix<double> projection, int window)
    : projection_(std::move(projection)), window_(window) {
  if (window_ < 1) fail(ErrorKind::kConfig, "featurizer: window must be >= 1");
}

TeacherFeaturizer TeacherFeaturizer::create(int feature_dim, int out_dim, int window, uint64_t seed) {
  Matrix<double> proj(feature_dim, out_dim);
  Rng rng(derive_seed(seed, 0x7eac4e));
  const double s = 1.0 / std::sqrt(static_cast<double>(feature_dim));
  for (auto& x : proj.storage()) x = s * normal01(rng);
  return TeacherFeaturizer(std::move(proj), window);
}

Matrix<double> TeacherFeaturizer::featurize(const Matrix<float>& frames) const {
  if (frames.cols() != input_dim()) {
    fail(ErrorKind::kDimension, "featurizer: frame dim " + std::to_string(frames.cols()) +
                                    " != " + std::to_string(input_dim()));
  }
  const int steps = (frames.rows() + window_ - 1) / window_;
  const int d = output_dim();
  Matrix<double> out(steps, d);
  for (int s = 0; s < steps; ++s) {
    const int lo = s * window_, hi = std::min(frames.rows(), lo + window_);
    for (int t = lo; t < hi; ++t) {
      for (int f = 0; f < frames.cols(); ++f) {
        const double x = frames(t, f);
        for (int j = 0; j < d; ++j) out(s, j) += x * projection_(f, j);
      }
    }
    for (int j = 0; j < d; ++j) out(s, j) /= (hi - lo);
  }
  return out;
}

void Codebook::validate() const {
  if (k() < 2) fail(ErrorKind::kConfig, "codebook: K must be >= 2");
  for (double x : centroids.storage()) {
    if (!std::isfinite(x)) fail(ErrorKind::kNonFinite, "codebook: non-finite centroid");
  }
  for (int a = 0; a < k(); ++a) {
    for (int b = a + 1; b < k(); ++b) {
      if (std::equal(centroids.row(a).begin(), centroids.row(a).end(), centroids.row(b).begin())) {
        fail(ErrorKind::kConfig, "codebook: duplicate centroids " + std::to_string(a) + "," + std::to_string(b));
      }
    }
  }
}

namespace {

double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

// Returns inertia; fills assignment and per-point squared distance.
double assign(const Matrix<double>& x, const Matrix<double>& c, std::vector<int>& assignment,
              std::vector<double>& dist) {
  double inertia = 0;
  for (int i = 0; i < x.rows(); ++i) {
    int best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (int j = 0; j < c.rows(); ++j) {
      double d = sq_dist(x.row(i), c.row(j));
      if (d < bd) {
        bd = d;
        best = j;
      }
    }
    assignment[i] = best;
    dist[i] = bd;
    inertia += bd;
  }
  return inertia;
}

}  // namespace

Matrix<double> kmeans_plusplus_init(const Matrix<double>& x, int k, Rng& rng) {
  const int n = x.rows();
  if (k < 1 || n < k) {
    fail(ErrorKind::kInsufficientData, "kmeans: need at least K=" + std::to_string(k) + " vectors, got " + std::to_string(n));
  }
  Matrix<double> c(k, x.cols());
  int first = uniform_int(rng, 0, n - 1);
  std::copy(x.row(first).begin(), x.row(first).end(), c.row(0).begin());
  std::vector<double> d2(n);
  for (int i = 0; i < n; ++i) d2[i] = sq_dist(x.row(i), c.row(0));
  for (int j = 1; j < k; ++j) {
    double total = 0;
    for (double v : d2) total += v;
    int pick = 0;
    if (total > 0) {
      double u = uniform01(rng) * total, acc = 0;
      pick = n - 1;
      for (int i = 0; i < n; ++i) {
        acc += d2[i];
        if (u < acc && d2[i] > 0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = uniform_int(rng, 0, n - 1);
    }
    std::copy(x.row(pick).begin(), x.row(pick).end(), c.row(j).begin());
    for (int i = 0; i < n; ++i) d2[i] = std::min(d2[i], sq_dist(x.row(i), c.row(j)));
  }
  return c;
}

KMeansResult lloyd(const Matrix<double>& x, Matrix<double> init, int max_iters, double tol) {
  const int n = x.rows(), k = init.rows(), d = x.cols();
  if (n < k) fail(ErrorKind::kInsufficientData, "kmeans: fewer vectors than clusters");
  if (init.cols() != d) fail(ErrorKind::kDimension, "kmeans: init dimension mismatch");
  KMeansResult res;
  Matrix<double> c = std::move(init);
  std::vector<int> a(n);
  std::vector<double> dist(n);
  for (int it = 0; it < max_iters; ++it) {
    res.inertia_history.push_back(assign(x, c, a, dist));
    Matrix<double> next(k, d);
    std::vector<int> count(k, 0);
    for (int i = 0; i < n; ++i) {
      ++count[a[i]];
      auto dst = next.row(a[i]);
      auto src = x.row(i);
      for (int f = 0; f < d; ++f) dst[f] += src[f];
    }
    std::vector<bool> taken(n, false);
    for (int j = 0; j < k; ++j) {
      if (count[j] > 0) {
        for (double& v : next.row(j)) v /= count[j];
        continue;
      }
      int far = -1;
      for (int i = 0; i < n; ++i) {
        if (!taken[i] && (far < 0 || dist[i] > dist[far])) far = i;
      }
      taken[far] = true;
      std::copy(x.row(far).begin(), x.row(far).end(), next.row(j).begin());
      ++res.empty_reseeds;
    }
    double shift = 0;
    for (int j = 0; j < k; ++j) shift = std::max(shift, std::sqrt(sq_dist(c.row(j), next.row(j))));
    c = std::move(next);
    ++res.iterations;
    if (shift < tol) break;
  }
  res.inertia_history.push_back(assign(x, c, a, dist));
  res.codebook.centroids = std::move(c);
  res.assignment = std::move(a);
  return res;
}

KMeansResult kmeans_fit(const Matrix<double>& vectors, int k, int max_iters, double tol, uint64_t seed) {
  if (k < 2) fail(ErrorKind::kConfig, "kmeans: K must be >= 2");
  Rng rng(derive_seed(seed, 0x6b6d65616e73));
  auto init = kmeans_plusplus_init(vectors, k, rng);
  return lloyd(vectors, std::move(init), max_iters, tol);
}

std::vector<int> quantize(const Codebook& cb, const Matrix<double>& frames) {
  if (frames.cols() != cb.dim()) {
    fail(ErrorKind::kDimension, "quantize: frame dim " + std::to_string(frames.cols()) +
                                    " != codebook dim " + std::to_string(cb.dim()));
  }
  std::vector<int> a(frames.rows());
  std::vector<double> dist(frames.rows());
  assign(frames, cb.centroids, a, dist);
  return a;
}

TokenSeq deduplicate(std::span<const int> units) {
  TokenSeq out;
  for (int u : units) {
    if (out.empty() || out.back() != u) out.push_back(u);
  }
  return out;
}

namespace {

using PairKey = uint64_t;

PairKey key(int a, int b) {
  return (static_cast<uint64_t>(static_cast<uint32_t>(a)) << 32) | static_cast<uint32_t>(b);
}

void merge_pair(TokenSeq& seq, int a, int b, int sym) {
  size_t w = 0;
  for (size_t r = 0; r < seq.size(); ++r) {
    if (r + 1 < seq.size() && seq[r] == a && seq[r + 1] == b) {
      seq[w++] = sym;
      ++r;
    } else {
      seq[w++] = seq[r];
    }
  }
  seq.resize(w);
}

}  // namespace

BpeModel bpe_train(const std::vector<TokenSeq>& corpus, int base_vocab, int target_vocab) {
  BpeModel model;
  model.base_vocab = base_vocab;
  std::vector<TokenSeq> seqs = corpus;
  for (const auto& s : seqs) {
    for (int u : s) {
      if (u < 0 || u >= base_vocab) fail(ErrorKind::kUnknownToken, "bpe_train: unit " + std::to_string(u) + " outside base vocabulary");
    }
  }
  while (model.vocab_size() < target_vocab) {
    std::map<std::pair<int, int>, int64_t> counts;
    for (const auto& s : seqs) {
      for (size_t i = 0; i + 1 < s.size(); ++i) ++counts[{s[i], s[i + 1]}];
    }
    std::pair<int, int> best{-1, -1};
    int64_t best_count = 0;
    for (const auto& [pair, c] : counts) {  // ascending pair order, so '>' keeps the smallest on ties
      if (c > best_count) {
        best_count = c;
        best = pair;
      }
    }
    if (best_count < 2) break;
    const int sym = model.vocab_size();
    model.merges.push_back(best);
    for (auto& s : seqs) merge_pair(s, best.first, best.second, sym);
  }
  return model;
}

TokenSeq bpe_encode(const BpeModel& model, std::span<const int> units) {
  TokenSeq seq(units.begin(), units.end());
  for (int u : seq) {
    if (u < 0 || u >= model.base_vocab) fail(ErrorKind::kUnknownToken, "bpe_encode: unit " + std::to_string(u) + " outside base vocabulary");
  }
  std::unordered_map<PairKey, int> rank;
  for (size_t r = 0; r < model.merges.size(); ++r) rank.emplace(key(model.merges[r].first, model.merges[r].second), static_cast<int>(r));
  while (seq.size() > 1) {
    int best = std::numeric_limits<int>::max();
    for (size_t i = 0; i + 1 < seq.size(); ++i) {
      auto it = rank.find(key(seq[i], seq[i + 1]));
      if (it != rank.end()) best = std::min(best, it->second);
    }
    if (best == std::numeric_limits<int>::max()) break;
    merge_pair(seq, model.merges[best].first, model.merges[best].second, model.base_vocab + best);
  }
  return seq;
}

TokenSeq bpe_decode(const BpeModel& model, std::span<const int> codes) {
  TokenSeq out;
  std::vector<int> stack;
  for (int c : codes) {
    if (c < 0 || c >= model.vocab_size()) fail(ErrorKind::kUnknownToken, "bpe_decode: unknown symbol " + std::to_string(c));
    stack.push_back(c);
    while (!stack.empty()) {
      int s = stack.back();
      stack.pop_back();
      if (s < model.base_vocab) {
        out.push_back(s);
      } else {
        const auto& m = model.merges[s - model.base_vocab];
        stack.push_back(m.second);
        stack.push_back(m.first);
      }
    }
  }
  return out;
}

std::string BpeModel::serialize() const {
  std::ostringstream os;
  os << "#mmspeech-bpe\tv1\nbase_vocab\t" << base_vocab << "\n";
  for (const auto& [a, b] : merges) os << a << '\t' << b << '\n';
  return os.str();
}

BpeModel BpeModel::parse(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  BpeModel m;
  int line_no = 0;
  bool have_base = false;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    if (!have_base) {
      std::string k;
      if (!(ls >> k >> m.base_vocab) || k != "base_vocab") fail(ErrorKind::kParse, "bpe line " + std::to_string(line_no) + ": expected base_vocab");
      have_base = true;
      continue;
    }
    int a, b;
    if (!(ls >> a >> b)) fail(ErrorKind::kParse, "bpe line " + std::to_string(line_no) + ": expected merge pair");
    const int next = m.vocab_size();
    if (a < 0 || b < 0 || a >= next || b >= next) fail(ErrorKind::kParse, "bpe line " + std::to_string(line_no) + ": merge refers to undefined symbol");
    m.merges.emplace_back(a, b);
  }
  if (!have_base) fail(ErrorKind::kParse, "bpe: missing base_vocab");
  return m;
}

std::string serialize_codebook(const TeacherFeaturizer& featurizer, const Codebook& cb) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "#mmspeech-codebook\tv1\n";
  os << "featurizer\t" << featurizer.input_dim() << '\t' << featurizer.output_dim() << '\t' << featurizer.window() << '\n';
  for (int r = 0; r < featurizer.input_dim(); ++r) {
    for (int c = 0; c < featurizer.output_dim(); ++c) os << (c ? "\t" : "") << featurizer.projection()(r, c);
    os << '\n';
  }
  os << "centroids\t" << cb.k() << '\t' << cb.dim() << '\n';
  for (int r = 0; r < cb.k(); ++r) {
    for (int c = 0; c < cb.dim(); ++c) os << (c ? "\t" : "") << cb.centroids(r, c);
    os << '\n';
  }
  return os.str();
}

std::pair<TeacherFeaturizer, Codebook> parse_codebook(const std::string& text) {
  std::istringstream is(text);
  std::string magic, ver, tag;
  if (!(is >> magic >> ver) || magic != "#mmspeech-codebook" || ver != "v1") fail(ErrorKind::kParse, "codebook: bad header");
  int f, d, w;
  if (!(is >> tag >> f >> d >> w) || tag != "featurizer" || f < 1 || d < 1) fail(ErrorKind::kParse, "codebook: bad featurizer header");
  Matrix<double> proj(f, d);
  for (auto& x : proj.storage()) {
    if (!(is >> x)) fail(ErrorKind::kParse, "codebook: truncated projection");
  }
  int k, cd;
  if (!(is >> tag >> k >> cd) || tag != "centroids" || k < 1 || cd != d) fail(ErrorKind::kParse, "codebook: bad centroid header");
  Codebook cb{Matrix<double>(k, cd)};
  for (auto& x : cb.centroids.storage()) {
    if (!(is >> x)) fail(ErrorKind::kParse, "codebook: truncated centroids");
  }
  cb.validate();
  return {TeacherFeaturizer(std::move(proj), w), std::move(cb)};
}

TokenSeq speech_to_units(const TeacherFeaturizer& featurizer, const Codebook& cb, const Matrix<float>& features) {
  return deduplicate(quantize(cb, featurizer.featurize(features)));
}

TokenSeq speech_to_pseudocodes(const TeacherFeaturizer& featurizer, const Codebook& cb, const BpeModel& bpe,
                               const Matrix<float>& features) {
  return bpe_encode(bpe, speech_to_units(featurizer, cb, features));
}

void PseudoCodeConfig::validate() const {
  if (teacher_dim < 1 || teacher_window < 1) fail(ErrorKind::kConfig, "pseudo_codes: teacher_dim and teacher_window must be >= 1");
  if (clusters < 1) fail(ErrorKind::kConfig, "pseudo_codes: clusters must be >= 1");
  if (kmeans_iters < 0 || !(kmeans_tol >= 0)) fail(ErrorKind::kConfig, "pseudo_codes: bad k-means limits");
  if (code_vocab < clusters) fail(ErrorKind::kConfig, "pseudo_codes: code_vocab must be >= clusters");
}

CodebookArtifact train_codebook(const std::vector<const Matrix<float>*>& speech, int feature_dim,
                                const PseudoCodeConfig& cfg) {
  cfg.validate();
  if (speech.empty()) fail(ErrorKind::kEmpty, "train_codebook: no unlabeled speech");
  auto feat = TeacherFeaturizer::create(feature_dim, cfg.teacher_dim, cfg.teacher_window, derive_seed(cfg.seed, 0x7eac));
  std::vector<Matrix<double>> per;
  per.reserve(speech.size());
  int rows = 0;
  for (const auto* f : speech) {
    per.push_back(feat.featurize(*f));
    rows += per.back().rows();
  }
  Matrix<double> all(rows, cfg.teacher_dim);
  double* out = all.data();
  for (const auto& m : per) out = std::copy(m.storage().begin(), m.storage().end(), out);
  return {feat, kmeans_fit(all, cfg.clusters, cfg.kmeans_iters, cfg.kmeans_tol, derive_seed(cfg.seed, 0x4b4d))};
}

BpeModel train_code_bpe(const std::vector<const Matrix<float>*>& speech, const TeacherFeaturizer& featurizer,
                        const Codebook& cb, const PseudoCodeConfig& cfg) {
  cfg.validate();
  if (speech.empty()) fail(ErrorKind::kEmpty, "train_code_bpe: no unlabeled speech");
  std::vector<TokenSeq> units;
  units.reserve(speech.size());
  for (const auto* f : speech) units.push_back(speech_to_units(featurizer, cb, *f));
  return bpe_train(units, cb.k(), cfg.code_vocab);
}

}  // namespace mmspeech
