// src/decoder_eval.cpp

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

#include "mmspeech/decoder_eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <set>
#include <sstream>

namespace mmspeech {

void NgramConfig::validate() const {
  if (order < 1 || order > 6) fail(ErrorKind::kConfig, "ngram: order must lie in 1..6");
  if (!(alpha > 0.0)) fail(ErrorKind::kConfig, "ngram: alpha must be > 0");
}

uint64_t NgramLM::key(std::span<const int> history) const {
  const uint64_t base = static_cast<uint64_t>(symbols_) + 2;
  uint64_t k = 0;
  for (int t : history) k = k * base + static_cast<uint64_t>(t);
  return k;
}

NgramLM NgramLM::train(const std::vector<TokenSeq>& corpus, int symbols, const NgramConfig& cfg) {
  cfg.validate();
  if (symbols < 1) fail(ErrorKind::kConfig, "ngram: vocabulary must be non-empty");
  if (corpus.empty()) fail(ErrorKind::kEmpty, "ngram: empty training corpus");
  NgramLM lm;
  lm.symbols_ = symbols;
  lm.cfg_ = cfg;
  lm.counts_.assign(cfg.order, {});
  const int bos = symbols + 1, eos = symbols;
  for (const auto& seq : corpus) {
    std::vector<int> padded(cfg.order - 1, bos);
    for (int t : seq) {
      if (t < 0 || t >= symbols) fail(ErrorKind::kUnknownToken, "ngram: token " + std::to_string(t) + " outside vocabulary");
      padded.push_back(t);
    }
    padded.push_back(eos);
    for (size_t i = cfg.order - 1; i < padded.size(); ++i) {
      for (int n = 0; n < cfg.order; ++n) {
        std::span<const int> hist(padded.data() + i - n, n);
        Context& c = lm.counts_[n][lm.key(hist)];
        ++c.total;
        ++c.next[padded[i]];
      }
    }
  }
  return lm;
}

std::vector<double> NgramLM::next_log_probs(std::span<const int> prefix) const {
  const int outputs = symbols_ + 1;
  const double beta = cfg_.alpha * outputs;
  std::vector<int> hist(cfg_.order - 1, symbols_ + 1);
  for (int t : prefix) {
    if (t < 0 || t >= symbols_) fail(ErrorKind::kUnknownToken, "ngram: prefix token " + std::to_string(t) + " outside vocabulary");
    hist.push_back(t);
  }
  std::vector<double> p(outputs);
  const Context& uni = counts_[0].at(0);
  for (int w = 0; w < outputs; ++w) {
    auto it = uni.next.find(w);
    p[w] = ((it == uni.next.end() ? 0.0 : static_cast<double>(it->second)) + cfg_.alpha) /
           (static_cast<double>(uni.total) + beta);
  }
  for (int n = 1; n < cfg_.order; ++n) {
    std::span<const int> h(hist.data() + hist.size() - n, n);
    auto it = counts_[n].find(key(h));
    if (it == counts_[n].end()) continue;
    const Context& c = it->second;
    std::vector<double> q(outputs);
    for (int w = 0; w < outputs; ++w) q[w] = beta * p[w];
    for (const auto& [w, cnt] : c.next) q[w] += static_cast<double>(cnt);
    for (int w = 0; w < outputs; ++w) p[w] = q[w] / (static_cast<double>(c.total) + beta);
  }
  for (double& v : p) v = std::log(v);
  return p;
}

double NgramLM::sequence_log_prob(std::span<const int> seq) const {
  double s = 0;
  for (size_t i = 0; i <= seq.size(); ++i) {
    auto lp = next_log_probs(seq.first(i));
    s += lp[i < seq.size() ? seq[i] : symbols_];
  }
  return s;
}

double NgramLM::perplexity(const std::vector<TokenSeq>& corpus) const {
  if (corpus.empty()) fail(ErrorKind::kEmpty, "ngram: empty evaluation corpus");
  double lp = 0;
  int64_t n = 0;
  for (const auto& s : corpus) {
    lp += sequence_log_prob(s);
    n += static_cast<int64_t>(s.size()) + 1;
  }
  return std::exp(-lp / static_cast<double>(n));
}

std::string NgramLM::serialize() const {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "#mmspeech-ngram\tv1\n";
  os << "symbols\t" << symbols_ << "\n";
  os << "order\t" << cfg_.order << "\n";
  os << "alpha\t" << cfg_.alpha << "\n";
  const uint64_t base = static_cast<uint64_t>(symbols_) + 2;
  for (int n = 0; n < cfg_.order; ++n) {
    for (const auto& [k, c] : counts_[n]) {
      std::vector<int> hist(n);
      uint64_t r = k;
      for (int i = n - 1; i >= 0; --i) {
        hist[i] = static_cast<int>(r % base);
        r /= base;
      }
      for (const auto& [w, cnt] : c.next) {
        os << n << '\t' << (n ? join_tokens(hist) : "-") << '\t' << w << '\t' << cnt << '\n';
      }
    }
  }
  return os.str();
}

NgramLM NgramLM::parse(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  int line_no = 0;
  auto bad = [&](const std::string& why) -> void {
    fail(ErrorKind::kParse, "ngram:" + std::to_string(line_no) + ": " + why);
  };
  NgramLM lm;
  auto header = [&](const char* name) {
    if (!std::getline(is, line)) bad(std::string("missing ") + name);
    ++line_no;
    auto tab = line.find('\t');
    if (tab == std::string::npos || line.substr(0, tab) != name) bad(std::string("expected ") + name);
    return line.substr(tab + 1);
  };
  if (header("#mmspeech-ngram") != "v1") bad("unsupported version");
  try {
    lm.symbols_ = std::stoi(header("symbols"));
    lm.cfg_.order = std::stoi(header("order"));
    lm.cfg_.alpha = std::stod(header("alpha"));
  } catch (const std::logic_error&) {
    bad("malformed header value");
  }
  lm.cfg_.validate();
  lm.counts_.assign(lm.cfg_.order, {});
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::istringstream ls(line);
    std::string field;
    while (std::getline(ls, field, '\t')) f.push_back(field);
    if (f.size() != 4) bad("expected 4 fields");
    int n = 0, w = 0;
    int64_t cnt = 0;
    TokenSeq hist;
    try {
      n = std::stoi(f[0]);
      w = std::stoi(f[2]);
      cnt = std::stoll(f[3]);
      if (f[1] != "-") hist = parse_tokens(f[1]);
    } catch (const std::logic_error&) {
      bad("malformed count record");
    }
    if (n < 0 || n >= lm.cfg_.order || static_cast<int>(hist.size()) != n || cnt < 1) bad("inconsistent count record");
    Context& c = lm.counts_[n][lm.key(hist)];
    c.next[w] += cnt;
    c.total += cnt;
  }
  if (lm.counts_[0].empty()) bad("no unigram counts");
  return lm;
}

void NgramLM::save(const std::string& path) const { write_file_atomic(path, serialize()); }
NgramLM NgramLM::load(const std::string& path) { return parse(read_file(path)); }

std::vector<double> ModelScorer::next_log_probs(std::span<const int> prefix) const {
  std::vector<int> in;
  in.reserve(prefix.size() + 1);
  in.push_back(model_.vocab(space_).bos());
  in.insert(in.end(), prefix.begin(), prefix.end());
  auto lp = model_.decode_step(memory_, in, space_);
  return {lp.begin(), lp.end()};
}

void BeamConfig::validate() const {
  if (beam_size < 1) fail(ErrorKind::kConfig, "beam: beam_size must be >= 1");
  if (!(lm_weight >= 0.0)) fail(ErrorKind::kConfig, "beam: lm_weight must be >= 0");
  if (max_len < 1) fail(ErrorKind::kConfig, "beam: max_len must be >= 1");
}

double length_penalty(int length, double beta) {
  if (beta == 0.0) return 1.0;
  return std::pow((5.0 + length) / 6.0, beta);
}

namespace {

struct Partial {
  TokenSeq tokens;
  double fused = 0;
  double model = 0;
  double lm = 0;
};

bool better(double sa, const TokenSeq& a, double sb, const TokenSeq& b) {
  if (sa != sb) return sa > sb;
  return a < b;
}

}  // namespace

Hypothesis beam_decode(const SequenceScorer& model, const SequenceScorer* lm, const BeamConfig& cfg) {
  cfg.validate();
  const bool fuse = lm != nullptr && cfg.lm_weight > 0.0;
  if (fuse && lm->symbols() != model.symbols()) {
    fail(ErrorKind::kDimension, "beam: LM vocabulary " + std::to_string(lm->symbols()) + " != model vocabulary " +
                                    std::to_string(model.symbols()));
  }
  const int eos = model.eos();
  std::vector<Partial> alive{Partial{}};
  std::vector<Hypothesis> finished;
  for (int step = 0; step < cfg.max_len && !alive.empty(); ++step) {
    std::vector<Partial> cands;
    for (const Partial& b : alive) {
      auto pm = model.next_log_probs(b.tokens);
      std::vector<double> pl;
      if (fuse) pl = lm->next_log_probs(b.tokens);
      for (int w = 0; w <= eos; ++w) {
        Partial c;
        c.tokens = b.tokens;
        c.tokens.push_back(w);
        c.model = b.model + pm[w];
        c.lm = b.lm + (fuse ? pl[w] : 0.0);
        c.fused = b.fused + pm[w] + (fuse ? cfg.lm_weight * pl[w] : 0.0);
        cands.push_back(std::move(c));
      }
    }
    const size_t keep = std::min(cands.size(), static_cast<size_t>(cfg.beam_size));
    std::partial_sort(cands.begin(), cands.begin() + keep, cands.end(),
                      [](const Partial& a, const Partial& b) { return better(a.fused, a.tokens, b.fused, b.tokens); });
    alive.clear();
    for (size_t i = 0; i < keep; ++i) {
      Partial& c = cands[i];
      if (c.tokens.back() == eos) {
        const int len = static_cast<int>(c.tokens.size());
        c.tokens.pop_back();
        finished.push_back({std::move(c.tokens), c.fused / length_penalty(len, cfg.length_penalty), c.model, c.lm, true});
      } else {
        alive.push_back(std::move(c));
      }
    }
    // Scores only decrease without a length penalty, so nothing alive can win.
    if (cfg.length_penalty == 0.0 && !finished.empty() && !alive.empty()) {
      double best_done = -INFINITY, best_alive = -INFINITY;
      for (const auto& h : finished) best_done = std::max(best_done, h.score);
      for (const auto& a : alive) best_alive = std::max(best_alive, a.fused);
      if (best_alive < best_done) break;
    }
  }
  if (finished.empty()) {
    for (Partial& a : alive) {
      const int len = static_cast<int>(a.tokens.size());
      finished.push_back({std::move(a.tokens), a.fused / length_penalty(len, cfg.length_penalty), a.model, a.lm, false});
    }
  }
  const Hypothesis* best = &finished[0];
  for (const auto& h : finished) {
    if (better(h.score, h.tokens, best->score, best->tokens)) best = &h;
  }
  return *best;
}

Hypothesis greedy_decode(const SequenceScorer& model, int max_len) {
  Hypothesis h;
  h.terminated = false;
  for (int step = 0; step < max_len; ++step) {
    auto lp = model.next_log_probs(h.tokens);
    int best = static_cast<int>(std::max_element(lp.begin(), lp.end()) - lp.begin());
    h.model_log_prob += lp[best];
    if (best == model.eos()) {
      h.terminated = true;
      break;
    }
    h.tokens.push_back(best);
  }
  h.score = h.model_log_prob;
  return h;
}

EditStats edit_stats(std::span<const int> hyp, std::span<const int> ref) {
  const size_t n = ref.size(), m = hyp.size();
  std::vector<int> d((n + 1) * (m + 1));
  auto D = [&](size_t i, size_t j) -> int& { return d[i * (m + 1) + j]; };
  for (size_t i = 0; i <= n; ++i) D(i, 0) = static_cast<int>(i);
  for (size_t j = 0; j <= m; ++j) D(0, j) = static_cast<int>(j);
  for (size_t i = 1; i <= n; ++i) {
    for (size_t j = 1; j <= m; ++j) {
      D(i, j) = std::min({D(i - 1, j - 1) + (ref[i - 1] != hyp[j - 1] ? 1 : 0), D(i - 1, j) + 1, D(i, j - 1) + 1});
    }
  }
  EditStats s;
  s.reference_tokens = static_cast<int64_t>(n);
  size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && D(i, j) == D(i - 1, j - 1) + (ref[i - 1] != hyp[j - 1] ? 1 : 0)) {
      s.substitutions += ref[i - 1] != hyp[j - 1];
      --i, --j;
    } else if (i > 0 && D(i, j) == D(i - 1, j) + 1) {
      ++s.deletions;
      --i;
    } else {
      ++s.insertions;
      --j;
    }
  }
  return s;
}

double token_error_rate(const std::vector<TokenSeq>& hyps, const std::vector<TokenSeq>& refs) {
  if (refs.empty()) fail(ErrorKind::kEmpty, "ter: empty reference set");
  if (hyps.size() != refs.size()) {
    fail(ErrorKind::kDimension, "ter: " + std::to_string(hyps.size()) + " hypotheses for " + std::to_string(refs.size()) +
                                    " references");
  }
  int64_t errors = 0, total = 0;
  for (size_t k = 0; k < refs.size(); ++k) {
    EditStats s = edit_stats(hyps[k], refs[k]);
    errors += s.errors();
    total += s.reference_tokens;
  }
  if (total == 0) fail(ErrorKind::kEmpty, "ter: references contain no tokens");
  return static_cast<double>(errors) / static_cast<double>(total);
}

std::string serialize_hypotheses(const std::vector<HypothesisRecord>& recs) {
  std::ostringstream os;
  os << std::setprecision(9);
  for (const auto& r : recs) os << r.id << '\t' << r.score << '\t' << join_tokens(r.tokens) << '\n';
  return os.str();
}

std::vector<HypothesisRecord> parse_hypotheses(const std::string& text, const std::string& source) {
  std::vector<HypothesisRecord> out;
  std::set<std::string> seen;
  std::istringstream is(text);
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> f;
    size_t pos = 0;
    while (true) {
      size_t tab = line.find('\t', pos);
      f.push_back(line.substr(pos, tab == std::string::npos ? std::string::npos : tab - pos));
      if (tab == std::string::npos) break;
      pos = tab + 1;
    }
    const std::string where = source + ":" + std::to_string(line_no);
    if (f.size() != 2 && f.size() != 3) fail(ErrorKind::kParse, where + ": expected id<TAB>[score<TAB>]tokens");
    HypothesisRecord r;
    r.id = f[0];
    if (r.id.empty()) fail(ErrorKind::kParse, where + ": empty id");
    if (!seen.insert(r.id).second) fail(ErrorKind::kParse, where + ": duplicate id '" + r.id + "'");
    try {
      if (f.size() == 3) r.score = std::stod(f[1]);
    } catch (const std::logic_error&) {
      fail(ErrorKind::kParse, where + ": bad score for '" + r.id + "'");
    }
    try {
      r.tokens = parse_tokens(f.back());
    } catch (const Error& e) {
      fail(ErrorKind::kParse, where + ": " + e.what());
    }
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<Hypothesis> decode_batch(const Model<float>& model, const std::vector<const Matrix<float>*>& feats,
                                     const SequenceScorer* lm, const BeamConfig& cfg, int threads) {
  std::vector<Hypothesis> out(feats.size());
  parallel_for(static_cast<int>(feats.size()), threads, [&](int i) {
    ModelScorer scorer(model, model.encode_speech_value(*feats[i]), OutputSpace::kText);
    out[i] = beam_decode(scorer, lm, cfg);
  });
  return out;
}

}  // namespace mmspeech
