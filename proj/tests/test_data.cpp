// tests/test_data.cpp

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

#include <fstream>
#include <set>

#include "doctest.h"
#include "mmspeech/data_synth.hpp"
#include "mmspeech/lexicon.hpp"
#include "oracles.hpp"

using namespace mmspeech;

namespace {

SyntheticCorpusConfig small_corpus() {
  SyntheticCorpusConfig c;
  c.n_text_utts = 60;
  c.n_unlabeled_speech_utts = 30;
  c.n_paired_utts = 40;
  return c;
}

}  // namespace

TEST_CASE("synthetic lexicon: total, many-to-one, specials disjoint") {
  Lexicon lex = Lexicon::synthetic(48, 24, 0.5, 1);
  CHECK(lex.text_vocab_size() == 48);
  std::set<int> used;
  for (int t = 0; t < 48; ++t) {
    CHECK(lex.is_phoneme(lex.phoneme(t)));
    used.insert(lex.phoneme(t));
  }
  CHECK(static_cast<int>(used.size()) == 24);
  std::set<int> specials{lex.pad_id(), lex.mask_id(), lex.bos_id(), lex.eos_id()};
  CHECK(specials.size() == 4);
  for (int s : specials) CHECK_FALSE(lex.is_phoneme(s));
  bool any_group = false;
  for (const auto& g : lex.homophone_groups()) any_group |= g.size() > 1;
  CHECK(any_group);
  CHECK(Lexicon::synthetic(48, 24, 0.5, 1) == lex);
  CHECK_THROWS_AS(Lexicon::synthetic(10, 24, 0.5, 1), Error);
}

TEST_CASE("text_to_phonemes") {
  Lexicon lex = Lexicon::synthetic(20, 8, 0.5, 4);
  CHECK(text_to_phonemes(lex, std::vector<int>{}).empty());
  for (const auto& g : lex.homophone_groups()) {
    if (g.size() < 2) continue;
    CHECK(text_to_phonemes(lex, std::vector<int>{g[0]}) == text_to_phonemes(lex, std::vector<int>{g[1]}));
  }
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<int> text(uniform_int(rng, 1, 12));
    for (int& t : text) t = uniform_int(rng, 0, 19);
    auto ph = text_to_phonemes(lex, text);
    REQUIRE(ph.size() == text.size());
    for (size_t k = 0; k < text.size(); ++k) CHECK(ph[k] == lex.table()[text[k]]);
  }
  try {
    text_to_phonemes(lex, std::vector<int>{1, 2, 99});
    FAIL("expected error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kUnknownToken);
    CHECK(std::string(e.what()).find("position 2") != std::string::npos);
  }
}

TEST_CASE("lexicon serialization round-trip") {
  Lexicon lex = Lexicon::synthetic(30, 12, 0.3, 2);
  CHECK(Lexicon::parse(lex.serialize()) == lex);
  CHECK_THROWS_AS(Lexicon::parse("garbage"), Error);
}

TEST_CASE("phoneme noise: zero ratio, full mask and budget") {
  Lexicon lex = Lexicon::synthetic(20, 8, 0.5, 4);
  std::vector<int> seq;
  for (int i = 0; i < 40; ++i) seq.push_back(1 + i % 8);

  NoiseConfig none;
  none.mask_ratio = 0;
  auto a = noise_phonemes(seq, lex, none);
  CHECK(a.noisy == seq);
  for (bool b : a.corrupted) CHECK_FALSE(b);

  NoiseConfig full;
  full.mask_ratio = 1.0;
  full.replace_fraction = 0.0;
  auto b = noise_phonemes(seq, lex, full);
  for (int v : b.noisy) CHECK(v == lex.mask_id());

  NoiseConfig cfg;
  cfg.seed = 5;
  auto c = noise_phonemes(seq, lex, cfg);
  CHECK(c.noisy.size() == seq.size());
  int corrupted = 0;
  for (size_t i = 0; i < seq.size(); ++i) {
    if (c.corrupted[i]) {
      ++corrupted;
      CHECK((c.noisy[i] == lex.mask_id() || lex.is_phoneme(c.noisy[i])));
    } else {
      CHECK(c.noisy[i] == seq[i]);
    }
  }
  CHECK(corrupted == 12);
  CHECK(noise_phonemes(seq, lex, cfg).noisy == c.noisy);
}

TEST_CASE("phoneme noise: mean corrupted fraction over 200 seeds") {
  Lexicon lex = Lexicon::synthetic(48, 24, 0.5, 1);
  std::vector<int> seq(1000);
  for (int i = 0; i < 1000; ++i) seq[i] = 1 + (i * 7) % 24;
  double total = 0;
  for (uint64_t s = 0; s < 200; ++s) {
    NoiseConfig cfg;
    cfg.seed = s;
    auto r = noise_phonemes(seq, lex, cfg);
    total += static_cast<double>(std::count(r.corrupted.begin(), r.corrupted.end(), true)) / 1000.0;
  }
  double mean = total / 200;
  CHECK(mean >= 0.29);
  CHECK(mean <= 0.31);
}

TEST_CASE("corpus: counts, determinism, splits") {
  auto cfg = small_corpus();
  cfg.n_paired_utts = 100;
  auto c1 = synth_corpus(cfg);
  auto c2 = synth_corpus(cfg);
  int paired = 0;
  std::set<std::string> ids;
  for (size_t i = 0; i < c1.utterances.size(); ++i) {
    const auto& u = c1.utterances[i];
    paired += u.kind == UttKind::kPaired;
    CHECK(ids.insert(u.id).second);
    CHECK((u.features || u.text));
    if (u.kind == UttKind::kPaired) CHECK((u.features && u.text && !u.text->empty()));
    if (u.kind == UttKind::kSpeech) CHECK_FALSE(u.text);
    if (u.kind == UttKind::kText) CHECK_FALSE(u.features);
    CHECK(u.id == c2.utterances[i].id);
    CHECK(u.text == c2.utterances[i].text);
    if (u.features) CHECK(*u.features == *c2.utterances[i].features);
  }
  CHECK(paired == 100);
  CHECK(c1.select(UttKind::kPaired, Split::kDev).size() == 10);
  CHECK(c1.select(UttKind::kPaired, Split::kTest).size() == 10);
  CHECK(c1.select(UttKind::kPaired, Split::kTrain).size() == 80);
}

TEST_CASE("corpus: zero noise gives the phoneme mean on every frame") {
  auto cfg = small_corpus();
  cfg.noise_std = 0;
  cfg.frames_per_phoneme_min = 1;
  cfg.frames_per_phoneme_max = 1;
  auto c = synth_corpus(cfg);
  int correct = 0, total = 0;
  for (const auto& u : c.utterances) {
    if (!u.features) continue;
    const auto& f = *u.features;
    REQUIRE(static_cast<int>(u.frame_phonemes.size()) == f.rows());
    for (int t = 0; t < f.rows(); ++t) {
      int p = u.frame_phonemes[t];
      for (int d = 0; d < f.cols(); ++d) CHECK(f(t, d) == c.phoneme_means(p - 1, d));
      // nearest centroid recovers the phoneme
      int best = -1;
      double bd = 1e300;
      for (int q = 0; q < c.phoneme_means.rows(); ++q) {
        double dd = 0;
        for (int d = 0; d < f.cols(); ++d) dd += std::pow(f(t, d) - c.phoneme_means(q, d), 2);
        if (dd < bd) bd = dd, best = q + 1;
      }
      correct += best == p;
      ++total;
    }
  }
  CHECK(correct == total);
}

TEST_CASE("manifest store/load round-trip and errors") {
  scratch::TempDir dir("manifest");
  auto c = synth_corpus(small_corpus());
  Manifest stored = store_corpus(c, dir.str());
  Manifest loaded = load_manifest(dir / "manifest.tsv");
  CHECK(loaded == stored);
  for (const auto& u : c.utterances) {
    Utterance back = load_utterance(loaded, u.id);
    CHECK(back.kind == u.kind);
    CHECK(back.split == u.split);
    CHECK(back.text == u.text);
    CHECK(back.features.has_value() == u.features.has_value());
    if (u.features) CHECK(*back.features == *u.features);
  }
  CHECK(Lexicon::load(dir / "lexicon.tsv") == c.lexicon);

  try {
    load_utterance(loaded, "paired-999999");
    FAIL("expected error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kMissingId);
  }

  std::string text = serialize_manifest(stored);
  std::string cut = text.substr(0, text.size() - 7);
  cut = cut.substr(0, cut.rfind('\t'));
  try {
    parse_manifest(cut, dir.str(), "m.tsv");
    FAIL("expected error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kParse);
    CHECK(std::string(e.what()).find("record '") != std::string::npos);
  }

  std::string feats = read_file(dir / "feats.bin");
  CHECK_THROWS_AS(decode_feature_record(feats.substr(0, 10), 0, "feats"), Error);
}

TEST_CASE("corpus config validation") {
  auto cfg = small_corpus();
  cfg.phoneme_vocab_size = 100;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = small_corpus();
  cfg.noise_std = -1;
  CHECK_THROWS_AS(cfg.validate(), Error);
}
