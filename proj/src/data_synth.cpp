// src/data_synth.cpp

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

#include "mmspeech/data_synth.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>

namespace mmspeech {

static_assert(std::endian::native == std::endian::little,
              "feature records are written in host order, which must be little-endian");

namespace {

constexpr const char* kManifestMagic = "#mmspeech-manifest";
constexpr const char* kManifestVersion = "v1";
constexpr const char* kFeatsFile = "feats.bin";

// First-order chain: a uniform start token, then `branching` weighted
// successors per token.
struct MarkovChain {
  std::vector<std::vector<int>> next;
  std::vector<std::vector<double>> cdf;

  MarkovChain(int vocab, int branching, uint64_t seed) : next(vocab), cdf(vocab) {
    Rng rng(derive_seed(seed, 0x3a4c0f));
    branching = std::min(branching, vocab);
    for (int a = 0; a < vocab; ++a) {
      std::set<int> chosen;
      while (static_cast<int>(chosen.size()) < branching) chosen.insert(uniform_int(rng, 0, vocab - 1));
      double total = 0;
      std::vector<double> w;
      for (int b : chosen) {
        next[a].push_back(b);
        w.push_back(0.2 + uniform01(rng));
        total += w.back();
      }
      double acc = 0;
      for (double x : w) {
        acc += x / total;
        cdf[a].push_back(acc);
      }
      cdf[a].back() = 1.0;
    }
  }

  TokenSeq sample(Rng& rng, int len) const {
    TokenSeq out;
    out.push_back(uniform_int(rng, 0, static_cast<int>(next.size()) - 1));
    while (static_cast<int>(out.size()) < len) {
      double u = uniform01(rng);
      const auto& c = cdf[out.back()];
      size_t j = 0;
      while (j + 1 < c.size() && u >= c[j]) ++j;
      out.push_back(next[out.back()][j]);
    }
    return out;
  }
};

Matrix<float> render_frames(const TokenSeq& phonemes, const Matrix<float>& means,
                            const SyntheticCorpusConfig& cfg, Rng& rng,
                            std::vector<int>* frame_phonemes) {
  std::vector<int> counts;
  int total = 0;
  for (size_t k = 0; k < phonemes.size(); ++k) {
    counts.push_back(uniform_int(rng, cfg.frames_per_phoneme_min, cfg.frames_per_phoneme_max));
    total += counts.back();
  }
  Matrix<float> out(total, cfg.feature_dim);
  int row = 0;
  for (size_t k = 0; k < phonemes.size(); ++k) {
    for (int n = 0; n < counts[k]; ++n, ++row) {
      for (int f = 0; f < cfg.feature_dim; ++f) {
        out(row, f) = means(phonemes[k] - 1, f) + static_cast<float>(cfg.noise_std * normal01(rng));
      }
      if (frame_phonemes) frame_phonemes->push_back(phonemes[k]);
    }
  }
  return out;
}

std::string format_id(const char* prefix, int i) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%s-%06d", prefix, i);
  return buf;
}

}  // namespace

void SyntheticCorpusConfig::validate() const {
  if (n_text_utts < 1 || n_unlabeled_speech_utts < 1 || n_paired_utts < 1) {
    fail(ErrorKind::kConfig, "corpus: all utterance counts must be >= 1");
  }
  if (phoneme_vocab_size < 1 || phoneme_vocab_size > text_vocab_size) {
    fail(ErrorKind::kConfig, "corpus: need 1 <= phoneme_vocab_size <= text_vocab_size");
  }
  if (homophone_rate < 0.0 || homophone_rate > 1.0) fail(ErrorKind::kConfig, "corpus: homophone_rate outside [0,1]");
  if (feature_dim < 1) fail(ErrorKind::kConfig, "corpus: feature_dim must be >= 1");
  if (frames_per_phoneme_min < 1 || frames_per_phoneme_max < frames_per_phoneme_min) {
    fail(ErrorKind::kConfig, "corpus: bad frames_per_phoneme range");
  }
  if (!(noise_std >= 0.0)) fail(ErrorKind::kConfig, "corpus: noise_std must be >= 0");
  if (min_text_len < 1 || max_text_len < min_text_len) fail(ErrorKind::kConfig, "corpus: bad text length range");
  if (markov_branching < 1) fail(ErrorKind::kConfig, "corpus: markov_branching must be >= 1");
  if (paired_dev_fraction < 0 || paired_test_fraction < 0 ||
      paired_dev_fraction + paired_test_fraction >= 1.0 || text_dev_fraction < 0 ||
      text_dev_fraction >= 1.0) {
    fail(ErrorKind::kConfig, "corpus: bad split fractions");
  }
}

const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kDev: return "dev";
    case Split::kTest: return "test";
  }
  return "?";
}

const char* kind_name(UttKind k) {
  switch (k) {
    case UttKind::kSpeech: return "speech";
    case UttKind::kText: return "text";
    case UttKind::kPaired: return "paired";
  }
  return "?";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "dev") return Split::kDev;
  if (s == "test") return Split::kTest;
  fail(ErrorKind::kParse, "bad split '" + s + "'");
}

UttKind parse_kind(const std::string& s) {
  if (s == "speech") return UttKind::kSpeech;
  if (s == "text") return UttKind::kText;
  if (s == "paired") return UttKind::kPaired;
  fail(ErrorKind::kParse, "bad kind '" + s + "'");
}

std::vector<const Utterance*> SyntheticCorpus::select(UttKind kind, Split split) const {
  std::vector<const Utterance*> out;
  for (const auto& u : utterances) {
    if (u.kind == kind && u.split == split) out.push_back(&u);
  }
  return out;
}

SyntheticCorpus synth_corpus(const SyntheticCorpusConfig& cfg) {
  cfg.validate();
  SyntheticCorpus corpus;
  corpus.config = cfg;
  corpus.lexicon = Lexicon::synthetic(cfg.text_vocab_size, cfg.phoneme_vocab_size, cfg.homophone_rate, cfg.seed);
  corpus.phoneme_means = Matrix<float>(cfg.phoneme_vocab_size, cfg.feature_dim);
  {
    Rng rng(derive_seed(cfg.seed, 0x3ea45));
    for (auto& x : corpus.phoneme_means.storage()) x = static_cast<float>(normal01(rng));
  }
  MarkovChain chain(cfg.text_vocab_size, cfg.markov_branching, cfg.seed);

  auto make = [&](UttKind kind, int i, Split split) {
    Rng rng(derive_seed(cfg.seed, 0xc0de + static_cast<uint64_t>(kind), static_cast<uint64_t>(i)));
    Utterance u;
    u.kind = kind;
    u.split = split;
    u.id = format_id(kind_name(kind), i);
    TokenSeq text = chain.sample(rng, uniform_int(rng, cfg.min_text_len, cfg.max_text_len));
    if (kind != UttKind::kText) {
      u.features = render_frames(text_to_phonemes(corpus.lexicon, text), corpus.phoneme_means, cfg,
                                 rng, &u.frame_phonemes);
    }
    if (kind != UttKind::kSpeech) u.text = std::move(text);
    return u;
  };

  const int paired_train = static_cast<int>(
      std::lround(cfg.n_paired_utts * (1.0 - cfg.paired_dev_fraction - cfg.paired_test_fraction)));
  const int paired_dev = static_cast<int>(std::lround(cfg.n_paired_utts * cfg.paired_dev_fraction));
  for (int i = 0; i < cfg.n_paired_utts; ++i) {
    Split s = i < paired_train ? Split::kTrain : (i < paired_train + paired_dev ? Split::kDev : Split::kTest);
    corpus.utterances.push_back(make(UttKind::kPaired, i, s));
  }
  for (int i = 0; i < cfg.n_unlabeled_speech_utts; ++i) {
    corpus.utterances.push_back(make(UttKind::kSpeech, i, Split::kTrain));
  }
  const int text_train = cfg.n_text_utts - static_cast<int>(std::lround(cfg.n_text_utts * cfg.text_dev_fraction));
  for (int i = 0; i < cfg.n_text_utts; ++i) {
    corpus.utterances.push_back(make(UttKind::kText, i, i < text_train ? Split::kTrain : Split::kDev));
  }
  return corpus;
}

std::string encode_feature_record(const Matrix<float>& features) {
  std::string out(8 + features.size() * 4, '\0');
  int32_t hdr[2] = {features.rows(), features.cols()};
  std::memcpy(out.data(), hdr, 8);
  std::memcpy(out.data() + 8, features.data(), features.size() * 4);
  return out;
}

Matrix<float> decode_feature_record(const std::string& bytes, size_t offset, const std::string& what) {
  if (offset + 8 > bytes.size()) fail(ErrorKind::kParse, what + ": truncated feature header");
  int32_t hdr[2];
  std::memcpy(hdr, bytes.data() + offset, 8);
  if (hdr[0] < 1 || hdr[1] < 1) fail(ErrorKind::kParse, what + ": bad feature header");
  Matrix<float> m(hdr[0], hdr[1]);
  size_t n = m.size() * 4;
  if (offset + 8 + n > bytes.size()) fail(ErrorKind::kParse, what + ": truncated feature payload");
  std::memcpy(m.data(), bytes.data() + offset + 8, n);
  return m;
}

const ManifestEntry& Manifest::find(const std::string& id) const {
  for (const auto& e : entries) {
    if (e.id == id) return e;
  }
  fail(ErrorKind::kMissingId, "manifest has no utterance with id '" + id + "'");
}

std::string serialize_manifest(const Manifest& manifest) {
  std::ostringstream os;
  os << kManifestMagic << '\t' << kManifestVersion << '\n';
  os << "#id\tkind\tsplit\tfeatures\ttext\n";
  for (const auto& e : manifest.entries) {
    os << e.id << '\t' << kind_name(e.kind) << '\t' << split_name(e.split) << '\t'
       << (e.features_ref.empty() ? "-" : e.features_ref) << '\t'
       << (e.text ? join_tokens(*e.text) : "-") << '\n';
  }
  return os.str();
}

Manifest store_corpus(const SyntheticCorpus& corpus, const std::string& dir) {
  std::filesystem::create_directories(dir);
  Manifest manifest;
  manifest.base_dir = dir;
  std::string feats;
  for (const auto& u : corpus.utterances) {
    ManifestEntry e{u.id, u.kind, u.split, "", u.text};
    if (u.features) {
      e.features_ref = std::string(kFeatsFile) + "@" + std::to_string(feats.size());
      feats += encode_feature_record(*u.features);
    }
    manifest.entries.push_back(std::move(e));
  }
  write_file_atomic(dir + "/" + kFeatsFile, feats);
  write_file_atomic(dir + "/manifest.tsv", serialize_manifest(manifest));
  corpus.lexicon.save(dir + "/lexicon.tsv");
  return manifest;
}

Manifest parse_manifest(const std::string& text, const std::string& base_dir, const std::string& source_name) {
  Manifest m;
  m.base_dir = base_dir;
  std::istringstream is(text);
  std::string line;
  int line_no = 0;
  std::set<std::string> seen;
  bool header = false;
  auto where = [&](const std::string& id) {
    return source_name + ":" + std::to_string(line_no) + (id.empty() ? "" : " (record '" + id + "')");
  };
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (line.rfind(kManifestMagic, 0) == 0) {
        if (line.find(kManifestVersion) == std::string::npos) {
          fail(ErrorKind::kParse, where("") + ": unsupported manifest version");
        }
        header = true;
      }
      continue;
    }
    if (!header) fail(ErrorKind::kParse, where("") + ": missing '" + std::string(kManifestMagic) + "' header");
    std::vector<std::string> fields;
    std::stringstream ls(line);
    std::string f;
    while (std::getline(ls, f, '\t')) fields.push_back(f);
    std::string id = fields.empty() ? "" : fields[0];
    if (fields.size() != 5) {
      fail(ErrorKind::kParse, where(id) + ": expected 5 tab-separated fields, got " + std::to_string(fields.size()));
    }
    ManifestEntry e;
    e.id = id;
    try {
      e.kind = parse_kind(fields[1]);
    } catch (const Error& err) {
      fail(ErrorKind::kParse, where(id) + ": field 'kind': " + err.what());
    }
    try {
      e.split = parse_split(fields[2]);
    } catch (const Error& err) {
      fail(ErrorKind::kParse, where(id) + ": field 'split': " + err.what());
    }
    if (fields[3] != "-") e.features_ref = fields[3];
    if (fields[4] != "-") {
      try {
        e.text = parse_tokens(fields[4]);
      } catch (const Error& err) {
        fail(ErrorKind::kParse, where(id) + ": field 'text': " + err.what());
      }
    }
    bool need_feats = e.kind != UttKind::kText;
    bool need_text = e.kind != UttKind::kSpeech;
    if (need_feats != !e.features_ref.empty()) fail(ErrorKind::kParse, where(id) + ": field 'features' inconsistent with kind");
    if (need_text != e.text.has_value()) fail(ErrorKind::kParse, where(id) + ": field 'text' inconsistent with kind");
    if (e.kind == UttKind::kPaired && e.text->empty()) fail(ErrorKind::kParse, where(id) + ": paired entry with empty text");
    if (!seen.insert(id).second) fail(ErrorKind::kParse, where(id) + ": duplicate id");
    m.entries.push_back(std::move(e));
  }
  if (!header) fail(ErrorKind::kParse, source_name + ": empty or headerless manifest");
  return m;
}

Manifest load_manifest(const std::string& path) {
  std::filesystem::path p(path);
  return parse_manifest(read_file(path), p.parent_path().string(), path);
}

namespace {

std::pair<std::string, size_t> split_ref(const ManifestEntry& e) {
  auto at = e.features_ref.rfind('@');
  if (at == std::string::npos) fail(ErrorKind::kParse, "record '" + e.id + "': bad features ref");
  size_t off = 0;
  try {
    off = std::stoull(e.features_ref.substr(at + 1));
  } catch (const std::exception&) {
    fail(ErrorKind::kParse, "record '" + e.id + "': bad features offset");
  }
  return {e.features_ref.substr(0, at), off};
}

Utterance materialize(const ManifestEntry& e, const std::map<std::string, std::string>& files) {
  Utterance u;
  u.id = e.id;
  u.kind = e.kind;
  u.split = e.split;
  u.text = e.text;
  if (!e.features_ref.empty()) {
    auto [file, off] = split_ref(e);
    u.features = decode_feature_record(files.at(file), off, "record '" + e.id + "' (" + e.features_ref + ")");
  }
  return u;
}

std::map<std::string, std::string> read_payloads(const Manifest& m, const std::vector<const ManifestEntry*>& es) {
  std::map<std::string, std::string> files;
  for (const auto* e : es) {
    if (e->features_ref.empty()) continue;
    auto file = split_ref(*e).first;
    if (!files.count(file)) {
      std::string path = m.base_dir.empty() ? file : m.base_dir + "/" + file;
      files[file] = read_file(path);
    }
  }
  return files;
}

}  // namespace

Utterance load_utterance(const Manifest& manifest, const std::string& id) {
  const ManifestEntry& e = manifest.find(id);
  return materialize(e, read_payloads(manifest, {&e}));
}

std::vector<Utterance> load_utterances(const Manifest& manifest) {
  std::vector<const ManifestEntry*> es;
  for (const auto& e : manifest.entries) es.push_back(&e);
  auto files = read_payloads(manifest, es);
  std::vector<Utterance> out;
  out.reserve(es.size());
  for (const auto* e : es) out.push_back(materialize(*e, files));
  return out;
}

}  // namespace mmspeech
