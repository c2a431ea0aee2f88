// cli.cpp

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

#include "mmspeech/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

extern char** environ;

namespace mmspeech {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Config schema. One visitor walks every field so the writer and the strict
// reader cannot drift apart.

namespace {

const char* policy_name(SpanStartPolicy p) { return p == SpanStartPolicy::kBernoulli ? "bernoulli" : "exact_count"; }

json::json_pointer pointer(const std::string& dotted) {
  std::string p;
  std::istringstream is(dotted);
  std::string part;
  while (std::getline(is, part, '.')) p += "/" + part;
  return json::json_pointer(p);
}

class Writer {
 public:
  template <typename T>
  void field(const std::string& path, T& v) {
    root_[ojson::json_pointer(pointer(path).to_string())] = v;
  }
  template <typename T>
  void tasks(const std::string& path, std::array<T, kNumTasks>& a) {
    ojson o = ojson::object();
    // schedule order, the order people think in
    for (Task t : {Task::kMsp, Task::kS2c, Task::kP2t, Task::kPp, Task::kS2t}) o[task_name(t)] = a[static_cast<int>(t)];
    root_[ojson::json_pointer(pointer(path).to_string())] = o;
  }
  void policy(const std::string& path, SpanStartPolicy& p) {
    root_[ojson::json_pointer(pointer(path).to_string())] = policy_name(p);
  }
  const ojson& root() const { return root_; }

 private:
  ojson root_ = ojson::object();
};

class Reader {
 public:
  Reader(json root, std::string source) : root_(std::move(root)), source_(std::move(source)) {}

  template <typename T>
  void field(const std::string& path, T& v) {
    const json* j = find(path);
    if (!j) return;
    v = convert<T>(*j, path);
  }
  template <typename T>
  void tasks(const std::string& path, std::array<T, kNumTasks>& a) {
    const json* j = find(path);
    if (!j) return;
    if (!j->is_object()) bad(path, "an object keyed by task name");
    for (auto it = j->begin(); it != j->end(); ++it) {
      Task t;
      try {
        t = parse_task(it.key());
      } catch (const Error&) {
        fail(ErrorKind::kConfig, source_ + ": unknown key " + path + "." + it.key());
      }
      a[static_cast<int>(t)] = convert<T>(it.value(), path + "." + it.key());
    }
  }
  void policy(const std::string& path, SpanStartPolicy& p) {
    std::string s = policy_name(p);
    field(path, s);
    if (s == "bernoulli") p = SpanStartPolicy::kBernoulli;
    else if (s == "exact_count") p = SpanStartPolicy::kExactCount;
    else fail(ErrorKind::kConfig, source_ + ": " + path + " must be \"bernoulli\" or \"exact_count\"");
  }

  // Any leaf the schema did not consume is a typo or a stale key.
  void reject_unknown() const { walk(root_, ""); }

 private:
  const json* find(const std::string& path) {
    used_.insert(path);
    const auto ptr = pointer(path);
    if (!root_.contains(ptr)) return nullptr;
    return &root_.at(ptr);
  }

  [[noreturn]] void bad(const std::string& path, const std::string& want) const {
    fail(ErrorKind::kConfig, source_ + ": " + path + " must be " + want);
  }

  template <typename T>
  T convert(const json& j, const std::string& path) const {
    if constexpr (std::is_same_v<T, bool>) {
      if (!j.is_boolean()) bad(path, "a boolean");
      return j.get<bool>();
    } else if constexpr (std::is_same_v<T, uint64_t>) {
      if (!j.is_number_unsigned()) bad(path, "a non-negative integer");
      return j.get<uint64_t>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!j.is_number_integer()) bad(path, "an integer");
      const int64_t v = j.get<int64_t>();
      if (v < std::numeric_limits<T>::min() || v > std::numeric_limits<T>::max()) bad(path, "in range");
      return static_cast<T>(v);
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!j.is_number()) bad(path, "a number");
      return j.get<T>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!j.is_string()) bad(path, "a string");
      return j.get<std::string>();
    } else {
      if (!j.is_array()) bad(path, "an array of strings");
      T out;
      for (const auto& e : j) {
        if (!e.is_string()) bad(path, "an array of strings");
        out.push_back(e.get<std::string>());
      }
      return out;
    }
  }

  void walk(const json& j, const std::string& path) const {
    if (!path.empty() && used_.count(path)) return;
    if (!j.is_object()) fail(ErrorKind::kConfig, source_ + ": unknown key " + path);
    for (auto it = j.begin(); it != j.end(); ++it) walk(it.value(), path.empty() ? it.key() : path + "." + it.key());
  }

  json root_;
  std::string source_;
  std::set<std::string> used_;
};

template <typename V>
void visit(V& v, ExperimentConfig& c) {
  v.field("seed", c.seed);

  auto& d = c.data;
  v.field("data.n_text_utts", d.n_text_utts);
  v.field("data.n_unlabeled_speech_utts", d.n_unlabeled_speech_utts);
  v.field("data.n_paired_utts", d.n_paired_utts);
  v.field("data.text_vocab_size", d.text_vocab_size);
  v.field("data.phoneme_vocab_size", d.phoneme_vocab_size);
  v.field("data.homophone_rate", d.homophone_rate);
  v.field("data.feature_dim", d.feature_dim);
  v.field("data.frames_per_phoneme_min", d.frames_per_phoneme_min);
  v.field("data.frames_per_phoneme_max", d.frames_per_phoneme_max);
  v.field("data.noise_std", d.noise_std);
  v.field("data.min_text_len", d.min_text_len);
  v.field("data.max_text_len", d.max_text_len);
  v.field("data.markov_branching", d.markov_branching);
  v.field("data.paired_dev_fraction", d.paired_dev_fraction);
  v.field("data.paired_test_fraction", d.paired_test_fraction);
  v.field("data.text_dev_fraction", d.text_dev_fraction);

  auto& p = c.codes;
  v.field("codes.teacher_dim", p.teacher_dim);
  v.field("codes.teacher_window", p.teacher_window);
  v.field("codes.clusters", p.clusters);
  v.field("codes.kmeans_iters", p.kmeans_iters);
  v.field("codes.kmeans_tol", p.kmeans_tol);
  v.field("codes.code_vocab", p.code_vocab);

  auto& m = c.model;
  v.field("model.model_dim", m.model_dim);
  v.field("model.ffn_dim", m.ffn_dim);
  v.field("model.heads", m.heads);
  v.field("model.layers_speech_enc", m.layers_speech_enc);
  v.field("model.layers_shared_enc", m.layers_shared_enc);
  v.field("model.layers_dec", m.layers_dec);
  v.field("model.conv_kernel", m.conv_kernel);
  v.field("model.conv_stride", m.conv_stride);
  v.field("model.dropout", m.dropout);

  auto& t = c.train;
  v.field("train.stage1_steps", t.stage1_steps);
  v.field("train.stage2_steps", t.stage2_steps);
  v.field("train.finetune_steps", t.finetune_steps);
  v.tasks("train.ratios", t.ratios);
  v.tasks("train.enabled", t.enabled);
  v.tasks("train.batch_size", t.batch_size);
  v.tasks("train.lambda", t.weights.lambda);
  v.field("train.lr", t.lr);
  v.field("train.warmup_steps", t.warmup_steps);
  v.field("train.clip_norm", t.clip_norm);
  v.field("train.adam.beta1", t.adam.beta1);
  v.field("train.adam.beta2", t.adam.beta2);
  v.field("train.adam.eps", t.adam.eps);
  v.field("train.checkpoint_interval", t.checkpoint_interval);
  v.field("train.eval_interval", t.eval_interval);
  v.field("train.patience", t.patience);
  v.field("train.dev_eval_utts", t.dev_eval_utts);
  v.field("train.collapse_floor", t.collapse_floor);
  v.field("train.noise.mask_ratio", t.noise.mask_ratio);
  v.field("train.noise.max_span", t.noise.max_span);
  v.field("train.noise.replace_fraction", t.noise.replace_fraction);
  v.field("train.span.start_prob", t.span.start_prob);
  v.field("train.span.span_len", t.span.span_len);
  v.policy("train.span.policy", t.span.policy);
  v.field("train.span.force_nonempty", t.span.force_nonempty);

  v.field("lm.order", c.lm.order);
  v.field("lm.alpha", c.lm.alpha);

  v.field("decode.beam_size", c.decode.beam_size);
  v.field("decode.lm_weight", c.decode.lm_weight);
  v.field("decode.length_penalty", c.decode.length_penalty);
  v.field("decode.max_len", c.decode.max_len);

  v.field("ablate.variants", c.ablate_variants);
}

}  // namespace

void ExperimentConfig::resolve() {
  data.seed = seed;
  codes.seed = seed;
  model.seed = seed;
  train.seed = seed;
  model.feature_dim = data.feature_dim;
  model.phoneme_vocab = data.phoneme_vocab_size;
  model.text_vocab = data.text_vocab_size;
  model.code_vocab = codes.code_vocab;
  data.validate();
  codes.validate();
  model.validate();
  train.validate();
  lm.validate();
  decode.validate();
  std::set<std::string> known;
  for (const auto& v : standard_ablation_variants()) known.insert(v.name);
  for (const auto& name : ablate_variants) {
    if (!known.count(name)) fail(ErrorKind::kConfig, "config: unknown ablation variant " + name);
  }
}

std::string ExperimentConfig::to_json() const {
  Writer w;
  ExperimentConfig copy = *this;
  visit(w, copy);
  return w.root().dump(2) + "\n";
}

ExperimentConfig ExperimentConfig::from_json(const std::string& text, const std::string& source) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    fail(ErrorKind::kConfig, source + ": not valid JSON: " + e.what());
  }
  if (!j.is_object()) fail(ErrorKind::kConfig, source + ": top level must be an object");
  ExperimentConfig c;
  Reader r(std::move(j), source);
  visit(r, c);
  r.reject_unknown();
  return c;
}

std::string apply_env_overrides(const std::string& config_json, const std::map<std::string, std::string>& env) {
  static const std::string prefix = "MMSPEECH__";
  json j = json::parse(config_json);
  for (const auto& [name, value] : env) {
    if (name.rfind(prefix, 0) != 0) continue;
    std::string rest = name.substr(prefix.size());
    std::string path;
    size_t pos = 0;
    while (true) {
      size_t sep = rest.find("__", pos);
      path += "/" + rest.substr(pos, sep == std::string::npos ? std::string::npos : sep - pos);
      if (sep == std::string::npos) break;
      pos = sep + 2;
    }
    json v;
    try {
      v = json::parse(value);
    } catch (const json::parse_error&) {
      v = value;
    }
    try {
      j[json::json_pointer(path)] = v;
    } catch (const json::exception&) {
      fail(ErrorKind::kConfig, "environment: cannot apply " + name);
    }
  }
  return j.dump();
}

std::map<std::string, std::string> config_env() {
  std::map<std::string, std::string> out;
  for (char** e = environ; e && *e; ++e) {
    std::string kv = *e;
    size_t eq = kv.find('=');
    if (eq == std::string::npos || kv.rfind("MMSPEECH__", 0) != 0) continue;
    out[kv.substr(0, eq)] = kv.substr(eq + 1);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Logging and the experiment directory

namespace {

enum class Level { kError = 0, kInfo = 1, kDebug = 2 };

class Logger {
 public:
  Logger(std::ostream& err, Level level, std::string command) : err_(err), level_(level), command_(std::move(command)) {}

  void attach(const fs::path& file) { file_.open(file, std::ios::app); }

  void emit(Level level, ojson rec) {
    ojson line = {{"level", level == Level::kError ? "error" : level == Level::kInfo ? "info" : "debug"},
                  {"command", command_}};
    line.update(rec);
    const std::string s = line.dump();
    if (file_) file_ << s << '\n' << std::flush;
    if (level <= level_) err_ << s << '\n';
  }
  void info(ojson rec) { emit(Level::kInfo, std::move(rec)); }
  std::ostream* file() { return file_.is_open() ? &file_ : nullptr; }

 private:
  std::ostream& err_;
  Level level_;
  std::string command_;
  std::ofstream file_;
};

// Trainer events go to the command log; echoed to stderr with --verbose.
class TeeBuf : public std::streambuf {
 public:
  TeeBuf(std::ostream* a, std::ostream* b) : a_(a), b_(b) {}

 protected:
  int overflow(int c) override {
    if (c == EOF) return 0;
    if (a_) a_->put(static_cast<char>(c));
    if (b_) b_->put(static_cast<char>(c));
    return c;
  }
  std::streamsize xsputn(const char* s, std::streamsize n) override {
    if (a_) a_->write(s, n);
    if (b_) b_->write(s, n);
    return n;
  }

 private:
  std::ostream* a_;
  std::ostream* b_;
};

struct ArtifactInfo {
  const char* path;
  const char* producer;
};

// Relative path of each artifact and the subcommand that writes it.
constexpr ArtifactInfo kManifest{"data/manifest.tsv", "synth-data"};
constexpr ArtifactInfo kFeats{"data/feats.bin", "synth-data"};
constexpr ArtifactInfo kLexicon{"data/lexicon.tsv", "synth-data"};
constexpr ArtifactInfo kCodebook{"artifacts/codebook.txt", "train-codebook"};
constexpr ArtifactInfo kBpe{"artifacts/bpe.txt", "train-bpe"};
constexpr ArtifactInfo kUnits{"units/pseudo_codes.tsv", "encode-units"};
constexpr ArtifactInfo kLm{"artifacts/lm.txt", "train-lm"};
constexpr ArtifactInfo kPretrained{"artifacts/pretrained.ckpt", "pretrain"};
constexpr ArtifactInfo kFinetuned{"artifacts/finetuned.ckpt", "finetune"};
constexpr ArtifactInfo kAblation{"ablation.tsv", "ablate"};

class ExperimentDir {
 public:
  ExperimentDir(fs::path root, std::string command, Logger& log)
      : root_(std::move(root)), command_(std::move(command)), log_(log) {}

  const fs::path& root() const { return root_; }
  fs::path path(const std::string& rel) const { return root_ / rel; }

  // Writes the config snapshot on first use; afterwards the resolved config
  // must match it exactly, so every artifact in the directory comes from one
  // configuration.
  void bind_config(const ExperimentConfig& cfg) {
    fs::create_directories(root_);
    const fs::path snap = root_ / "config.json";
    const std::string text = cfg.to_json();
    if (fs::exists(snap)) {
      if (read_file(snap.string()) != text) {
        fail(ErrorKind::kConfig, "config differs from the snapshot in " + snap.string() +
                                     "; start a fresh experiment directory to change settings");
      }
    } else {
      write_file_atomic(snap.string(), text);
      log_.info({{"event", "config_snapshot"}, {"path", snap.string()}, {"hash", hex64(fnv1a64_file(snap.string()))}});
    }
    config_hash_ = hex64(fnv1a64_file(snap.string()));
    load_registry();
  }

  // Path of an input artifact after checking that it exists and is the
  // version recorded when it was produced.
  std::string require(const ArtifactInfo& a) {
    const fs::path p = root_ / a.path;
    if (!fs::exists(p)) {
      fail(ErrorKind::kDependency, command_ + ": missing " + std::string(a.path) + "; run `" + a.producer + "` first");
    }
    const std::string h = hex64(fnv1a64_file(p.string()));
    auto it = registry_.find(a.path);
    if (it != registry_.end() && it->second != h) {
      fail(ErrorKind::kDependency, command_ + ": " + std::string(a.path) + " changed after `" + a.producer +
                                       "` wrote it (hash " + h + ", recorded " + it->second + ")");
    }
    inputs_[a.path] = h;
    return p.string();
  }
  bool has(const ArtifactInfo& a) const { return fs::exists(root_ / a.path); }

  // Refuses to replace an existing artifact.
  void claim(const std::string& rel) const {
    if (fs::exists(root_ / rel)) {
      fail(ErrorKind::kIo, command_ + ": " + rel + " already exists; artifacts are never rewritten, "
                                          "use a fresh experiment directory");
    }
    fs::create_directories((root_ / rel).parent_path());
  }

  void write(const std::string& rel, const std::string& bytes) {
    claim(rel);
    write_file_atomic((root_ / rel).string(), bytes);
    record(rel);
  }

  // Appends a provenance record for a file that now exists.
  void record(const std::string& rel) {
    const std::string h = hex64(fnv1a64_file((root_ / rel).string()));
    ojson rec = {{"artifact", rel}, {"hash", h}, {"command", command_}, {"config", config_hash_}, {"inputs", inputs_}};
    std::ofstream os(root_ / "provenance.jsonl", std::ios::app);
    os << rec.dump() << '\n';
    if (!os) fail(ErrorKind::kIo, "cannot append to " + (root_ / "provenance.jsonl").string());
    registry_[rel] = h;
    log_.info({{"event", "artifact"}, {"path", rel}, {"hash", h}});
  }

  fs::path logs_file() const {
    fs::create_directories(root_ / "logs");
    return root_ / "logs" / (command_ + ".jsonl");
  }
  fs::path metrics_file() const {
    fs::create_directories(root_ / "metrics");
    return root_ / "metrics" / (command_ + ".jsonl");
  }

 private:
  void load_registry() {
    const fs::path p = root_ / "provenance.jsonl";
    if (!fs::exists(p)) return;
    std::istringstream is(read_file(p.string()));
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      try {
        auto j = json::parse(line);
        registry_[j.at("artifact").get<std::string>()] = j.at("hash").get<std::string>();
      } catch (const json::exception& e) {
        fail(ErrorKind::kParse, p.string() + ": bad provenance record: " + e.what());
      }
    }
  }

  fs::path root_;
  std::string command_;
  Logger& log_;
  std::string config_hash_;
  std::map<std::string, std::string> registry_;
  ojson inputs_ = ojson::object();
};

// ---------------------------------------------------------------------------
// Pipeline pieces shared by several subcommands

struct Corpus {
  Lexicon lexicon;
  std::vector<Utterance> utterances;
};

Corpus load_corpus(ExperimentDir& dir) {
  const std::string manifest = dir.require(kManifest);
  dir.require(kFeats);
  Corpus c;
  c.lexicon = Lexicon::load(dir.require(kLexicon));
  c.utterances = load_utterances(load_manifest(manifest));
  return c;
}

std::vector<const Matrix<float>*> unlabeled_train_speech(const std::vector<Utterance>& utts) {
  std::vector<const Matrix<float>*> out;
  for (const auto& u : utts) {
    if (u.kind == UttKind::kSpeech && u.split == Split::kTrain && u.features) out.push_back(&*u.features);
  }
  return out;
}

std::pair<TeacherFeaturizer, Codebook> load_codebook(ExperimentDir& dir) {
  return parse_codebook(read_file(dir.require(kCodebook)));
}

bool needs_codes(const TrainConfig& t) {
  const int k = static_cast<int>(Task::kS2c);
  return t.enabled[k] && t.ratios[k] > 0;
}

TrainingData load_training_data(ExperimentDir& dir, bool with_codes) {
  Corpus c = load_corpus(dir);
  if (!with_codes) return TrainingData::build(std::move(c.utterances), c.lexicon, nullptr);
  auto [feat, cb] = load_codebook(dir);
  BpeModel bpe = BpeModel::parse(read_file(dir.require(kBpe)));
  PseudoCodeArtifacts art{feat, cb, bpe};
  return TrainingData::build(std::move(c.utterances), c.lexicon, &art);
}

std::optional<NgramLM> load_lm_if_fused(ExperimentDir& dir, const BeamConfig& beam) {
  if (beam.lm_weight == 0.0) return std::nullopt;
  return NgramLM::load(dir.require(kLm));
}

// Latest checkpoint in a directory, ordered by (stage, step).
std::optional<fs::path> latest_checkpoint(const fs::path& dir) {
  if (!fs::exists(dir)) return std::nullopt;
  std::optional<fs::path> best;
  std::pair<int, int64_t> best_key{-1, -1};
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    for (Stage s : {Stage::kStage1, Stage::kStage2, Stage::kFinetune}) {
      const std::string pre = std::string("ckpt-") + stage_name(s) + "-";
      if (name.rfind(pre, 0) != 0 || e.path().extension() != ".bin") continue;
      const std::string num = name.substr(pre.size(), name.size() - pre.size() - 4);
      if (num.empty() || !std::all_of(num.begin(), num.end(), ::isdigit)) continue;
      std::pair<int, int64_t> key{static_cast<int>(s), std::stoll(num)};
      if (key > best_key) {
        best_key = key;
        best = e.path();
      }
    }
  }
  return best;
}

void check_fresh_checkpoints(const fs::path& dir, bool resume) {
  if (!resume && latest_checkpoint(dir)) {
    fail(ErrorKind::kConfig, dir.string() + " already holds checkpoints; pass --resume to continue from the latest one");
  }
  fs::create_directories(dir);
}

ModelCheckpoint final_checkpoint(const Model<float>& model, const TrainerState& state) {
  ModelCheckpoint ck;
  ck.config = model.config();
  ck.params = model.params();
  ck.trainer_state = state.to_json();
  return ck;
}

void require_model_config(const ModelCheckpoint& ck, const ModelConfig& want, const std::string& what) {
  if (!(ck.config == want)) {
    fail(ErrorKind::kConfig, what + " was trained with a different model config than the experiment snapshot");
  }
}

void save_model(ExperimentDir& dir, const ArtifactInfo& a, const ModelCheckpoint& ck) {
  dir.claim(a.path);
  save_checkpoint(ck, dir.path(a.path).string());
  dir.record(a.path);
}

const std::vector<PairedExample>& eval_set(const TrainingData& data, const std::string& set) {
  return set == "test" ? data.paired_test : data.paired_dev;
}

// References carry no score column.
std::string references_text(const std::vector<PairedExample>& set) {
  std::string out;
  for (const auto& ex : set) out += ex.id + "\t" + join_tokens(ex.text) + "\n";
  return out;
}

struct TerCounts {
  EditStats stats;
  int utterances = 0;
  double ter() const {
    return stats.reference_tokens == 0 ? 0.0
                                       : static_cast<double>(stats.errors()) / static_cast<double>(stats.reference_tokens);
  }
};

TerCounts score_files(const std::string& hyp_path, const std::string& ref_path) {
  auto hyps = parse_hypotheses(read_file(hyp_path), hyp_path);
  auto refs = parse_hypotheses(read_file(ref_path), ref_path);
  std::map<std::string, const TokenSeq*> by_id;
  for (const auto& h : hyps) by_id[h.id] = &h.tokens;
  TerCounts c;
  for (const auto& r : refs) {
    auto it = by_id.find(r.id);
    if (it == by_id.end()) fail(ErrorKind::kMissingId, hyp_path + ": no hypothesis for " + r.id);
    EditStats s = edit_stats(*it->second, r.tokens);
    c.stats.substitutions += s.substitutions;
    c.stats.insertions += s.insertions;
    c.stats.deletions += s.deletions;
    c.stats.reference_tokens += s.reference_tokens;
    ++c.utterances;
    by_id.erase(it);
  }
  if (!by_id.empty()) fail(ErrorKind::kMissingId, hyp_path + ": hypothesis " + by_id.begin()->first + " has no reference");
  if (c.stats.reference_tokens == 0) fail(ErrorKind::kEmpty, ref_path + ": no reference tokens");
  return c;
}

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::kConfig: return kExitConfig;
    case ErrorKind::kDependency: return kExitDependency;
    case ErrorKind::kIo:
    case ErrorKind::kParse: return kExitIo;
    case ErrorKind::kNonFinite: return kExitDiverged;
    default: return kExitData;
  }
}

struct Options {
  std::string config_path;
  std::optional<uint64_t> seed;
  int threads = 1;
  bool quiet = false;
  bool verbose = false;
  bool dump_config = false;
  std::string dir;
  bool resume = false;
  std::string init = "pretrained";
  std::string model = "finetuned";
  std::string set = "dev";
  std::string hyp, ref;
};

// ---------------------------------------------------------------------------
// Subcommands

class Runner {
 public:
  Runner(const Options& o, ExperimentConfig cfg, ExperimentDir& dir, Logger& log, std::ostream& out)
      : o_(o), cfg_(std::move(cfg)), dir_(dir), log_(log), out_(out) {}

  void synth_data() {
    for (const auto& a : {kManifest, kFeats, kLexicon}) dir_.claim(a.path);
    SyntheticCorpus corpus = synth_corpus(cfg_.data);
    store_corpus(corpus, dir_.path("data").string());
    for (const auto& a : {kManifest, kFeats, kLexicon}) dir_.record(a.path);
    log_.info({{"event", "corpus"}, {"utterances", corpus.utterances.size()}});
  }

  void train_codebook() {
    Corpus c = load_corpus(dir_);
    dir_.claim(kCodebook.path);
    CodebookArtifact art = train_codebook_impl(c);
    dir_.write(kCodebook.path, serialize_codebook(art.featurizer, art.kmeans.codebook));
    log_.info({{"event", "kmeans"},
               {"iterations", art.kmeans.iterations},
               {"inertia", art.kmeans.inertia_history.empty() ? 0.0 : art.kmeans.inertia_history.back()},
               {"empty_reseeds", art.kmeans.empty_reseeds}});
  }

  void train_bpe() {
    auto [feat, cb] = load_codebook(dir_);
    Corpus c = load_corpus(dir_);
    dir_.claim(kBpe.path);
    BpeModel bpe = train_code_bpe(unlabeled_train_speech(c.utterances), feat, cb, cfg_.codes);
    dir_.write(kBpe.path, bpe.serialize());
    log_.info({{"event", "bpe"}, {"vocab", bpe.vocab_size()}, {"merges", bpe.merges.size()}});
  }

  void encode_units() {
    auto [feat, cb] = load_codebook(dir_);
    BpeModel bpe = BpeModel::parse(read_file(dir_.require(kBpe)));
    Corpus c = load_corpus(dir_);
    dir_.claim(kUnits.path);
    std::vector<std::string> lines(c.utterances.size());
    parallel_for(static_cast<int>(c.utterances.size()), o_.threads, [&](int i) {
      const Utterance& u = c.utterances[static_cast<size_t>(i)];
      if (u.features) lines[static_cast<size_t>(i)] = u.id + "\t" + join_tokens(speech_to_pseudocodes(feat, cb, bpe, *u.features)) + "\n";
    });
    std::string text;
    for (const auto& l : lines) text += l;
    dir_.write(kUnits.path, text);
  }

  void train_lm() {
    Corpus c = load_corpus(dir_);
    dir_.claim(kLm.path);
    std::vector<TokenSeq> train, dev;
    for (const auto& u : c.utterances) {
      if (u.kind != UttKind::kText || !u.text) continue;
      (u.split == Split::kTrain ? train : dev).push_back(*u.text);
    }
    if (train.empty()) fail(ErrorKind::kInsufficientData, "train-lm: no training text");
    NgramLM lm = NgramLM::train(train, c.lexicon.text_vocab_size(), cfg_.lm);
    dir_.write(kLm.path, lm.serialize());
    ojson rec = {{"event", "lm"}, {"order", cfg_.lm.order}, {"train_sentences", train.size()}};
    if (!dev.empty()) rec["dev_perplexity"] = lm.perplexity(dev);
    log_.info(rec);
  }

  void pretrain() {
    // dependency order matters for the diagnostic: codebook before bpe
    TrainingData data = load_training_data(dir_, needs_codes(cfg_.train));
    dir_.claim(kPretrained.path);
    const fs::path ckdir = dir_.path("checkpoints/pretrain");
    check_fresh_checkpoints(ckdir, o_.resume);
    std::ofstream metrics(dir_.metrics_file(), std::ios::app);
    TeeBuf tee_buf(log_.file(), o_.verbose ? &std::cerr : nullptr);
    std::ostream trainer_log(&tee_buf);
    TrainHooks hooks{&metrics, &trainer_log, ckdir.string(), -1};

    Model<float> model(cfg_.model);
    AdamState<float> opt;
    TrainerState state;
    std::optional<Stage> resume_stage;
    if (o_.resume) {
      if (auto p = latest_checkpoint(ckdir)) {
        ModelCheckpoint ck = load_checkpoint(p->string());
        require_model_config(ck, cfg_.model, p->string());
        model = Model<float>(ck.config, ck.params);
        opt = ck.optimizer;
        state = TrainerState::from_json(ck.trainer_state);
        resume_stage = state.stage;
        log_.info({{"event", "resume"}, {"checkpoint", p->string()}, {"next_step", state.next_step}});
      }
    }
    TrainerState s1, s2;
    if (runs_stage1(cfg_.train) && resume_stage != Stage::kStage2) {
      if (data.text_train.empty()) fail(ErrorKind::kInsufficientData, "pretrain: stage 1 needs text utterances");
      s1 = train_stage(model, opt, data, cfg_.train, Stage::kStage1, hooks, resume_stage ? state : TrainerState{});
      log_.info({{"event", "stage_done"}, {"stage", "stage1"}, {"steps", s1.next_step}, {"converged", s1.converged},
                 {"dev_p2t_accuracy", dev_p2t_accuracy(model, data, cfg_.train)},
                 {"unigram_accuracy", unigram_baseline_accuracy(data, cfg_.train)}});
      opt = AdamState<float>{};
    }
    s2 = train_stage(model, opt, data, cfg_.train, Stage::kStage2, hooks,
                     resume_stage == Stage::kStage2 ? state : TrainerState{});
    log_.info({{"event", "stage_done"}, {"stage", "stage2"}, {"steps", s2.next_step},
               {"skipped_batches", s2.skipped_batches}, {"collapse_alerts", s2.collapse_alerts},
               {"min_pred_entropy", std::isfinite(s2.min_pred_entropy) ? ojson(s2.min_pred_entropy) : ojson()}});
    save_model(dir_, kPretrained, final_checkpoint(model, s2));
  }

  void finetune() {
    TrainingData data = load_training_data(dir_, false);
    dir_.claim(kFinetuned.path);
    const fs::path ckdir = dir_.path("checkpoints/finetune");
    check_fresh_checkpoints(ckdir, o_.resume);
    std::ofstream metrics(dir_.metrics_file(), std::ios::app);
    TeeBuf tee_buf(log_.file(), o_.verbose ? &std::cerr : nullptr);
    std::ostream trainer_log(&tee_buf);
    TrainHooks hooks{&metrics, &trainer_log, ckdir.string(), -1};

    std::optional<Model<float>> model;
    AdamState<float> opt;
    TrainerState state;
    if (o_.resume) {
      if (auto p = latest_checkpoint(ckdir)) {
        ModelCheckpoint ck = load_checkpoint(p->string());
        require_model_config(ck, cfg_.model, p->string());
        model.emplace(ck.config, ck.params);
        opt = ck.optimizer;
        state = TrainerState::from_json(ck.trainer_state);
        log_.info({{"event", "resume"}, {"checkpoint", p->string()}, {"next_step", state.next_step}});
      }
    }
    if (!model) {
      if (o_.init == "pretrained") {
        ModelCheckpoint ck = load_checkpoint(dir_.require(kPretrained));
        require_model_config(ck, cfg_.model, kPretrained.path);
        model.emplace(ck.config, ck.params);
      } else {
        model.emplace(cfg_.model);
      }
      state.stage = Stage::kFinetune;
    }
    const double before = dev_s2t_loss(*model, data, o_.threads);
    state = train_stage(*model, opt, data, cfg_.train, Stage::kFinetune, hooks, state);
    log_.info({{"event", "stage_done"}, {"stage", "finetune"}, {"init", o_.init}, {"steps", state.next_step},
               {"dev_s2t_loss_before", before}, {"dev_s2t_loss_after", dev_s2t_loss(*model, data, o_.threads)}});
    save_model(dir_, kFinetuned, final_checkpoint(*model, state));
  }

  void decode() {
    const ArtifactInfo& src = o_.model == "pretrained" ? kPretrained : kFinetuned;
    ModelCheckpoint ck = load_checkpoint(dir_.require(src));
    require_model_config(ck, cfg_.model, src.path);
    std::optional<NgramLM> lm = load_lm_if_fused(dir_, cfg_.decode);
    TrainingData data = load_training_data(dir_, false);
    const std::string hyp_rel = "decode/" + o_.model + "-" + o_.set + ".hyp";
    const std::string ref_rel = "decode/" + o_.set + ".ref";
    dir_.claim(hyp_rel);

    Model<float> model(ck.config, ck.params);
    const auto& set = eval_set(data, o_.set);
    if (set.empty()) fail(ErrorKind::kEmpty, "decode: the " + o_.set + " set is empty");
    TerReport rep = evaluate_ter(model, set, lm ? &*lm : nullptr, cfg_.decode, o_.threads);
    dir_.write(hyp_rel, serialize_hypotheses(rep.hypotheses));
    const std::string refs = references_text(set);
    if (!fs::exists(dir_.path(ref_rel))) {
      dir_.write(ref_rel, refs);
    } else if (read_file(dir_.path(ref_rel).string()) != refs) {
      fail(ErrorKind::kIo, "decode: " + ref_rel + " exists with different content");
    }
    log_.info({{"event", "decoded"}, {"set", o_.set}, {"model", o_.model}, {"utterances", set.size()},
               {"unterminated", rep.unterminated}, {"ter", rep.ter}});
    out_ << "decoded " << set.size() << " utterances -> " << dir_.path(hyp_rel).string() << "\n";
  }

  void ablate() {
    TrainingData data = load_training_data(dir_, true);
    std::optional<NgramLM> lm = load_lm_if_fused(dir_, cfg_.decode);
    dir_.claim(kAblation.path);
    std::vector<AblationVariant> variants;
    for (const auto& v : standard_ablation_variants()) {
      if (cfg_.ablate_variants.empty() ||
          std::find(cfg_.ablate_variants.begin(), cfg_.ablate_variants.end(), v.name) != cfg_.ablate_variants.end()) {
        variants.push_back(v);
      }
    }
    std::ofstream metrics(dir_.metrics_file(), std::ios::app);
    TeeBuf tee_buf(log_.file(), o_.verbose ? &std::cerr : nullptr);
    std::ostream trainer_log(&tee_buf);
    TrainHooks hooks{&metrics, &trainer_log, "", -1};
    auto rows = mmspeech::ablate(cfg_.model, data, cfg_.train, variants, lm ? &*lm : nullptr, cfg_.decode, hooks);
    const std::string table = ablation_table(rows);
    dir_.write(kAblation.path, table);
    out_ << table;
  }

 private:
  CodebookArtifact train_codebook_impl(const Corpus& c) {
    auto speech = unlabeled_train_speech(c.utterances);
    if (speech.empty()) fail(ErrorKind::kInsufficientData, "train-codebook: no unlabeled training speech");
    return mmspeech::train_codebook(speech, speech.front()->cols(), cfg_.codes);
  }

  const Options& o_;
  ExperimentConfig cfg_;
  ExperimentDir& dir_;
  Logger& log_;
  std::ostream& out_;
};

void print_ter(std::ostream& out, const TerCounts& c) {
  out << "TER " << std::fixed << std::setprecision(4) << c.ter() << std::defaultfloat << " (S=" << c.stats.substitutions
      << " I=" << c.stats.insertions << " D=" << c.stats.deletions << " N=" << c.stats.reference_tokens
      << " utterances=" << c.utterances << ")\n";
}

}  // namespace

// ---------------------------------------------------------------------------

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Options o;
  CLI::App app{"mmspeech: multi-task speech pre-training at desk scale"};
  app.set_help_all_flag("--help-all", "Help for every subcommand");
  app.add_option("--config", o.config_path, "JSON config file (defaults: --dump-config)");
  app.add_option("--seed", o.seed, "Seed for every module; overrides the config");
  app.add_option("--threads", o.threads, "Worker cap; results do not depend on it")->check(CLI::PositiveNumber);
  auto* quiet = app.add_flag("-q,--quiet", o.quiet, "Errors only on stderr");
  app.add_flag("-v,--verbose", o.verbose, "Also echo trainer events to stderr")->excludes(quiet);
  app.add_flag("--dump-config", o.dump_config, "Print the resolved config and exit");
  app.add_option("-d,--dir", o.dir, "Experiment directory");
  app.require_subcommand(0, 1);

  std::map<std::string, CLI::App*> subs;
  auto sub = [&](const char* name, const char* help) { return subs[name] = app.add_subcommand(name, help); };
  sub("synth-data", "Generate the synthetic corpus");
  sub("train-codebook", "Teacher features and k-means codebook");
  sub("train-bpe", "BPE over deduplicated units");
  sub("encode-units", "Write pseudo-codes for every utterance with speech");
  sub("train-lm", "Text n-gram LM for shallow fusion");
  sub("pretrain", "Stage 1 and stage 2 pre-training")->add_flag("--resume", o.resume, "Continue from the latest checkpoint");
  auto* ft = sub("finetune", "S2T fine-tuning");
  ft->add_flag("--resume", o.resume, "Continue from the latest checkpoint");
  ft->add_option("--init", o.init, "Starting point")->check(CLI::IsMember({"pretrained", "scratch"}));
  auto* dec = sub("decode", "Beam search over a paired set");
  dec->add_option("--model", o.model, "Which model to decode with")->check(CLI::IsMember({"finetuned", "pretrained"}));
  dec->add_option("--set", o.set, "Paired split")->check(CLI::IsMember({"dev", "test"}));
  auto* ev = sub("eval", "TER of a hypothesis file against references");
  ev->add_option("--hyp", o.hyp, "Hypothesis file");
  ev->add_option("--ref", o.ref, "Reference file");
  ev->add_option("--model", o.model, "Model whose decode output to score")->check(CLI::IsMember({"finetuned", "pretrained"}));
  ev->add_option("--set", o.set, "Paired split")->check(CLI::IsMember({"dev", "test"}));
  sub("ablate", "Leave-tasks-out pre-training comparison");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << ojson{{"level", "error"}, {"kind", "usage"}, {"message", e.what()}}.dump() << '\n';
    return kExitUsage;
  }

  std::string command;
  for (const auto& [name, app_ptr] : subs) {
    if (app_ptr->parsed()) command = name;
  }
  Logger log(err, o.quiet ? Level::kError : o.verbose ? Level::kDebug : Level::kInfo, command.empty() ? "mmspeech" : command);

  try {
    if (command.empty() && !o.dump_config) {
      fail(ErrorKind::kConfig, "no subcommand given; see --help");
    }
    if (command == "eval" && !o.hyp.empty()) {
      if (o.ref.empty()) fail(ErrorKind::kConfig, "eval: --hyp needs --ref");
      print_ter(out, score_files(o.hyp, o.ref));
      return kExitOk;
    }

    // defaults < config file (or the directory snapshot) < environment < flags
    std::string text;
    std::string source = "defaults";
    const fs::path snapshot = o.dir.empty() ? fs::path() : fs::path(o.dir) / "config.json";
    if (!o.config_path.empty()) {
      text = read_file(o.config_path);
      source = o.config_path;
    } else if (!snapshot.empty() && fs::exists(snapshot)) {
      text = read_file(snapshot.string());
      source = snapshot.string();
    } else {
      ExperimentConfig d;
      d.resolve();
      text = d.to_json();
    }
    try {
      text = apply_env_overrides(text, config_env());
    } catch (const nlohmann::json::parse_error& e) {
      fail(ErrorKind::kConfig, source + ": not valid JSON: " + e.what());
    }
    ExperimentConfig cfg = ExperimentConfig::from_json(text, source);
    if (o.seed) cfg.seed = *o.seed;
    cfg.resolve();
    cfg.train.threads = o.threads;

    if (o.dump_config) {
      out << cfg.to_json();
      return kExitOk;
    }
    if (o.dir.empty()) fail(ErrorKind::kConfig, command + ": --dir is required");

    ExperimentDir dir(o.dir, command, log);
    dir.bind_config(cfg);
    log.attach(dir.logs_file());
    log.info({{"event", "start"}, {"seed", cfg.seed}, {"threads", o.threads}});

    Runner r(o, cfg, dir, log, out);
    if (command == "synth-data") r.synth_data();
    else if (command == "train-codebook") r.train_codebook();
    else if (command == "train-bpe") r.train_bpe();
    else if (command == "encode-units") r.encode_units();
    else if (command == "train-lm") r.train_lm();
    else if (command == "pretrain") r.pretrain();
    else if (command == "finetune") r.finetune();
    else if (command == "decode") r.decode();
    else if (command == "ablate") r.ablate();
    else if (command == "eval") {
      const std::string hyp_rel = "decode/" + o.model + "-" + o.set + ".hyp";
      const std::string ref_rel = "decode/" + o.set + ".ref";
      const std::string hyp = dir.require({hyp_rel.c_str(), "decode"});
      const std::string ref = dir.require({ref_rel.c_str(), "decode"});
      TerCounts c = score_files(hyp, ref);
      print_ter(out, c);
      log.info({{"event", "ter"}, {"set", o.set}, {"model", o.model}, {"ter", c.ter()}});
    }
    log.info({{"event", "done"}});
    return kExitOk;
  } catch (const Error& e) {
    log.emit(Level::kError, {{"kind", error_kind_name(e.kind())}, {"message", e.what()}});
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    log.emit(Level::kError, {{"kind", "internal"}, {"message", e.what()}});
    return kExitFailure;
  }
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace mmspeech
