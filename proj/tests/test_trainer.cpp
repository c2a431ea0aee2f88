// tests/test_trainer.cpp

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

#include <filesystem>
#include <map>
#include <sstream>

#include "doctest.h"
#include "mmspeech/trainer.hpp"
#include "oracles.hpp"

using namespace mmspeech;

namespace {

struct Fixture {
  SyntheticCorpus corpus;
  PseudoCodeArtifacts codes;
  TrainingData data;
  ModelConfig model;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    Fixture x;
    SyntheticCorpusConfig cc;
    cc.seed = 5;
    cc.n_text_utts = 600;
    cc.n_unlabeled_speech_utts = 60;
    cc.n_paired_utts = 60;
    cc.text_vocab_size = 12;
    cc.phoneme_vocab_size = 6;
    cc.feature_dim = 6;
    cc.text_dev_fraction = 0.1;
    x.corpus = synth_corpus(cc);
    std::vector<const Matrix<float>*> sp;
    for (const auto* u : x.corpus.select(UttKind::kSpeech, Split::kTrain)) sp.push_back(&*u->features);
    PseudoCodeConfig pc;
    pc.teacher_dim = 4;
    pc.clusters = 8;
    pc.code_vocab = 16;
    auto cb = train_codebook(sp, cc.feature_dim, pc);
    x.codes = {cb.featurizer, cb.kmeans.codebook, train_code_bpe(sp, cb.featurizer, cb.kmeans.codebook, pc)};
    x.data = TrainingData::build(x.corpus.utterances, x.corpus.lexicon, &x.codes);
    x.model.feature_dim = 6;
    x.model.model_dim = 16;
    x.model.ffn_dim = 32;
    x.model.heads = 2;
    x.model.layers_speech_enc = 1;
    x.model.layers_shared_enc = 1;
    x.model.layers_dec = 1;
    x.model.phoneme_vocab = 6;
    x.model.text_vocab = 12;
    x.model.code_vocab = 16;
    x.model.seed = 9;
    return x;
  }();
  return f;
}

TrainConfig small_config() {
  TrainConfig c;
  c.batch_size = {2, 2, 2, 2, 2};
  c.stage1_steps = 12;
  c.stage2_steps = 24;
  c.finetune_steps = 6;
  c.warmup_steps = 5;
  c.eval_interval = 4;
  c.dev_eval_utts = 20;
  c.seed = 21;
  return c;
}

TrainConfig only(Task t) {
  TrainConfig c = small_config();
  c.enabled = {false, false, false, false, false};
  c.enabled[static_cast<int>(t)] = true;
  return c;
}

}  // namespace

TEST_CASE("schedule: every 12-step window has the default ratio counts") {
  TrainConfig cfg;
  for (uint64_t seed : {1ULL, 2ULL, 77ULL}) {
    cfg.seed = seed;
    TaskSchedule s = schedule_for(cfg, Stage::kStage2);
    REQUIRE(s.cycle_length() == 12);
    for (int64_t start = 0; start < 120; ++start) {
      std::map<Task, int> n;
      for (int64_t i = start; i < start + 12; ++i) ++n[s.at(i)];
      CHECK(n[Task::kMsp] == 4);
      CHECK(n[Task::kS2c] == 4);
      CHECK(n[Task::kP2t] == 2);
      CHECK(n[Task::kPp] == 1);
      CHECK(n[Task::kS2t] == 1);
    }
  }
}

TEST_CASE("schedule: single task is constant, 2:1 over 999 batches is 666/333") {
  TaskSchedule one({0, 0, 0, 3, 0}, {false, false, false, true, false}, 4);
  for (int64_t i = 0; i < 50; ++i) CHECK(one.at(i) == Task::kP2t);

  TaskSchedule two({2, 0, 1, 0, 0}, {true, false, true, false, false}, 4);
  int a = 0, b = 0;
  for (int64_t i = 0; i < 999; ++i) (two.at(i) == Task::kMsp ? a : b)++;
  CHECK(a == 666);
  CHECK(b == 333);

  CHECK_THROWS_AS(TaskSchedule({0, 0, 0, 0, 0}, {true, true, true, true, true}, 1), Error);
  TrainConfig cfg;
  for (int64_t i = 0; i < 30; ++i) {
    CHECK(schedule_for(cfg, Stage::kStage1).at(i) == Task::kP2t);
    CHECK(schedule_for(cfg, Stage::kFinetune).at(i) == Task::kS2t);
  }
}

TEST_CASE("learning rate: linear warmup then inverse square root") {
  TrainConfig c;
  c.lr = 2e-3;
  c.warmup_steps = 100;
  CHECK(c.lr_at(0) == doctest::Approx(2e-5));
  CHECK(c.lr_at(99) == doctest::Approx(2e-3));
  CHECK(c.lr_at(399) == doctest::Approx(1e-3));
  for (int64_t s = 100; s < 500; ++s) CHECK(c.lr_at(s) <= c.lr_at(s - 1) + 1e-15);
}

TEST_CASE("config validation") {
  TrainConfig c;
  c.enabled = {false, false, false, false, false};
  CHECK_THROWS_AS(c.validate(), Error);
  c = TrainConfig{};
  c.ratios[0] = -1;
  CHECK_THROWS_AS(c.validate(), Error);
  c = TrainConfig{};
  c.stage2_steps = -1;
  CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("freeze: MSP step leaves E bit-identical, PP step changes it") {
  const Fixture& f = fixture();
  const int e = Model<float>(f.model).phoneme_embedding_index();

  Model<float> m(f.model);
  const ParamStore<float> before = m.params();
  TrainConfig msp = only(Task::kMsp);
  msp.stage2_steps = 1;
  AdamState<float> opt;
  TrainerState st = train_stage(m, opt, f.data, msp, Stage::kStage2, {});
  CHECK(st.next_step == 1);
  CHECK(m.params().value(e) == before.value(e));
  CHECK_FALSE(m.params() == before);  // the encoder did move

  Model<float> p(f.model);
  TrainConfig pp = only(Task::kPp);
  pp.stage2_steps = 1;
  AdamState<float> opt2;
  st = train_stage(p, opt2, f.data, pp, Stage::kStage2, {});
  CHECK(st.last_loss > 0);
  CHECK_FALSE(p.params().value(e) == before.value(e));

  auto mask = FreezePolicy::standard().mask(Task::kMsp, m.params());
  CHECK(std::count(mask.begin(), mask.end(), true) == 1);
  CHECK(mask[e]);
  for (Task t : {Task::kPp, Task::kP2t, Task::kS2c, Task::kS2t}) {
    auto k = FreezePolicy::standard().mask(t, m.params());
    CHECK(std::count(k.begin(), k.end(), true) == 0);
  }
}

TEST_CASE("stage 1 with zero steps leaves parameters unchanged") {
  const Fixture& f = fixture();
  Model<float> m(f.model);
  const ParamStore<float> before = m.params();
  TrainConfig c = small_config();
  c.stage1_steps = 0;
  AdamState<float> opt;
  TrainerState st = train_stage(m, opt, f.data, c, Stage::kStage1, {});
  CHECK(st.next_step == 0);
  CHECK(m.params() == before);
  CHECK(opt.step == 0);
  CHECK(opt.m.size() == static_cast<size_t>(m.params().size()));
}

TEST_CASE("determinism: same seed is bit-identical, thread count does not matter") {
  const Fixture& f = fixture();
  auto run = [&](int threads, uint64_t seed) {
    Model<float> m(f.model);
    TrainConfig c = small_config();
    c.threads = threads;
    c.seed = seed;
    std::ostringstream metrics;
    TrainHooks h;
    h.metrics = &metrics;
    pretrain(m, f.data, c, h);
    return std::make_pair(m.params(), metrics.str());
  };
  auto a = run(1, 21), b = run(1, 21), c = run(3, 21), d = run(1, 22);
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
  CHECK(a.first == c.first);
  CHECK(a.second == c.second);
  CHECK_FALSE(a.first == d.first);
}

TEST_CASE("checkpoint resume equals the uninterrupted run bit-exactly") {
  const Fixture& f = fixture();
  scratch::TempDir dir("resume");
  TrainConfig c = small_config();
  c.checkpoint_interval = 5;

  for (Stage stage : {Stage::kStage1, Stage::kStage2}) {
    CAPTURE(stage_name(stage));
    Model<float> full(f.model);
    AdamState<float> opt_full;
    TrainerState s_full = train_stage(full, opt_full, f.data, c, stage, {});

    Model<float> part(f.model);
    AdamState<float> opt_part;
    TrainHooks h;
    h.checkpoint_dir = dir.str();
    h.stop_after = 10;
    TrainerState s_part = train_stage(part, opt_part, f.data, c, stage, h);
    REQUIRE(s_part.next_step == 10);

    // resume from disk only
    ModelCheckpoint ck = load_checkpoint(dir / checkpoint_name(stage, 10));
    Model<float> resumed(ck.config, ck.params);
    AdamState<float> opt = ck.optimizer;
    TrainerState st = TrainerState::from_json(ck.trainer_state);
    CHECK(st == s_part);
    TrainerState s_res = train_stage(resumed, opt, f.data, c, stage, {}, st);
    CHECK(resumed.params() == full.params());
    CHECK(opt == opt_full);
    CHECK(s_res == s_full);
  }
}

TEST_CASE("trainer state JSON round trip keeps infinities") {
  TrainerState s;
  s.stage = Stage::kFinetune;
  s.next_step = 17;
  s.best_dev_loss = 0.1 + 0.2;
  s.last_loss = 1.0 / 3;
  CHECK(TrainerState::from_json(s.to_json()) == s);
  TrainerState inf;
  CHECK(TrainerState::from_json(inf.to_json()) == inf);
  CHECK_THROWS_AS(TrainerState::from_json("{\"stage\":1}"), Error);
}

TEST_CASE("stage 1: dev P2T accuracy beats the unigram baseline") {
  const Fixture& f = fixture();
  Model<float> m(f.model);
  TrainConfig c = small_config();
  c.stage1_steps = 2000;
  c.batch_size[static_cast<int>(Task::kP2t)] = 8;
  c.eval_interval = 200;
  std::ostringstream log;
  TrainHooks h;
  h.log = &log;
  AdamState<float> opt;
  TrainerState st = train_stage(m, opt, f.data, c, Stage::kStage1, h);
  const double acc = dev_p2t_accuracy(m, f.data, c), base = unigram_baseline_accuracy(f.data, c);
  MESSAGE("stage-1 steps " << st.next_step << ", dev accuracy " << acc << " vs unigram " << base);
  CHECK(acc > base);
  CHECK(log.str().find("dev_eval") != std::string::npos);
}

TEST_CASE("unigram baseline matches a direct count") {
  const Fixture& f = fixture();
  TrainConfig c = small_config();
  std::map<int, int> n;
  const int eos = f.data.lexicon.text_vocab_size();
  for (const auto& ex : f.data.text_train) {
    for (int t : ex.text) ++n[t];
    ++n[eos];
  }
  int best = -1, bc = -1;
  for (auto [t, k] : n) {
    if (k > bc) bc = k, best = t;
  }
  int hit = 0, tot = 0;
  for (int i = 0; i < std::min<int>(c.dev_eval_utts, static_cast<int>(f.data.text_dev.size())); ++i) {
    for (int t : f.data.text_dev[i].text) hit += t == best, ++tot;
    hit += best == eos;
    ++tot;
  }
  CHECK(unigram_baseline_accuracy(f.data, c) == doctest::Approx(static_cast<double>(hit) / tot));
}

TEST_CASE("S2T-only training lowers the dev loss over 500 steps") {
  const Fixture& f = fixture();
  Model<float> m(f.model);
  const double before = dev_s2t_loss(m, f.data, 1);
  TrainConfig c = only(Task::kS2t);
  c.stage2_steps = 500;
  AdamState<float> opt;
  train_stage(m, opt, f.data, c, Stage::kStage2, {});
  const double after = dev_s2t_loss(m, f.data, 1);
  MESSAGE("dev S2T loss " << before << " -> " << after);
  CHECK(after < before);
}

TEST_CASE("divergence aborts with a diagnostic naming task and step") {
  const Fixture& f = fixture();
  Model<float> m(f.model);
  m.params().value("dec.text_head.weight")(0, 0) = std::numeric_limits<float>::quiet_NaN();
  AdamState<float> opt;
  try {
    train_stage(m, opt, f.data, only(Task::kS2t), Stage::kStage2, {});
    FAIL("expected divergence");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kNonFinite);
    CHECK(std::string(e.what()).find("s2t") != std::string::npos);
    CHECK(std::string(e.what()).find("step 0") != std::string::npos);
  }
}

TEST_CASE("S2C without pseudo-codes is a dependency error") {
  const Fixture& f = fixture();
  TrainingData bare = TrainingData::build(f.corpus.utterances, f.corpus.lexicon, nullptr);
  Model<float> m(f.model);
  AdamState<float> opt;
  try {
    train_stage(m, opt, bare, only(Task::kS2c), Stage::kStage2, {});
    FAIL("expected dependency error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kDependency);
    CHECK(std::string(e.what()).find("train-codebook") != std::string::npos);
  }
  // S2C-free configurations do not need codes
  TrainConfig c = only(Task::kS2t);
  c.stage2_steps = 2;
  CHECK_NOTHROW(train_stage(m, opt, bare, c, Stage::kStage2, {}));
}

TEST_CASE("PP skips CTC-infeasible utterances and counts them") {
  const Fixture& f = fixture();
  std::vector<Utterance> utts;
  Utterance u;
  u.id = "short";
  u.kind = UttKind::kPaired;
  u.text = TokenSeq{0, 1, 2, 3, 4, 5, 6, 7};
  u.features = Matrix<float>(5, 6, 0.5f);  // T' = 2 < 8 labels
  utts.push_back(u);
  TrainingData d = TrainingData::build(utts, f.corpus.lexicon, nullptr);
  Model<float> m(f.model);
  const ParamStore<float> before = m.params();
  TrainConfig c = only(Task::kPp);
  c.stage2_steps = 3;
  AdamState<float> opt;
  TrainerState st = train_stage(m, opt, d, c, Stage::kStage2, {});
  CHECK(st.skipped_batches == 3);
  CHECK(st.ctc_infeasible == 3 * c.batch_size[static_cast<int>(Task::kPp)]);
  CHECK(m.params() == before);
}

TEST_CASE("metrics lines carry the per-task loss and MSP diagnostics") {
  const Fixture& f = fixture();
  Model<float> m(f.model);
  TrainConfig c = small_config();
  c.stage2_steps = 12;
  std::ostringstream metrics;
  TrainHooks h;
  h.metrics = &metrics;
  AdamState<float> opt;
  TrainerState st = train_stage(m, opt, f.data, c, Stage::kStage2, h);
  std::istringstream is(metrics.str());
  std::string line;
  int lines = 0, msp = 0;
  while (std::getline(is, line)) {
    ++lines;
    if (line.find("\"task\":\"msp\"") != std::string::npos) {
      ++msp;
      CHECK(line.find("pred_entropy") != std::string::npos);
    }
  }
  CHECK(lines == 12);
  CHECK(msp == 4);
  CHECK(std::isfinite(st.min_pred_entropy));
}

TEST_CASE("collapse alert fires below the entropy floor") {
  const Fixture& f = fixture();
  Model<float> m(f.model);
  TrainConfig c = only(Task::kMsp);
  c.stage2_steps = 2;
  c.collapse_floor = 100.0;  // above ln(I): every MSP step alerts
  std::ostringstream log;
  TrainHooks h;
  h.log = &log;
  AdamState<float> opt;
  TrainerState st = train_stage(m, opt, f.data, c, Stage::kStage2, h);
  CHECK(st.collapse_alerts == 2);
  CHECK(st.first_collapse_step == 0);
  CHECK(log.str().find("collapse_alert") != std::string::npos);
}

TEST_CASE("ablation: empty removal list is one full run, -P2T skips stage 1") {
  const Fixture& f = fixture();
  TrainConfig c = small_config();
  BeamConfig beam;
  beam.beam_size = 2;
  beam.max_len = 10;
  auto rows = ablate(f.model, f.data, c, {{"full", {}}, {"-P2T", {Task::kP2t}}, {"-PP&S2C", {Task::kPp, Task::kS2c}}},
                     nullptr, beam, {});
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].ran_stage1);
  CHECK(rows[0].stage2_steps == 24);
  CHECK_FALSE(rows[1].ran_stage1);
  CHECK(rows[1].stage2_steps == 24 * 10 / 12);
  CHECK(rows[2].stage2_steps == 24 * 7 / 12);
  for (const auto& r : rows) {
    CHECK_FALSE(r.failed);
    CHECK(r.ter >= 0.0);
  }
  // the full variant equals a plain pretrain + finetune with the same seeds
  Model<float> m(f.model);
  pretrain(m, f.data, c, {});
  finetune(m, f.data, c, {});
  CHECK(evaluate_ter(m, f.data.paired_dev, nullptr, beam, 1).ter == rows[0].ter);

  auto bad = ablate(f.model, f.data, c, {{"nothing", {Task::kMsp, Task::kPp, Task::kS2c, Task::kP2t, Task::kS2t}}},
                    nullptr, beam, {});
  CHECK(bad[0].failed);
  CHECK(ablation_table(bad).find("failed") != std::string::npos);
  CHECK(standard_ablation_variants().size() == 8);
}
