// acceptance.cpp

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

// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any
// fails. Criteria 10-12 train on the default synthetic corpus and take most
// of the wall time; --criteria selects a subset.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "mmspeech/cli.hpp"
#include "mmspeech/losses.hpp"
#include "mmspeech/masking.hpp"
#include "mmspeech/trainer.hpp"
#include "oracles.hpp"

using namespace mmspeech;
namespace fs = std::filesystem;
using clk = std::chrono::steady_clock;

namespace {

double seconds_since(clk::time_point t0) { return std::chrono::duration<double>(clk::now() - t0).count(); }

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

Matrix<double> random_stochastic(int rows, int cols, Rng& rng) {
  Matrix<double> m(rows, cols);
  for (int r = 0; r < rows; ++r) {
    double s = 0;
    for (int c = 0; c < cols; ++c) s += m(r, c) = 0.05 + uniform01(rng);
    for (int c = 0; c < cols; ++c) m(r, c) /= s;
  }
  return m;
}

Matrix<double> random_features(int frames, int dim, uint64_t seed) {
  Rng rng(seed);
  Matrix<double> m(frames, dim);
  for (double& v : m.storage()) v = normal01(rng);
  return m;
}

ModelConfig tiny_model() {
  ModelConfig c;
  c.feature_dim = 5;
  c.model_dim = 8;
  c.ffn_dim = 12;
  c.heads = 2;
  c.layers_speech_enc = 1;
  c.layers_shared_enc = 1;
  c.layers_dec = 1;
  c.phoneme_vocab = 5;
  c.text_vocab = 6;
  c.code_vocab = 7;
  c.dropout = 0.0;
  c.seed = 3;
  return c;
}

// 1 -------------------------------------------------------------------------
Outcome ctc_oracle() {
  const auto t0 = clk::now();
  Rng rng(2024);
  double worst = 0;
  int instances = 0;
  for (int T = 1; T <= 8; ++T) {
    for (int I = 1; I <= 5; ++I) {
      for (int len = 0; len <= 4; ++len) {
        std::vector<int> tgt(len);
        for (int& v : tgt) v = uniform_int(rng, 1, I);
        if (losses::ctc_min_frames(tgt) > T) continue;
        auto p = random_stochastic(T, I + 1, rng);
        worst = std::max(worst, std::abs(losses::loss_pp(p, tgt) - oracle::ctc_brute_force(p, tgt)));
        ++instances;
      }
    }
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-6 && secs < 30 && instances > 0,
          "max |forward - enumeration| " + fmt(worst, 3) + " over " + std::to_string(instances) +
              " instances (T'<=8, |y|<=4, I<=5) in " + fmt(secs, 3) + " s; tol 1e-6, < 30 s"};
}

// 2 -------------------------------------------------------------------------
Outcome gradient_checks() {
  const auto t0 = clk::now();
  Model<double> m(tiny_model());
  auto feats = random_features(17, 5, 8);
  const int I = tiny_model().phoneme_vocab;
  const DecoderVocab text = m.vocab(OutputSpace::kText), codes = m.vocab(OutputSpace::kCodes);
  std::vector<std::pair<std::string, oracle::GradCheckResult>> rs;

  {
    std::vector<int> noisy{1, I + 1, 3, 4}, in{text.bos(), 2, 0, 5}, out{2, 0, 5, text.eos()};
    rs.emplace_back("P2T", oracle::check_model_loss(m, [&](Tape<double>& t) {
      return losses::cross_entropy_op(m.decoder_log_probs(t, m.encode_phonemes(t, noisy), in, OutputSpace::kText), out);
    }, {}, 11));
  }
  {
    std::vector<int> in{codes.bos(), 6, 1}, out{6, 1, codes.eos()};
    rs.emplace_back("S2C", oracle::check_model_loss(m, [&](Tape<double>& t) {
      return losses::cross_entropy_op(m.decoder_log_probs(t, m.encode_speech(t, feats, nullptr), in, OutputSpace::kCodes),
                                      out);
    }, {}, 12));
  }
  {
    std::vector<int> in{text.bos(), 4, 4, 1}, out{4, 4, 1, text.eos()};
    rs.emplace_back("S2T", oracle::check_model_loss(m, [&](Tape<double>& t) {
      return losses::cross_entropy_op(m.decoder_log_probs(t, m.encode_speech(t, feats, nullptr), in, OutputSpace::kText),
                                      out);
    }, {}, 13));
  }
  {
    std::vector<int> tgt{2, 5, 5};
    rs.emplace_back("PP", oracle::check_model_loss(m, [&](Tape<double>& t) {
      return losses::ctc_op(m.phoneme_logits(t, m.encode_speech(t, feats, nullptr), true), tgt);
    }, {}, 14));
  }
  {
    std::vector<bool> frame_mask = mask_from_starts(17, std::vector<int>{2, 11}, 3);
    std::vector<bool> latent = m.latent_mask(frame_mask);
    std::vector<bool> frozen(m.params().size(), false);
    frozen[m.phoneme_embedding_index()] = true;
    Matrix<double> target = losses::target_phoneme_distribution(m.encode_speech_value(feats),
                                                                 m.params().value("phoneme_embedding"));
    rs.emplace_back("MSP", oracle::check_model_loss(m, [&](Tape<double>& t) {
      return losses::msp_op(m.phoneme_logits(t, m.encode_speech(t, feats, &frame_mask), false), target, latent);
    }, frozen, 15));
  }

  bool ok = true;
  std::string d;
  for (const auto& [name, r] : rs) {
    ok = ok && r.checked >= 50 && r.max_rel_err < 1e-4;
    d += name + " " + fmt(r.max_rel_err, 2) + " (" + std::to_string(r.checked) + ") ";
  }
  const double secs = seconds_since(t0);
  ok = ok && secs < 300;
  return {ok, "max rel err (params checked): " + d + "in " + fmt(secs, 3) + " s; 64-bit, tol 1e-4, >= 50 params, < 5 min"};
}

// 3 -------------------------------------------------------------------------
template <typename T>
double worst_row_sum_error(int fixtures, uint64_t seed, double* max_logit) {
  Rng rng(seed);
  double worst = 0;
  for (int f = 0; f < fixtures; ++f) {
    const int frames = uniform_int(rng, 1, 12), dim = uniform_int(rng, 1, 16), I = uniform_int(rng, 2, 30);
    // scale spreads logits from near zero to roughly +-50
    const double scale = std::pow(10.0, -2.0 + 3.0 * uniform01(rng)) / std::sqrt(static_cast<double>(dim));
    Matrix<T> H(frames, dim), E(I, dim);
    for (auto& v : H.storage()) v = static_cast<T>(normal01(rng) * std::sqrt(scale * 50.0 / 3.0));
    for (auto& v : E.storage()) v = static_cast<T>(normal01(rng) * std::sqrt(scale * 50.0 / 3.0));
    if (f % 10 == 0) {  // pin one pair of logits at exactly +-50
      for (auto& v : H.storage()) v = 0;
      for (auto& v : E.storage()) v = 0;
      H(0, 0) = 5;
      E(0, 0) = 10;
      E(I - 1, 0) = -10;
    }
    for (int t = 0; t < frames; ++t) {
      for (int i = 0; i < I; ++i) {
        double z = 0;
        for (int k = 0; k < dim; ++k) z += static_cast<double>(H(t, k)) * static_cast<double>(E(i, k));
        *max_logit = std::max(*max_logit, std::abs(z));
      }
    }
    Matrix<T> p = losses::target_phoneme_distribution(H, E);
    for (int t = 0; t < frames; ++t) {
      double s = 0;
      bool finite = true;
      for (int i = 0; i < I; ++i) {
        finite = finite && std::isfinite(static_cast<double>(p(t, i))) && p(t, i) >= 0;
        s += static_cast<double>(p(t, i));
      }
      worst = std::max(worst, finite ? std::abs(s - 1.0) : INFINITY);
    }
  }
  return worst;
}

Outcome normalization() {
  double logit64 = 0, logit32 = 0;
  const double e64 = worst_row_sum_error<double>(1000, 31, &logit64);
  const double e32 = worst_row_sum_error<float>(1000, 31, &logit32);
  return {e64 < 1e-6 && e32 < 1e-6 && logit64 >= 50,
          "max |row sum - 1| " + fmt(e64, 3) + " (64-bit), " + fmt(e32, 3) + " (32-bit) over 1000 fixtures, |logit| up to " +
              fmt(logit64, 3) + "; tol 1e-6"};
}

// 4 -------------------------------------------------------------------------
Outcome kl_identity() {
  // forced identical: the "masked" forward masks nothing, so both forwards
  // see the same input
  Model<double> m(tiny_model());
  double worst_zero = 0, worst_ln = 0;
  for (uint64_t s = 0; s < 20; ++s) {
    auto x = random_features(10 + static_cast<int>(s), 5, 100 + s);
    const auto& E = m.params().value("phoneme_embedding");
    std::vector<bool> none(x.rows(), false);
    Matrix<double> target = losses::target_phoneme_distribution(m.encode_speech_value(x), E);
    Matrix<double> pred = losses::target_phoneme_distribution(m.encode_speech_value(x, &none), E);
    std::vector<bool> latent(target.rows(), true);
    worst_zero = std::max(worst_zero, std::abs(losses::loss_msp(target, pred, latent)));
  }
  for (int I = 2; I <= 30; ++I) {
    for (int positions = 1; positions <= 5; ++positions) {
      Matrix<double> onehot(positions, I), uni(positions, I, 1.0 / I);
      for (int t = 0; t < positions; ++t) onehot(t, (t * 7) % I) = 1.0;
      std::vector<bool> all(positions, true);
      const double per = losses::loss_msp(onehot, uni, all) / positions;
      worst_ln = std::max(worst_ln, std::abs(per - std::log(static_cast<double>(I))));
    }
  }
  return {worst_zero < 1e-9 && worst_ln < 1e-9,
          "identical forwards: max |loss| " + fmt(worst_zero, 3) + "; one-hot vs uniform: max |loss/pos - ln I| " +
              fmt(worst_ln, 3) + "; tol 1e-9"};
}

// 5 -------------------------------------------------------------------------
Outcome pseudo_code_pipeline() {
  const bool dedup = deduplicate(std::vector<int>{1, 1, 1, 2, 3, 3}) == TokenSeq{1, 2, 3};
  Rng rng(11);
  std::vector<TokenSeq> corpus;
  for (int i = 0; i < 300; ++i) {
    TokenSeq s(uniform_int(rng, 1, 30));
    for (int& v : s) v = uniform_int(rng, 0, 7);
    corpus.push_back(deduplicate(s));
  }
  BpeModel bpe = bpe_train(corpus, 8, 60);
  int round_trips = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    TokenSeq s(uniform_int(rng, 0, 30));
    for (int& v : s) v = uniform_int(rng, 0, 7);
    round_trips += bpe_decode(bpe, bpe_encode(bpe, s)) == s;
  }
  int monotone = 0;
  for (uint64_t s = 0; s < 20; ++s) {
    Rng r(s);
    Matrix<double> x(100, 3);
    for (double& v : x.storage()) v = normal01(r) + (uniform01(r) < 0.5 ? 3.0 : 0.0);
    auto km = kmeans_fit(x, 6, 100, 1e-10, s);
    bool ok = true;
    for (size_t i = 1; i < km.inertia_history.size(); ++i) ok = ok && km.inertia_history[i] <= km.inertia_history[i - 1];
    monotone += ok;
  }
  return {dedup && round_trips == 1000 && monotone == 20,
          std::string("dedup \"1 1 1 2 3 3\" -> \"1 2 3\": ") + (dedup ? "yes" : "no") + "; BPE round trips " +
              std::to_string(round_trips) + "/1000 (vocab " + std::to_string(bpe.vocab_size()) +
              "); monotone k-means inertia " + std::to_string(monotone) + "/20"};
}

// 6 -------------------------------------------------------------------------
Outcome scheduler() {
  TrainConfig cfg;
  int bad = 0, windows = 0;
  for (uint64_t seed : {1ULL, 2ULL, 3ULL, 77ULL}) {
    cfg.seed = seed;
    TaskSchedule sched = schedule_for(cfg, Stage::kStage2);
    for (int64_t start = 0; start < 600; ++start) {
      std::array<int, kNumTasks> n{};
      for (int64_t s = start; s < start + 12; ++s) ++n[static_cast<int>(sched.at(s))];
      bad += !(n[static_cast<int>(Task::kMsp)] == 4 && n[static_cast<int>(Task::kS2c)] == 4 &&
               n[static_cast<int>(Task::kP2t)] == 2 && n[static_cast<int>(Task::kPp)] == 1 &&
               n[static_cast<int>(Task::kS2t)] == 1);
      ++windows;
    }
  }
  return {bad == 0, std::to_string(windows - bad) + "/" + std::to_string(windows) +
                        " sliding 12-batch windows hold exactly MSP:4 S2C:4 P2T:2 PP:1 S2T:1 (4 seeds)"};
}

// 7 -------------------------------------------------------------------------
struct SmallSetup {
  SyntheticCorpus corpus;
  PseudoCodeArtifacts codes;
  TrainingData data;
  ModelConfig model;
};

SmallSetup small_setup() {
  SmallSetup x;
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
}

Outcome freeze_semantics() {
  const SmallSetup s = small_setup();
  auto one_step = [&](Task task, Model<float>& m) {
    TrainConfig c;
    c.batch_size = {2, 2, 2, 2, 2};
    c.enabled = {false, false, false, false, false};
    c.enabled[static_cast<int>(task)] = true;
    c.stage2_steps = 1;
    c.seed = 21;
    AdamState<float> opt;
    return train_stage(m, opt, s.data, c, Stage::kStage2, {});
  };
  Model<float> msp(s.model);
  const int e = msp.phoneme_embedding_index();
  const ParamStore<float> before = msp.params();
  TrainerState st = one_step(Task::kMsp, msp);
  const bool e_same = msp.params().value(e) == before.value(e);
  const bool moved = !(msp.params() == before);
  Model<float> pp(s.model);
  TrainerState st2 = one_step(Task::kPp, pp);
  const bool e_changed = !(pp.params().value(e) == before.value(e));
  return {st.next_step == 1 && e_same && moved && st2.last_loss > 0 && e_changed,
          std::string("MSP step: E ") + (e_same ? "bit-identical" : "CHANGED") + ", other params " +
              (moved ? "moved" : "static") + "; PP step (loss " + fmt(st2.last_loss) + "): E " +
              (e_changed ? "changed" : "UNCHANGED")};
}

// 8 -------------------------------------------------------------------------
Outcome span_statistics() {
  const double analytic = 1.0 - std::pow(1.0 - 0.07, 10);
  double total = 0;
  for (uint64_t s = 0; s < 200; ++s) {
    SpanMaskConfig cfg;
    cfg.start_prob = 0.07;
    cfg.span_len = 10;
    cfg.seed = s;
    total += masked_fraction(sample_span_mask(2000, cfg));
  }
  const double mean = total / 200;
  return {mean >= 0.45 && mean <= 0.58, "mean masked fraction " + fmt(mean) + " over 200 seeds (analytic " + fmt(analytic) +
                                            "); window [0.45, 0.58]"};
}

// 9 -------------------------------------------------------------------------
Outcome fusion_no_op() {
  int same_mu0 = 0, same_greedy = 0, same_exh = 0;
  for (uint64_t s = 0; s < 50; ++s) {
    oracle::TableScorer m(5, s), lm(5, s + 1000);
    BeamConfig cfg;
    cfg.beam_size = 4;
    cfg.max_len = 8;
    cfg.lm_weight = 0.0;
    auto with = beam_decode(m, &lm, cfg), without = beam_decode(m, nullptr, cfg);
    same_mu0 += with.tokens == without.tokens && with.score == without.score;
    cfg.beam_size = 1;
    auto b = beam_decode(m, nullptr, cfg), g = greedy_decode(m, cfg.max_len);
    same_greedy += b.tokens == g.tokens && b.terminated == g.terminated;
  }
  for (uint64_t s = 0; s < 50; ++s) {
    oracle::TableScorer m(4, s), lm(4, s + 77);
    BeamConfig cfg;
    cfg.beam_size = 125;
    cfg.max_len = 3;
    cfg.lm_weight = (s % 2) ? 0.5 : 0.0;
    auto b = beam_decode(m, &lm, cfg), e = oracle::exhaustive_decode(m, &lm, cfg);
    same_exh += b.tokens == e.tokens && std::abs(b.score - e.score) < 1e-12;
  }
  return {same_mu0 == 50 && same_greedy == 50 && same_exh == 50,
          "mu=0 equals no LM " + std::to_string(same_mu0) + "/50; beam 1 equals greedy " + std::to_string(same_greedy) +
              "/50; wide beam equals exhaustive (V=4, max_len=3) " + std::to_string(same_exh) + "/50"};
}

// 10-12 ----------------------------------------------------------------------

struct Budget {
  int64_t stage1 = 1000;
  int64_t stage2 = 12000;
  int64_t finetune = 500;
};

struct SeedRun {
  uint64_t seed = 0;
  double ter_full = 0, ter_scratch = 0, ter_noft = 0;
  double secs_c10 = 0;
  std::vector<AblationRow> ablation;
};

SeedRun run_seed(uint64_t seed, const Budget& budget, bool with_ablation, int threads) {
  SeedRun r;
  r.seed = seed;
  const auto t0 = clk::now();
  SyntheticCorpusConfig cc;
  cc.seed = seed;
  SyntheticCorpus corpus = synth_corpus(cc);
  std::vector<const Matrix<float>*> sp;
  for (const auto* u : corpus.select(UttKind::kSpeech, Split::kTrain)) sp.push_back(&*u->features);
  PseudoCodeConfig pc;
  pc.seed = seed;
  auto cb = train_codebook(sp, cc.feature_dim, pc);
  PseudoCodeArtifacts art{cb.featurizer, cb.kmeans.codebook, train_code_bpe(sp, cb.featurizer, cb.kmeans.codebook, pc)};
  TrainingData data = TrainingData::build(corpus.utterances, corpus.lexicon, &art);

  ModelConfig mc;
  mc.feature_dim = cc.feature_dim;
  mc.phoneme_vocab = cc.phoneme_vocab_size;
  mc.text_vocab = cc.text_vocab_size;
  mc.code_vocab = pc.code_vocab;
  mc.seed = seed;
  TrainConfig tc;
  tc.seed = seed;
  tc.stage1_steps = budget.stage1;
  tc.stage2_steps = budget.stage2;
  tc.finetune_steps = budget.finetune;
  tc.threads = threads;
  BeamConfig beam;  // no external LM: the comparison is about the acoustic model

  Model<float> full(mc);
  pretrain(full, data, tc, {});
  r.ter_noft = evaluate_ter(full, data.paired_dev, nullptr, beam, threads).ter;
  finetune(full, data, tc, {});
  r.ter_full = evaluate_ter(full, data.paired_dev, nullptr, beam, threads).ter;
  Model<float> scratch(mc);
  finetune(scratch, data, tc, {});
  r.ter_scratch = evaluate_ter(scratch, data.paired_dev, nullptr, beam, threads).ter;
  r.secs_c10 = seconds_since(t0);
  std::cerr << "  seed " << seed << ": full " << r.ter_full << " scratch " << r.ter_scratch << " no-FT " << r.ter_noft
            << " (" << fmt(r.secs_c10, 4) << " s)\n";

  if (with_ablation) {
    std::vector<AblationVariant> variants;
    for (const auto& v : standard_ablation_variants()) {
      if (!v.removed.empty()) variants.push_back(v);
    }
    r.ablation = ablate(mc, data, tc, variants, nullptr, beam, {});
    for (const auto& row : r.ablation) {
      std::cerr << "    " << row.name << " TER " << row.ter << (row.collapsed ? " collapsed" : "")
                << " min entropy " << row.min_pred_entropy << (row.failed ? " FAILED " + row.error : "") << "\n";
    }
  }
  return r;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Outcome pretraining_benefit(const std::vector<SeedRun>& runs) {
  bool ok = !runs.empty();
  std::string d;
  double worst_secs = 0;
  for (const auto& r : runs) {
    const double rel = (r.ter_scratch - r.ter_full) / r.ter_scratch;
    ok = ok && rel >= 0.10;
    worst_secs = std::max(worst_secs, r.secs_c10);
    d += "seed " + std::to_string(r.seed) + ": " + fmt(r.ter_full) + " vs " + fmt(r.ter_scratch) + " (-" + fmt(100 * rel, 3) +
         "%) ";
  }
  ok = ok && worst_secs < 1800;
  return {ok, "dev TER pretrain+FT vs scratch+FT: " + d + "; need >= 10% relative on every seed; slowest seed " +
                  fmt(worst_secs, 4) + " s (< 30 min)"};
}

Outcome ablation_order(const std::vector<SeedRun>& runs) {
  if (runs.empty() || runs.front().ablation.empty()) return {false, "no ablation runs"};
  std::vector<double> full;
  for (const auto& r : runs) full.push_back(r.ter_full);
  const double med_full = median(full);
  bool order = true;
  std::string d = "median TER full " + fmt(med_full) + ";";
  int collapsed = 0;
  for (size_t k = 0; k < runs.front().ablation.size(); ++k) {
    const AblationRow& first = runs.front().ablation[k];
    std::vector<double> ters;
    bool failed = false;
    for (const auto& r : runs) {
      ters.push_back(r.ablation[k].ter);
      failed = failed || r.ablation[k].failed;
    }
    const double med = median(ters);
    if (first.removed.size() == 1) {
      order = order && !failed && med_full <= med;
      d += " " + first.name + " " + fmt(med);
    }
    if (first.name == "-PP&S2C") {
      for (const auto& r : runs) collapsed += r.ablation[k].collapsed;
      d += "; -PP&S2C TER " + fmt(med);
    }
  }
  const int need = static_cast<int>(runs.size()) / 2 + 1;
  d += "; collapse alert without PP and S2C in " + std::to_string(collapsed) + "/" + std::to_string(runs.size()) +
       " seeds (need " + std::to_string(need) + ")";
  return {order && collapsed >= need, d};
}

Outcome no_ft_decoding(const std::vector<SeedRun>& runs) {
  std::vector<double> noft, ft;
  std::string d;
  for (const auto& r : runs) {
    noft.push_back(r.ter_noft);
    ft.push_back(r.ter_full);
    d += " seed " + std::to_string(r.seed) + " " + fmt(r.ter_noft) + "/" + fmt(r.ter_full);
  }
  if (runs.empty()) return {false, "no runs"};
  const double ratio = median(noft) / median(ft);
  return {ratio <= 1.2, "median dev TER no-FT " + fmt(median(noft)) + " vs FT " + fmt(median(ft)) + " (ratio " + fmt(ratio) +
                            ", need <= 1.2);" + d};
}

// 13 ------------------------------------------------------------------------

const char* kTinyExperiment = R"({
  "data": {"n_text_utts": 400, "n_unlabeled_speech_utts": 60, "n_paired_utts": 60,
           "text_vocab_size": 12, "phoneme_vocab_size": 6, "feature_dim": 6, "text_dev_fraction": 0.1},
  "codes": {"teacher_dim": 4, "clusters": 8, "code_vocab": 16},
  "model": {"model_dim": 16, "ffn_dim": 32, "heads": 2,
            "layers_speech_enc": 1, "layers_shared_enc": 1, "layers_dec": 1},
  "train": {"stage1_steps": 8, "stage2_steps": 24, "finetune_steps": 12, "warmup_steps": 5,
            "eval_interval": 4, "dev_eval_utts": 20, "checkpoint_interval": 4,
            "batch_size": {"msp": 2, "s2c": 2, "p2t": 2, "pp": 2, "s2t": 2}},
  "decode": {"beam_size": 2, "max_len": 12}
})";

std::map<std::string, std::string> artifact_hashes(const fs::path& dir) {
  std::map<std::string, std::string> out;
  std::ifstream is(dir / "provenance.jsonl");
  std::string line;
  while (std::getline(is, line)) {
    auto j = nlohmann::json::parse(line);
    out[j["artifact"]] = j["hash"];
  }
  return out;
}

bool cli_ok(const std::vector<std::string>& args, std::string* why) {
  std::ostringstream out, err;
  if (run(args, out, err) == kExitOk) return true;
  *why = err.str();
  return false;
}

Outcome determinism() {
  scratch::TempDir tmp("acceptance-determinism");
  const std::string cfg = tmp / "tiny.json";
  std::ofstream(cfg) << kTinyExperiment;
  const std::vector<std::string> steps{"synth-data", "train-codebook", "train-bpe", "encode-units", "train-lm",
                                       "pretrain",   "finetune",       "decode"};
  std::string why;
  auto pipeline = [&](const std::string& dir, const std::string& threads) {
    for (const auto& s : steps) {
      if (!cli_ok({"-q", "-d", dir, "--config", cfg, "--threads", threads, s}, &why)) return false;
    }
    return true;
  };
  const std::string a = tmp / "a", b = tmp / "b";
  if (!pipeline(a, "1") || !pipeline(b, "2")) return {false, "pipeline failed: " + why};
  const auto ha = artifact_hashes(a), hb = artifact_hashes(b);
  const bool repeat = ha == hb && ha.size() == 11;

  // Interrupt b at every pretrain and finetune checkpoint in turn by rolling
  // the directory back to it, then resume.
  int resumes = 0, exact = 0;
  for (const std::string& cmd : {std::string("pretrain"), std::string("finetune")}) {
    const fs::path ckdir = fs::path(b) / "checkpoints" / cmd;
    std::vector<fs::path> cks;
    for (const auto& e : fs::directory_iterator(ckdir)) cks.push_back(e.path());
    auto key = [](const fs::path& p) {
      const std::string n = p.filename().string();
      const size_t dash = n.rfind('-');
      return std::make_pair(n.substr(0, dash), std::stoll(n.substr(dash + 1)));
    };
    std::sort(cks.begin(), cks.end(), [&](const fs::path& x, const fs::path& y) { return key(x) < key(y); });
    const std::string artifact = "artifacts/" + std::string(cmd == "pretrain" ? "pretrained" : "finetuned") + ".ckpt";
    for (size_t keep = cks.size(); keep-- > 0;) {
      for (size_t j = keep + 1; j < cks.size(); ++j) fs::remove(cks[j]);
      cks.resize(keep + 1);
      fs::remove(fs::path(b) / artifact);
      if (!cli_ok({"-q", "-d", b, "--threads", "2", cmd, "--resume"}, &why)) return {false, "resume failed: " + why};
      ++resumes;
      exact += hex64(fnv1a64_file((fs::path(b) / artifact).string())) == ha.at(artifact);
    }
  }
  return {repeat && resumes > 0 && exact == resumes,
          "second run (threads 1 vs 2) reproduced " + std::to_string(ha.size()) + " artifacts " +
              (repeat ? "bit-identically" : "WITH DIFFERENCES") + "; resumed runs bit-exact " + std::to_string(exact) + "/" +
              std::to_string(resumes)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::vector<int> only;
  int seeds = 3;
  int threads = 1;
  Budget budget;
  app.add_option("--criteria", only, "Run only these criteria (1-13)")->delimiter(',');
  app.add_option("--seeds", seeds, "Seeds for criteria 10-12")->check(CLI::PositiveNumber);
  app.add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);
  app.add_option("--stage1-steps", budget.stage1);
  app.add_option("--stage2-steps", budget.stage2);
  app.add_option("--finetune-steps", budget.finetune);
  CLI11_PARSE(app, argc, argv);
  std::set<int> want(only.begin(), only.end());
  auto selected = [&](int c) { return want.empty() || want.count(c); };

  int failed = 0;
  auto report = [&](int n, const std::string& name, const Outcome& o) {
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << n << "] " << name << ": " << o.detail << std::endl;
    failed += !o.pass;
  };
  auto timed = [&](int n, const std::string& name, Outcome (*fn)()) {
    if (!selected(n)) return;
    report(n, name, fn());
  };

  timed(1, "CTC oracle equivalence", ctc_oracle);
  timed(2, "gradient checks, five losses", gradient_checks);
  timed(3, "target distribution normalization", normalization);
  timed(4, "KL identity", kl_identity);
  timed(5, "pseudo-code pipeline", pseudo_code_pipeline);
  timed(6, "scheduler exactness", scheduler);
  timed(7, "freeze semantics", freeze_semantics);
  timed(8, "span-mask statistics", span_statistics);
  timed(9, "fusion no-op and beam equivalences", fusion_no_op);

  if (selected(10) || selected(11) || selected(12)) {
    std::cerr << "training budget: stage1 " << budget.stage1 << ", stage2 " << budget.stage2 << ", finetune "
              << budget.finetune << "; " << seeds << " seeds\n";
    std::vector<SeedRun> runs;
    for (int s = 1; s <= seeds; ++s) runs.push_back(run_seed(static_cast<uint64_t>(s), budget, selected(11), threads));
    if (selected(10)) report(10, "pre-training beats training from scratch", pretraining_benefit(runs));
    if (selected(11)) report(11, "ablation ordering and collapse", ablation_order(runs));
    if (selected(12)) report(12, "no-FT decoding close to fine-tuned", no_ft_decoding(runs));
  }
  timed(13, "determinism and resume", determinism);

  std::cout << (failed ? std::to_string(failed) + " criteria failed" : std::string("all selected criteria passed"))
            << std::endl;
  return failed ? 1 : 0;
}
