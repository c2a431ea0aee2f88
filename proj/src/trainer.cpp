// src/trainer.cpp

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

#include "mmspeech/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

#include "json.hpp"

namespace mmspeech {

using losses::ctc_min_frames;
using losses::LossBreakdown;
using losses::metrics_record;
using losses::total_loss;

const char* stage_name(Stage s) {
  switch (s) {
    case Stage::kStage1: return "stage1";
    case Stage::kStage2: return "stage2";
    case Stage::kFinetune: return "finetune";
  }
  return "?";
}

void TrainConfig::validate() const {
  if (stage1_steps < 0 || stage2_steps < 0 || finetune_steps < 0) fail(ErrorKind::kConfig, "train: step counts must be >= 0");
  bool any = false;
  for (int k = 0; k < kNumTasks; ++k) {
    const char* name = task_name(static_cast<Task>(k));
    if (ratios[k] < 0) fail(ErrorKind::kConfig, std::string("train: negative ratio for ") + name);
    if (batch_size[k] < 1) fail(ErrorKind::kConfig, std::string("train: batch size for ") + name + " must be >= 1");
    if (!(weights.lambda[k] >= 0)) fail(ErrorKind::kConfig, std::string("train: lambda for ") + name + " must be >= 0");
    any = any || (enabled[k] && ratios[k] > 0);
  }
  if (!any) fail(ErrorKind::kConfig, "train: no task enabled with a positive ratio");
  if (!(lr > 0)) fail(ErrorKind::kConfig, "train: lr must be > 0");
  if (warmup_steps < 0) fail(ErrorKind::kConfig, "train: warmup_steps must be >= 0");
  if (checkpoint_interval < 0) fail(ErrorKind::kConfig, "train: checkpoint_interval must be >= 0");
  if (eval_interval < 1 || patience < 1 || dev_eval_utts < 1) {
    fail(ErrorKind::kConfig, "train: eval_interval, patience and dev_eval_utts must be >= 1");
  }
  if (threads < 1) fail(ErrorKind::kConfig, "train: threads must be >= 1");
  noise.validate();
  span.validate();
}

double TrainConfig::lr_at(int64_t step) const {
  const double s = static_cast<double>(step + 1);
  if (warmup_steps == 0) return lr / std::sqrt(s);
  const double w = static_cast<double>(warmup_steps);
  return lr * std::min(s / w, std::sqrt(w / s));
}

int cycle_length(const TrainConfig& cfg) {
  int n = 0;
  for (int k = 0; k < kNumTasks; ++k) n += cfg.enabled[k] ? cfg.ratios[k] : 0;
  return n;
}

TaskSchedule::TaskSchedule(const std::array<int, kNumTasks>& ratios, const std::array<bool, kNumTasks>& enabled,
                           uint64_t seed) {
  static constexpr Task kOrder[] = {Task::kMsp, Task::kS2c, Task::kP2t, Task::kPp, Task::kS2t};
  for (Task t : kOrder) {
    const int k = static_cast<int>(t);
    if (ratios[k] < 0) fail(ErrorKind::kConfig, "schedule: negative ratio");
    if (enabled[k]) cycle_.insert(cycle_.end(), ratios[k], t);
  }
  if (cycle_.empty()) fail(ErrorKind::kConfig, "schedule: no task enabled");
  Rng rng(derive_seed(seed, 0x5c4ed));
  for (int i = static_cast<int>(cycle_.size()) - 1; i > 0; --i) std::swap(cycle_[i], cycle_[uniform_int(rng, 0, i)]);
}

TaskSchedule schedule_for(const TrainConfig& cfg, Stage stage) {
  const uint64_t seed = derive_seed(cfg.seed, static_cast<uint64_t>(stage));
  std::array<bool, kNumTasks> only{};
  switch (stage) {
    case Stage::kStage1:
      only[static_cast<int>(Task::kP2t)] = true;
      return TaskSchedule({0, 0, 0, 1, 0}, only, seed);
    case Stage::kFinetune:
      only[static_cast<int>(Task::kS2t)] = true;
      return TaskSchedule({0, 0, 0, 0, 1}, only, seed);
    case Stage::kStage2: break;
  }
  return TaskSchedule(cfg.ratios, cfg.enabled, seed);
}

FreezePolicy FreezePolicy::standard() {
  FreezePolicy p;
  p.frozen[static_cast<int>(Task::kMsp)] = {"phoneme_embedding"};
  return p;
}

std::vector<bool> FreezePolicy::mask(Task task, const ParamStore<float>& params) const {
  std::vector<bool> m(params.size(), false);
  for (const auto& name : frozen[static_cast<int>(task)]) m[params.index(name)] = true;
  return m;
}

TrainingData TrainingData::build(std::vector<Utterance> utts, const Lexicon& lex, const PseudoCodeArtifacts* codes) {
  TrainingData d;
  d.lexicon = lex;
  d.owned_ = std::make_shared<const std::vector<Utterance>>(std::move(utts));
  d.has_codes = codes != nullptr;
  if (codes) d.code_vocab = codes->bpe.vocab_size();
  for (const Utterance& u : *d.owned_) {
    switch (u.kind) {
      case UttKind::kText: {
        if (!u.text) fail(ErrorKind::kInsufficientData, "training data: text utterance " + u.id + " has no text");
        TextExample ex{*u.text, text_to_phonemes(lex, *u.text)};
        if (u.split == Split::kTrain) d.text_train.push_back(std::move(ex));
        else if (u.split == Split::kDev) d.text_dev.push_back(std::move(ex));
        break;
      }
      case UttKind::kSpeech: {
        if (!u.features) fail(ErrorKind::kInsufficientData, "training data: speech utterance " + u.id + " has no features");
        if (u.split != Split::kTrain) break;
        SpeechExample ex{&*u.features, {}};
        if (codes) ex.codes = speech_to_pseudocodes(codes->featurizer, codes->codebook, codes->bpe, *u.features);
        d.speech_train.push_back(std::move(ex));
        break;
      }
      case UttKind::kPaired: {
        if (!u.features || !u.text) fail(ErrorKind::kInsufficientData, "training data: paired utterance " + u.id + " is incomplete");
        PairedExample ex{u.id, &*u.features, *u.text, text_to_phonemes(lex, *u.text)};
        auto& dst = u.split == Split::kTrain ? d.paired_train : u.split == Split::kDev ? d.paired_dev : d.paired_test;
        dst.push_back(std::move(ex));
        break;
      }
    }
  }
  return d;
}

// --- trainer state ---------------------------------------------------------

namespace {

nlohmann::json finite_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }
double finite_or_inf(const nlohmann::json& j) {
  return j.is_null() ? std::numeric_limits<double>::infinity() : j.get<double>();
}

}  // namespace

std::string TrainerState::to_json() const {
  nlohmann::ordered_json j;
  j["stage"] = stage_name(stage);
  j["next_step"] = next_step;
  j["converged"] = converged;
  j["best_dev_loss"] = finite_or_null(best_dev_loss);
  j["bad_evals"] = bad_evals;
  j["skipped_batches"] = skipped_batches;
  j["ctc_infeasible"] = ctc_infeasible;
  j["collapse_alerts"] = collapse_alerts;
  j["first_collapse_step"] = first_collapse_step;
  j["min_pred_entropy"] = finite_or_null(min_pred_entropy);
  j["last_loss"] = last_loss;
  return j.dump();
}

TrainerState TrainerState::from_json(const std::string& text) {
  TrainerState s;
  try {
    auto j = nlohmann::json::parse(text);
    const std::string st = j.at("stage");
    if (st == "stage1") s.stage = Stage::kStage1;
    else if (st == "stage2") s.stage = Stage::kStage2;
    else if (st == "finetune") s.stage = Stage::kFinetune;
    else fail(ErrorKind::kParse, "trainer state: unknown stage '" + st + "'");
    s.next_step = j.at("next_step");
    s.converged = j.at("converged");
    s.best_dev_loss = finite_or_inf(j.at("best_dev_loss"));
    s.bad_evals = j.at("bad_evals");
    s.skipped_batches = j.at("skipped_batches");
    s.ctc_infeasible = j.at("ctc_infeasible");
    s.collapse_alerts = j.at("collapse_alerts");
    s.first_collapse_step = j.at("first_collapse_step");
    s.min_pred_entropy = finite_or_inf(j.at("min_pred_entropy"));
    s.last_loss = j.at("last_loss");
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kParse, std::string("trainer state: ") + e.what());
  }
  return s;
}

std::string checkpoint_name(Stage stage, int64_t step) {
  return std::string("ckpt-") + stage_name(stage) + "-" + std::to_string(step) + ".bin";
}

ModelCheckpoint make_checkpoint(const Model<float>& model, const AdamState<float>& opt, const TrainerState& state) {
  ModelCheckpoint ck;
  ck.config = model.config();
  ck.params = model.params();
  ck.has_optimizer = true;
  ck.optimizer = opt;
  ck.trainer_state = state.to_json();
  return ck;
}

// --- one training step -----------------------------------------------------

namespace {

enum Stream : uint64_t { kBatch = 1, kMask = 2, kNoise = 3, kDropout = 4, kDevNoise = 5 };

uint64_t stream(const TrainConfig& cfg, Stage stage, int64_t step, Stream s, uint64_t i = 0) {
  return derive_seed(cfg.seed, static_cast<uint64_t>(stage) * 16 + s, static_cast<uint64_t>(step), i);
}

TokenSeq with_bos(const DecoderVocab& v, std::span<const int> seq) {
  TokenSeq in{v.bos()};
  in.insert(in.end(), seq.begin(), seq.end());
  return in;
}

TokenSeq with_eos(const DecoderVocab& v, std::span<const int> seq) {
  TokenSeq out(seq.begin(), seq.end());
  out.push_back(v.eos());
  return out;
}

size_t pool_size(const TrainingData& d, Task t) {
  switch (t) {
    case Task::kMsp:
    case Task::kS2c: return d.speech_train.size();
    case Task::kPp:
    case Task::kS2t: return d.paired_train.size();
    case Task::kP2t: return d.text_train.size();
  }
  return 0;
}

const char* pool_name(Task t) {
  switch (t) {
    case Task::kMsp:
    case Task::kS2c: return "unlabeled speech (train)";
    case Task::kPp:
    case Task::kS2t: return "paired speech-text (train)";
    case Task::kP2t: return "text (train)";
  }
  return "?";
}

struct Job {
  int index = 0;
  bool feasible = true;
  int count = 0;                  // normalizer contribution
  std::vector<bool> frame_mask;   // MSP
  std::vector<bool> latent_mask;  // MSP
  TokenSeq noisy;                 // P2T
};

struct JobResult {
  GradientSet<float> grads;
  double loss = 0.0;
  double pred_entropy = 0.0;    // summed over masked rows
  double target_entropy = 0.0;  // summed over masked rows
  std::vector<double> pred_mass;  // masked-row sum of predicted distributions
};

struct StepOutcome {
  LossBreakdown breakdown;
  bool applied = false;
};

std::vector<Job> plan_batch(const Model<float>& model, const TrainingData& data, const TrainConfig& cfg, Stage stage,
                            int64_t step, Task task) {
  const int b = cfg.batch_size[static_cast<int>(task)];
  const size_t pool = pool_size(data, task);
  Rng rng(stream(cfg, stage, step, kBatch));
  std::vector<Job> jobs(b);
  for (int i = 0; i < b; ++i) {
    Job& j = jobs[i];
    j.index = uniform_int(rng, 0, static_cast<int>(pool) - 1);
    switch (task) {
      case Task::kMsp: {
        const auto& f = *data.speech_train[j.index].features;
        SpanMaskConfig sc = cfg.span;
        sc.seed = stream(cfg, stage, step, kMask, i);
        j.frame_mask = sample_span_mask(f.rows(), sc);
        j.latent_mask = model.latent_mask(j.frame_mask);
        j.count = static_cast<int>(std::count(j.latent_mask.begin(), j.latent_mask.end(), true));
        break;
      }
      case Task::kS2c: j.count = static_cast<int>(data.speech_train[j.index].codes.size()) + 1; break;
      case Task::kPp: {
        const auto& ex = data.paired_train[j.index];
        j.feasible = model.config().downsampled_length(ex.features->rows()) >= ctc_min_frames(ex.phonemes);
        j.count = j.feasible ? static_cast<int>(ex.phonemes.size()) : 0;
        break;
      }
      case Task::kP2t: {
        const auto& ex = data.text_train[j.index];
        NoiseConfig nc = cfg.noise;
        nc.seed = stream(cfg, stage, step, kNoise, i);
        j.noisy = noise_phonemes(ex.phonemes, data.lexicon, nc).noisy;
        j.count = static_cast<int>(ex.text.size()) + 1;
        break;
      }
      case Task::kS2t: j.count = static_cast<int>(data.paired_train[j.index].text.size()) + 1; break;
    }
  }
  return jobs;
}

// Forward + backward for one example; the loss is scaled by `scale` before
// backward so per-example gradients already carry lambda / N.
JobResult run_job(const Model<float>& model, const TrainingData& data, Task task, const Job& job,
                  const std::vector<bool>& frozen, float scale, uint64_t dropout_seed) {
  JobResult r;
  r.grads = GradientSet<float>(model.params());
  if (!job.feasible) return r;
  Tape<float> tape(&model.params());
  tape.set_frozen(frozen);
  Rng drop(dropout_seed);
  Rng* dr = model.config().dropout > 0 ? &drop : nullptr;
  Var<float> loss;
  switch (task) {
    case Task::kMsp: {
      const auto& f = *data.speech_train[job.index].features;
      const Matrix<float>& E = model.params().value("phoneme_embedding");
      // target branch: unmasked input, no dropout, nothing recorded
      Matrix<float> target = losses::target_phoneme_distribution(model.encode_speech_value(f), E);
      Var<float> h = model.encode_speech(tape, f, &job.frame_mask, dr);
      loss = losses::msp_op(model.phoneme_logits(tape, h, false), target, job.latent_mask);
      Matrix<float> pred = losses::target_phoneme_distribution(tape.value(h), E);
      r.pred_mass.assign(pred.cols(), 0.0);
      for (int t = 0; t < pred.rows(); ++t) {
        if (!job.latent_mask[t]) continue;
        for (int i = 0; i < pred.cols(); ++i) {
          const double p = pred(t, i), q = target(t, i);
          r.pred_mass[i] += p;
          if (p > 0) r.pred_entropy -= p * std::log(p);
          if (q > 0) r.target_entropy -= q * std::log(q);
        }
      }
      break;
    }
    case Task::kS2c: {
      const auto& ex = data.speech_train[job.index];
      const DecoderVocab v = model.vocab(OutputSpace::kCodes);
      Var<float> h = model.encode_speech(tape, *ex.features, nullptr, dr);
      loss = losses::cross_entropy_op(model.decoder_log_probs(tape, h, with_bos(v, ex.codes), OutputSpace::kCodes, dr),
                                      std::span<const int>(with_eos(v, ex.codes)));
      break;
    }
    case Task::kPp: {
      const auto& ex = data.paired_train[job.index];
      Var<float> h = model.encode_speech(tape, *ex.features, nullptr, dr);
      loss = losses::ctc_op(model.phoneme_logits(tape, h, true), std::span<const int>(ex.phonemes));
      break;
    }
    case Task::kP2t: {
      const auto& ex = data.text_train[job.index];
      const DecoderVocab v = model.vocab(OutputSpace::kText);
      Var<float> h = model.encode_phonemes(tape, job.noisy, dr);
      loss = losses::cross_entropy_op(model.decoder_log_probs(tape, h, with_bos(v, ex.text), OutputSpace::kText, dr),
                                      std::span<const int>(with_eos(v, ex.text)));
      break;
    }
    case Task::kS2t: {
      const auto& ex = data.paired_train[job.index];
      const DecoderVocab v = model.vocab(OutputSpace::kText);
      Var<float> h = model.encode_speech(tape, *ex.features, nullptr, dr);
      loss = losses::cross_entropy_op(model.decoder_log_probs(tape, h, with_bos(v, ex.text), OutputSpace::kText, dr),
                                      std::span<const int>(with_eos(v, ex.text)));
      break;
    }
  }
  r.loss = tape.scalar(loss);
  tape.backward(ag::scale(loss, scale));
  tape.collect(r.grads);
  return r;
}

StepOutcome train_step(Model<float>& model, AdamState<float>& opt, const TrainingData& data, const TrainConfig& cfg,
                       Stage stage, int64_t step, Task task, const std::vector<bool>& frozen) {
  StepOutcome out;
  std::vector<Job> jobs = plan_batch(model, data, cfg, stage, step, task);
  int64_t norm = 0;
  for (const Job& j : jobs) {
    norm += j.count;
    if (!j.feasible) ++out.breakdown.ctc_infeasible;
  }
  if (task == Task::kPp) out.breakdown.ctc_valid_paths = out.breakdown.ctc_infeasible == 0;
  if (norm == 0) return out;  // every example infeasible: nothing to learn from

  const double lambda = cfg.weights.lambda[static_cast<int>(task)];
  const float scale = static_cast<float>(lambda / static_cast<double>(norm));
  std::vector<JobResult> results(jobs.size());
  parallel_for(static_cast<int>(jobs.size()), cfg.threads, [&](int i) {
    results[i] = run_job(model, data, task, jobs[i], frozen, scale, stream(cfg, stage, step, kDropout, i));
  });

  // fixed-order reduction keeps results independent of the thread count
  GradientSet<float> grads(model.params());
  double loss = 0, pred_h = 0, target_h = 0;
  std::vector<double> mass;
  for (const JobResult& r : results) {
    grads.accumulate(r.grads);
    loss += r.loss;
    pred_h += r.pred_entropy;
    target_h += r.target_entropy;
    if (mass.empty()) mass.assign(r.pred_mass.size(), 0.0);
    for (size_t i = 0; i < r.pred_mass.size(); ++i) mass[i] += r.pred_mass[i];
  }
  const double normalized = loss / static_cast<double>(norm);
  if (!std::isfinite(normalized) || !grads.all_finite()) {
    std::ostringstream os;
    os << "trainer: non-finite " << task_name(task) << " loss at " << stage_name(stage) << " step " << step
       << " (summed loss " << loss << ", normalizer " << norm << ")";
    fail(ErrorKind::kNonFinite, os.str());
  }
  if (cfg.clip_norm > 0) {
    const double g = std::sqrt(grads.squared_norm());
    if (g > cfg.clip_norm) grads.scale(static_cast<float>(cfg.clip_norm / g));
  }
  adam_step(model.params(), grads, opt, cfg.adam, cfg.lr_at(step), frozen);
  out.applied = true;

  LossBreakdown& b = out.breakdown;
  b[task] = normalized;
  if (task == Task::kMsp) {
    b.masked_frames = static_cast<int>(norm);
    b.mean_pred_entropy = pred_h / static_cast<double>(norm);
    b.mean_target_entropy = target_h / static_cast<double>(norm);
    double h = 0;
    for (double m : mass) {
      const double p = m / static_cast<double>(norm);
      if (p > 0) h -= p * std::log(p);
    }
    b.marginal_pred_entropy = h;
  }
  b = total_loss(b, cfg.weights);
  return out;
}

void log_event(const TrainHooks& hooks, const nlohmann::ordered_json& j) {
  if (hooks.log) *hooks.log << j.dump() << '\n';
}

int64_t stage_steps(const TrainConfig& cfg, Stage stage) {
  switch (stage) {
    case Stage::kStage1: return cfg.stage1_steps;
    case Stage::kStage2: return cfg.stage2_steps;
    case Stage::kFinetune: return cfg.finetune_steps;
  }
  return 0;
}

}  // namespace

TrainerState train_stage(Model<float>& model, AdamState<float>& opt, const TrainingData& data, const TrainConfig& cfg,
                         Stage stage, const TrainHooks& hooks, TrainerState state) {
  cfg.validate();
  state.stage = stage;
  const TaskSchedule sched = schedule_for(cfg, stage);
  for (Task t : sched.cycle()) {
    if (pool_size(data, t) == 0) {
      fail(ErrorKind::kInsufficientData, std::string("trainer: task ") + task_name(t) + " scheduled but no " +
                                             pool_name(t) + " utterances are available");
    }
    if (t == Task::kS2c) {
      if (!data.has_codes) fail(ErrorKind::kDependency, "trainer: S2C needs pseudo-codes; run train-codebook and train-bpe first");
      if (data.code_vocab > model.config().code_vocab) {
        fail(ErrorKind::kDimension, "trainer: code vocabulary " + std::to_string(data.code_vocab) +
                                        " exceeds the model's code_vocab " + std::to_string(model.config().code_vocab));
      }
    }
  }
  const FreezePolicy policy = FreezePolicy::standard();
  const double floor = cfg.collapse_floor > 0 ? cfg.collapse_floor
                                              : std::log(static_cast<double>(model.config().phoneme_vocab)) / 10.0;
  const int64_t total = stage_steps(cfg, stage);
  if (opt.m.empty()) opt = AdamState<float>::zeros(model.params());

  while (state.next_step < total && !state.converged) {
    if (hooks.stop_after >= 0 && state.next_step >= hooks.stop_after) return state;
    const int64_t step = state.next_step;
    const Task task = sched.at(step);
    StepOutcome o = train_step(model, opt, data, cfg, stage, step, task, policy.mask(task, model.params()));
    state.ctc_infeasible += o.breakdown.ctc_infeasible;
    if (!o.applied) {
      ++state.skipped_batches;
      log_event(hooks, {{"event", "skipped_batch"}, {"stage", stage_name(stage)}, {"step", step},
                        {"task", task_name(task)}, {"ctc_infeasible", o.breakdown.ctc_infeasible}});
    } else {
      state.last_loss = o.breakdown.total;
      if (hooks.metrics) *hooks.metrics << metrics_record(step, stage_name(stage), task, o.breakdown) << '\n';
      if (task == Task::kMsp) {
        state.min_pred_entropy = std::min(state.min_pred_entropy, o.breakdown.mean_pred_entropy);
        if (o.breakdown.mean_pred_entropy < floor) {
          if (state.collapse_alerts++ == 0) state.first_collapse_step = step;
          log_event(hooks, {{"event", "collapse_alert"}, {"stage", stage_name(stage)}, {"step", step},
                            {"pred_entropy", o.breakdown.mean_pred_entropy}, {"floor", floor}});
        }
      }
    }
    state.next_step = step + 1;

    if (stage == Stage::kStage1 && !data.text_dev.empty() && state.next_step % cfg.eval_interval == 0) {
      const double dev = dev_p2t_loss(model, data, cfg);
      if (dev < state.best_dev_loss) {
        state.best_dev_loss = dev;
        state.bad_evals = 0;
      } else if (++state.bad_evals >= cfg.patience) {
        state.converged = true;
      }
      log_event(hooks, {{"event", "dev_eval"}, {"stage", stage_name(stage)}, {"step", state.next_step},
                        {"dev_p2t_loss", dev}, {"bad_evals", state.bad_evals}, {"converged", state.converged}});
    }
    if (!hooks.checkpoint_dir.empty() && cfg.checkpoint_interval > 0 && state.next_step % cfg.checkpoint_interval == 0) {
      const std::string path = (std::filesystem::path(hooks.checkpoint_dir) / checkpoint_name(stage, state.next_step)).string();
      save_checkpoint(make_checkpoint(model, opt, state), path);
      log_event(hooks, {{"event", "checkpoint"}, {"path", path}});
    }
  }
  return state;
}

bool runs_stage1(const TrainConfig& cfg) {
  return cfg.task_enabled(Task::kP2t) && cfg.ratios[static_cast<int>(Task::kP2t)] > 0 && cfg.stage1_steps > 0;
}

PretrainReport pretrain(Model<float>& model, const TrainingData& data, const TrainConfig& cfg, const TrainHooks& hooks) {
  cfg.validate();
  PretrainReport rep;
  if (runs_stage1(cfg)) {
    if (data.text_train.empty()) fail(ErrorKind::kInsufficientData, "pretrain: stage 1 needs text utterances");
    AdamState<float> opt;
    rep.stage1 = train_stage(model, opt, data, cfg, Stage::kStage1, hooks);
    rep.ran_stage1 = true;
  }
  AdamState<float> opt;
  rep.stage2 = train_stage(model, opt, data, cfg, Stage::kStage2, hooks);
  return rep;
}

TrainerState finetune(Model<float>& model, const TrainingData& data, const TrainConfig& cfg, const TrainHooks& hooks) {
  AdamState<float> opt;
  return train_stage(model, opt, data, cfg, Stage::kFinetune, hooks);
}

// --- evaluation ------------------------------------------------------------

namespace {

struct P2tEval {
  double loss = 0;
  int64_t tokens = 0;
  int64_t correct = 0;
};

std::vector<P2tEval> p2t_dev_pass(const Model<float>& model, const TrainingData& data, const TrainConfig& cfg) {
  const int n = std::min(static_cast<int>(data.text_dev.size()), cfg.dev_eval_utts);
  if (n == 0) fail(ErrorKind::kEmpty, "dev P2T evaluation: no dev text");
  std::vector<P2tEval> out(n);
  const DecoderVocab v = model.vocab(OutputSpace::kText);
  parallel_for(n, cfg.threads, [&](int i) {
    const auto& ex = data.text_dev[i];
    NoiseConfig nc = cfg.noise;
    nc.seed = derive_seed(cfg.seed, kDevNoise, static_cast<uint64_t>(i));
    TokenSeq noisy = noise_phonemes(ex.phonemes, data.lexicon, nc).noisy;
    Tape<float> tape(&model.params());
    tape.set_recording(false);
    Var<float> lp = model.decoder_log_probs(tape, model.encode_phonemes(tape, noisy), with_bos(v, ex.text), OutputSpace::kText);
    const Matrix<float>& m = tape.value(lp);
    TokenSeq tgt = with_eos(v, ex.text);
    out[i].loss = losses::cross_entropy(m, std::span<const int>(tgt));
    out[i].tokens = static_cast<int64_t>(tgt.size());
    for (int r = 0; r < m.rows(); ++r) {
      auto row = m.row(r);
      out[i].correct += (std::max_element(row.begin(), row.end()) - row.begin()) == tgt[r];
    }
  });
  return out;
}

}  // namespace

double dev_p2t_loss(const Model<float>& model, const TrainingData& data, const TrainConfig& cfg) {
  double loss = 0;
  int64_t tokens = 0;
  for (const auto& e : p2t_dev_pass(model, data, cfg)) loss += e.loss, tokens += e.tokens;
  return loss / static_cast<double>(tokens);
}

double dev_p2t_accuracy(const Model<float>& model, const TrainingData& data, const TrainConfig& cfg) {
  int64_t correct = 0, tokens = 0;
  for (const auto& e : p2t_dev_pass(model, data, cfg)) correct += e.correct, tokens += e.tokens;
  return static_cast<double>(correct) / static_cast<double>(tokens);
}

double unigram_baseline_accuracy(const TrainingData& data, const TrainConfig& cfg) {
  if (data.text_train.empty() || data.text_dev.empty()) fail(ErrorKind::kEmpty, "unigram baseline: need train and dev text");
  const int eos = data.lexicon.text_vocab_size();
  std::map<int, int64_t> counts;
  for (const auto& ex : data.text_train) {
    for (int t : ex.text) ++counts[t];
    ++counts[eos];
  }
  int best = 0;
  int64_t bc = -1;
  for (const auto& [t, c] : counts) {
    if (c > bc) bc = c, best = t;
  }
  const int n = std::min(static_cast<int>(data.text_dev.size()), cfg.dev_eval_utts);
  int64_t hit = 0, tokens = 0;
  for (int i = 0; i < n; ++i) {
    for (int t : data.text_dev[i].text) hit += t == best;
    hit += best == eos;
    tokens += static_cast<int64_t>(data.text_dev[i].text.size()) + 1;
  }
  return static_cast<double>(hit) / static_cast<double>(tokens);
}

double dev_s2t_loss(const Model<float>& model, const TrainingData& data, int threads) {
  const int n = static_cast<int>(data.paired_dev.size());
  if (n == 0) fail(ErrorKind::kEmpty, "dev S2T evaluation: no paired dev utterances");
  const DecoderVocab v = model.vocab(OutputSpace::kText);
  std::vector<double> loss(n);
  std::vector<int64_t> tokens(n);
  parallel_for(n, threads, [&](int i) {
    const auto& ex = data.paired_dev[i];
    Tape<float> tape(&model.params());
    tape.set_recording(false);
    Var<float> lp = model.decoder_log_probs(tape, model.encode_speech(tape, *ex.features, nullptr), with_bos(v, ex.text),
                                            OutputSpace::kText);
    TokenSeq tgt = with_eos(v, ex.text);
    loss[i] = losses::cross_entropy(tape.value(lp), std::span<const int>(tgt));
    tokens[i] = static_cast<int64_t>(tgt.size());
  });
  double l = 0;
  int64_t t = 0;
  for (int i = 0; i < n; ++i) l += loss[i], t += tokens[i];
  return l / static_cast<double>(t);
}

TerReport evaluate_ter(const Model<float>& model, const std::vector<PairedExample>& set, const SequenceScorer* lm,
                       const BeamConfig& beam, int threads) {
  if (set.empty()) fail(ErrorKind::kEmpty, "TER evaluation: empty utterance set");
  std::vector<const Matrix<float>*> feats;
  std::vector<TokenSeq> refs;
  for (const auto& ex : set) {
    feats.push_back(ex.features);
    refs.push_back(ex.text);
  }
  auto hyps = decode_batch(model, feats, lm, beam, threads);
  TerReport rep;
  std::vector<TokenSeq> toks;
  for (size_t i = 0; i < hyps.size(); ++i) {
    toks.push_back(hyps[i].tokens);
    rep.unterminated += !hyps[i].terminated;
    rep.hypotheses.push_back({set[i].id, hyps[i].score, hyps[i].tokens});
  }
  rep.ter = token_error_rate(toks, refs);
  return rep;
}

// --- ablation --------------------------------------------------------------

std::vector<AblationVariant> standard_ablation_variants() {
  return {
      {"full", {}},
      {"-P2T", {Task::kP2t}},
      {"-MSP", {Task::kMsp}},
      {"-S2C", {Task::kS2c}},
      {"-MSP&S2C", {Task::kMsp, Task::kS2c}},
      {"-PP", {Task::kPp}},
      {"-S2T", {Task::kS2t}},
      {"-PP&S2C", {Task::kPp, Task::kS2c}},
  };
}

std::vector<AblationRow> ablate(const ModelConfig& model_cfg, const TrainingData& data, const TrainConfig& base,
                                const std::vector<AblationVariant>& variants, const SequenceScorer* lm,
                                const BeamConfig& beam, const TrainHooks& hooks) {
  base.validate();
  const int full_cycle = cycle_length(base);
  TrainHooks h = hooks;
  h.checkpoint_dir.clear();  // per-variant checkpoints would collide
  std::optional<ParamStore<float>> stage1;
  std::vector<AblationRow> rows;
  for (const auto& var : variants) {
    AblationRow row;
    row.name = var.name;
    row.removed = var.removed;
    log_event(hooks, {{"event", "ablation_variant"}, {"variant", var.name}});
    try {
      TrainConfig cfg = base;
      for (Task t : var.removed) cfg.enabled[static_cast<int>(t)] = false;
      cfg.validate();
      // each remaining task keeps its batch count from the full run
      cfg.stage2_steps = base.stage2_steps * cycle_length(cfg) / full_cycle;
      row.stage2_steps = cfg.stage2_steps;
      Model<float> model(model_cfg);
      if (cfg.task_enabled(Task::kP2t) && cfg.stage1_steps > 0) {
        if (!stage1) {
          AdamState<float> opt;
          train_stage(model, opt, data, cfg, Stage::kStage1, h);
          stage1 = model.params();
        } else {
          model.params() = *stage1;
        }
        row.ran_stage1 = true;
      }
      AdamState<float> opt;
      TrainerState s2 = train_stage(model, opt, data, cfg, Stage::kStage2, h);
      row.collapsed = s2.collapse_alerts > 0;
      row.min_pred_entropy = s2.min_pred_entropy;
      finetune(model, data, cfg, h);
      row.ter = evaluate_ter(model, data.paired_dev, lm, beam, cfg.threads).ter;
    } catch (const Error& e) {
      row.failed = true;
      row.error = e.what();
      log_event(hooks, {{"event", "ablation_failure"}, {"variant", var.name}, {"error", e.what()}});
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "variant\tstage2_steps\tstage1\tdev_ter\tcollapse\tmin_pred_entropy\tstatus\n";
  for (const auto& r : rows) {
    os << r.name << '\t' << r.stage2_steps << '\t' << (r.ran_stage1 ? "yes" : "no") << '\t';
    if (r.failed) os << "-";
    else os << r.ter;
    os << '\t' << (r.collapsed ? "yes" : "no") << '\t';
    if (std::isfinite(r.min_pred_entropy)) os << r.min_pred_entropy;
    else os << "-";
    os << '\t' << (r.failed ? "failed: " + r.error : "ok") << '\n';
  }
  return os.str();
}

}  // namespace mmspeech
