// mmspeech/trainer.hpp

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

// Two-stage multi-task training. Every batch is single-task; the task for
// step s comes from a fixed seeded permutation of one ratio cycle. All batch
// contents, masks, noise and dropout are derived from (seed, stage, step), so
// a run resumed from a checkpoint replays the uninterrupted run exactly.

#pragma once

#include <array>
#include <iosfwd>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "mmspeech/data_synth.hpp"
#include "mmspeech/decoder_eval.hpp"
#include "mmspeech/lexicon.hpp"
#include "mmspeech/losses.hpp"
#include "mmspeech/masking.hpp"
#include "mmspeech/model.hpp"
#include "mmspeech/pseudo_codes.hpp"

namespace mmspeech {

enum class Stage { kStage1 = 1, kStage2 = 2, kFinetune = 3 };
const char* stage_name(Stage s);

// Per-task arrays are indexed by Task (MSP, PP, S2C, P2T, S2T).
struct TrainConfig {
  int64_t stage1_steps = 1000;
  int64_t stage2_steps = 2000;
  int64_t finetune_steps = 500;
  std::array<int, kNumTasks> batch_size{8, 8, 8, 8, 8};
  std::array<int, kNumTasks> ratios{4, 1, 4, 2, 1};
  std::array<bool, kNumTasks> enabled{true, true, true, true, true};
  losses::LossWeights weights;
  double lr = 1e-3;
  int64_t warmup_steps = 200;
  double clip_norm = 5.0;  // global gradient norm; <= 0 disables
  AdamConfig adam;
  uint64_t seed = 1;
  int64_t checkpoint_interval = 0;  // 0: no periodic checkpoints
  // Stage-1 convergence: dev P2T loss every eval_interval steps, stop after
  // `patience` evaluations without improvement.
  int64_t eval_interval = 100;
  int patience = 5;
  int dev_eval_utts = 200;
  NoiseConfig noise;
  SpanMaskConfig span;
  double collapse_floor = 0.0;  // <= 0: ln(I) / 10
  int threads = 1;

  void validate() const;
  double lr_at(int64_t step) const;
  bool task_enabled(Task t) const { return enabled[static_cast<int>(t)]; }
};

// Sum of ratios of the enabled tasks (12 for the defaults).
int cycle_length(const TrainConfig& cfg);

class TaskSchedule {
 public:
  // Slots are laid out MSP, S2C, P2T, PP, S2T by ratio, then permuted once
  // with the seed. The same permutation repeats every cycle.
  TaskSchedule(const std::array<int, kNumTasks>& ratios, const std::array<bool, kNumTasks>& enabled, uint64_t seed);
  Task at(int64_t step) const { return cycle_[static_cast<size_t>(step % static_cast<int64_t>(cycle_.size()))]; }
  int cycle_length() const { return static_cast<int>(cycle_.size()); }
  const std::vector<Task>& cycle() const { return cycle_; }

 private:
  std::vector<Task> cycle_;
};

TaskSchedule schedule_for(const TrainConfig& cfg, Stage stage);

// Parameter names held fixed while a task's step is applied.
struct FreezePolicy {
  std::array<std::vector<std::string>, kNumTasks> frozen;

  // MSP freezes the phoneme embedding; every other task updates it.
  static FreezePolicy standard();
  std::vector<bool> mask(Task task, const ParamStore<float>& params) const;
};

struct TextExample {
  TokenSeq text;
  TokenSeq phonemes;
};

struct SpeechExample {
  const Matrix<float>* features = nullptr;
  TokenSeq codes;
};

struct PairedExample {
  std::string id;
  const Matrix<float>* features = nullptr;
  TokenSeq text;
  TokenSeq phonemes;
};

struct PseudoCodeArtifacts {
  TeacherFeaturizer featurizer;
  Codebook codebook;
  BpeModel bpe;
};

// Task-ready views over a loaded corpus. Feature matrices stay owned by the
// shared utterance list, so copies of TrainingData are cheap and safe.
struct TrainingData {
  Lexicon lexicon;
  std::vector<TextExample> text_train, text_dev;
  std::vector<SpeechExample> speech_train;
  std::vector<PairedExample> paired_train, paired_dev, paired_test;
  bool has_codes = false;
  int code_vocab = 0;

  // codes == nullptr leaves speech_train without pseudo-codes (S2C then
  // refuses to run).
  static TrainingData build(std::vector<Utterance> utts, const Lexicon& lex, const PseudoCodeArtifacts* codes);

 private:
  std::shared_ptr<const std::vector<Utterance>> owned_;
};

struct TrainerState {
  Stage stage = Stage::kStage1;
  int64_t next_step = 0;
  bool converged = false;  // stage 1 stopped on patience
  double best_dev_loss = std::numeric_limits<double>::infinity();
  int bad_evals = 0;
  int64_t skipped_batches = 0;
  int64_t ctc_infeasible = 0;
  int64_t collapse_alerts = 0;
  int64_t first_collapse_step = -1;
  double min_pred_entropy = std::numeric_limits<double>::infinity();
  double last_loss = 0.0;

  std::string to_json() const;
  static TrainerState from_json(const std::string& text);
  bool operator==(const TrainerState&) const = default;
};

struct TrainHooks {
  std::ostream* metrics = nullptr;  // one JSON record per step
  std::ostream* log = nullptr;      // one JSON event per line
  std::string checkpoint_dir;       // empty: never write checkpoints
  // Return after this many completed steps of the stage, as if interrupted.
  int64_t stop_after = -1;
};

// Runs (or continues, from state.next_step) one stage. The optimizer state
// is the caller's; each stage normally starts from a fresh one.
TrainerState train_stage(Model<float>& model, AdamState<float>& opt, const TrainingData& data,
                         const TrainConfig& cfg, Stage stage, const TrainHooks& hooks, TrainerState state = {});

std::string checkpoint_name(Stage stage, int64_t step);
ModelCheckpoint make_checkpoint(const Model<float>& model, const AdamState<float>& opt, const TrainerState& state);

struct PretrainReport {
  TrainerState stage1;
  TrainerState stage2;
  bool ran_stage1 = false;
};

// Stage 1 runs when P2T is enabled with a positive ratio and step budget.
bool runs_stage1(const TrainConfig& cfg);

// Stage 1 (only when runs_stage1) then stage 2, each with fresh Adam.
PretrainReport pretrain(Model<float>& model, const TrainingData& data, const TrainConfig& cfg,
                        const TrainHooks& hooks);
TrainerState finetune(Model<float>& model, const TrainingData& data, const TrainConfig& cfg, const TrainHooks& hooks);

// --- evaluation ------------------------------------------------------------

// Mean per-token P2T loss on noised dev text; the noise for dev utterance i
// is fixed by (seed, i) so successive evaluations are comparable.
double dev_p2t_loss(const Model<float>& model, const TrainingData& data, const TrainConfig& cfg);
// Teacher-forced argmax accuracy on the same noised dev text (eos included).
double dev_p2t_accuracy(const Model<float>& model, const TrainingData& data, const TrainConfig& cfg);
// Accuracy of always predicting the most frequent training target symbol.
double unigram_baseline_accuracy(const TrainingData& data, const TrainConfig& cfg);
// Mean per-token teacher-forced S2T loss on paired dev.
double dev_s2t_loss(const Model<float>& model, const TrainingData& data, int threads);

struct TerReport {
  double ter = 0.0;
  std::vector<HypothesisRecord> hypotheses;
  int unterminated = 0;
};

TerReport evaluate_ter(const Model<float>& model, const std::vector<PairedExample>& set, const SequenceScorer* lm,
                       const BeamConfig& beam, int threads);

// --- ablation --------------------------------------------------------------

struct AblationVariant {
  std::string name;
  std::vector<Task> removed;
};

// full, -P2T, -MSP, -S2C, -MSP&S2C, -PP, -S2T, -PP&S2C
std::vector<AblationVariant> standard_ablation_variants();

struct AblationRow {
  std::string name;
  std::vector<Task> removed;
  int64_t stage2_steps = 0;
  bool ran_stage1 = false;
  bool failed = false;
  std::string error;
  double ter = 0.0;
  bool collapsed = false;
  double min_pred_entropy = std::numeric_limits<double>::infinity();
};

// Each variant: fresh init, stage 1 (shared when P2T is kept), stage 2 with
// the removed tasks' slots deleted from the cycle, fine-tuning, dev TER.
// A failing variant is recorded and the run continues.
std::vector<AblationRow> ablate(const ModelConfig& model_cfg, const TrainingData& data, const TrainConfig& base,
                                const std::vector<AblationVariant>& variants, const SequenceScorer* lm,
                                const BeamConfig& beam, const TrainHooks& hooks);
std::string ablation_table(const std::vector<AblationRow>& rows);

}  // namespace mmspeech
