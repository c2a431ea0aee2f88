// mmspeech/cli.hpp

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

// Command-line entry point. One subcommand per process, all state lives in
// an experiment directory (see FORMATS.md for the layout).

#pragma once

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "mmspeech/data_synth.hpp"
#include "mmspeech/decoder_eval.hpp"
#include "mmspeech/model.hpp"
#include "mmspeech/pseudo_codes.hpp"
#include "mmspeech/trainer.hpp"

namespace mmspeech {

// Everything a pipeline run depends on. A single top-level seed feeds every
// module; model dimensions that follow from the data are filled in by
// resolve(), not configured.
struct ExperimentConfig {
  uint64_t seed = 1;
  SyntheticCorpusConfig data;
  PseudoCodeConfig codes;
  ModelConfig model;
  TrainConfig train;
  NgramConfig lm;
  BeamConfig decode;
  std::vector<std::string> ablate_variants;  // empty: the standard eight

  // Propagates seed and data-derived dimensions, then validates all parts.
  void resolve();
  std::string to_json() const;
  // Strict: unknown keys and wrong types are kConfig errors naming the key.
  static ExperimentConfig from_json(const std::string& text, const std::string& source);
};

// Applies MMSPEECH__section__key=value overrides onto a JSON config text.
// Values are parsed as JSON when possible, otherwise taken as strings.
std::string apply_env_overrides(const std::string& config_json, const std::map<std::string, std::string>& env);
std::map<std::string, std::string> config_env();

// Exit codes, one per diagnostic class.
enum ExitCode {
  kExitOk = 0,
  kExitFailure = 1,
  kExitUsage = 2,
  kExitConfig = 3,
  kExitDependency = 4,
  kExitIo = 5,
  kExitData = 6,
  kExitDiverged = 7,
};

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

}  // namespace mmspeech
