// SPDX-License-Identifier: Apache-2.0
//
// Config-driven experiment pipeline: synthesise a corpus, finetune an
// original and a retained model, unlearn, evaluate, and write reports.
//
// Output tree under ExperimentConfig::output_dir:
//   corpus/   *.jsonl corpora and tokenizer.json
//   ckpt/     finetuned.ulab, retained.ulab, unlearned-*.ulab
//   normal/   normal_set.jsonl
//   reports/  metrics.json, table.csv, sign_profile.jsonl, token_probs.jsonl, summary.txt
//   manifest.json, timings.json

#pragma once

#include "ulab/corpus.hpp"
#include "ulab/metrics.hpp"
#include "ulab/model.hpp"
#include "ulab/normal_data.hpp"
#include "ulab/objectives.hpp"
#include "ulab/smoothing.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace ulab {

/// SHA-1 of raw bytes, lowercase hex.
std::string sha1_hex(const std::string& bytes);
/// Git blob id: SHA-1 of "blob <size>\0" followed by the bytes.
std::string git_blob_hash(const std::string& bytes);
std::string read_file(const std::filesystem::path& path);
/// Writes via a temporary file and rename.
void write_file(const std::filesystem::path& path, const std::string& bytes);

enum class RMode { fixed, closed_form_once, per_step };
std::string to_string(RMode m);
RMode r_mode_from_string(const std::string& s);

struct TrainSettings {
  int epochs = 5;
  double learning_rate = 1e-4;
  int batch_size = 32;
  bool operator==(const TrainSettings&) const = default;
};

struct ExperimentConfig {
  std::vector<std::string> stages = {"synth", "finetune", "unlearn", "eval"};
  std::uint64_t seed = 1234;
  CorpusSpec corpus;
  ModelConfig model;
  /// Finetuning supervises the whole sequence; unlearning supervises answers.
  TrainSettings finetune{60, 3e-3, 32};
  UnlearnMethodConfig method = [] {
    UnlearnMethodConfig m;
    m.K = 8;
    return m;
  }();
  /// The default forget split has 20 records, so small batches are what
  /// give several steps per epoch.
  TrainSettings unlearn{15, 1e-4, 4};
  std::vector<double> r_sweep = {-2, -0.8, -0.4, -0.2, 0, 0.2, 0.4, 0.8};
  RMode r_mode = RMode::fixed;
  double divergence_ppl = 1e6;
  NormalMode normal_mode = NormalMode::similarity;
  double normal_threshold = 0.3;
  GeneratorEndpointConfig endpoint;
  /// Fixture file replayed instead of the network in endpoint mode.
  std::string endpoint_fixture;
  /// Synthetic passages run 20 to 30 tokens.
  int verbmem_prefix = 12;
  int max_new_tokens = 32;
  std::filesystem::path output_dir = "out";

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
  bool has_stage(const std::string& s) const;
  /// The r values an unlearn stage runs: r_sweep for SGA, a single placeholder otherwise.
  std::vector<double> unlearn_rates() const;
};

nlohmann::json to_json(const ExperimentConfig& c);
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
void save_experiment_config(const ExperimentConfig& c, const std::filesystem::path& path);

/// SHA-1 of the canonical JSON of every setting that affects results
/// (stages and output directory excluded).
std::string config_digest(const ExperimentConfig& c);

/// Raised when a stage fails; the partial manifest has been written.
struct StageError : std::runtime_error {
  StageError(std::string stage_name, const std::string& what)
      : std::runtime_error("stage " + stage_name + " failed: " + what), stage(std::move(stage_name)) {}
  std::string stage;
};

struct RunResult {
  nlohmann::json manifest;
  /// Optimizer steps taken by this invocation (zero when every stage was reused).
  std::uint64_t training_steps = 0;
  std::vector<std::string> stages_run;
  std::vector<std::string> stages_reused;
};

RunResult run_pipeline(const ExperimentConfig& config);

/// Verifies that every file named in a manifest exists and matches its hash.
void verify_manifest(const nlohmann::json& manifest, const std::filesystem::path& root);

// ---------------------------------------------------------------------------
// Pieces the pipeline is built from, exposed for tests and the CLI.

struct Workspace {
  Vocabulary vocab;
  Corpora corpora;
  int context = 128;

  /// Everything the original model is finetuned on.
  std::vector<QARecord> finetune_records() const;
  /// Everything the retained model is trained on (finetune set minus forget).
  std::vector<QARecord> retained_records() const;
};

/// Trains from Checkpoint::initialize(model) with a seeded per-epoch shuffle.
Checkpoint train_model(const ModelConfig& model, const Vocabulary& vocab, std::vector<QARecord> records,
                       const TrainSettings& settings, bool supervise_prompt, std::uint64_t shuffle_seed,
                       std::uint64_t* steps = nullptr);

struct UnlearnOutcome {
  Checkpoint checkpoint;
  std::uint64_t steps = 0;
  bool diverged = false;
  std::optional<std::uint64_t> diverged_at_step;
  double last_retain_ppl = 0.0;
  double r_used = 0.0;
  std::vector<double> losses;
};

/// Unlearns `original` with a gradient method. Every epoch walks the forget
/// set in fixed order; retain PPL is checked after each epoch and the run
/// stops once it exceeds `divergence_ppl` or the loss is non-finite.
UnlearnOutcome unlearn_gradient(const Checkpoint& original, const Workspace& ws, const NormalSet& normals,
                                const UnlearnMethodConfig& method, const TrainSettings& settings, RMode r_mode,
                                double divergence_ppl);

/// Checkpoint finetuned further on the forget set (task-vector and WHP baselines).
Checkpoint reinforce(const Checkpoint& original, const Workspace& ws, const TrainSettings& settings);

/// Mean over records of answer-ROUGE-L recall of greedy generations.
double rouge_recall(const LanguageModel& model, const Vocabulary& vocab, std::span<const QARecord> records,
                    int max_new_tokens);

/// exp of the token-weighted mean negative log-likelihood of prompt and answer.
double sequence_perplexity(const LanguageModel& model, const Vocabulary& vocab, std::span<const QARecord> records);

struct EvalReference {
  const LanguageModel* retained = nullptr;
  std::vector<double> retained_truth_ratios;
  BleuRouge retained_forget_scores;
  double retained_auc = 0.5;
};

EvalReference make_eval_reference(const LanguageModel& retained, const Workspace& ws, int max_new_tokens);

/// Every metric for one model.
MetricReport evaluate_model(const LanguageModel& model, const Workspace& ws, const EvalReference& ref,
                            int verbmem_prefix, int max_new_tokens);

// ---------------------------------------------------------------------------

struct ProbeResult {
  SignProfile profile;
  /// Closed-form rate for the whole forget set, when defined.
  std::optional<SmoothingRateDiagnostics<double>> set_rate;
};

/// Per-instance sign of <g_f, u> at `ck`, with each record's companions as the normal losses.
ProbeResult probe_r(const Checkpoint& ck, const Workspace& ws, const NormalSet& normals);

std::string serialize_sign_profile(const SignProfile& p);
SignProfile parse_sign_profile(const std::string& text);

/// r-sweep through run_pipeline; one (r, report) per entry of config.r_sweep.
std::vector<std::pair<double, MetricReport>> sweep_r(const ExperimentConfig& config);

/// Writes table.csv (rows deduplicated by config digest, method and r),
/// summary.txt naming the two best r rows, and returns the rows written.
std::vector<MetricReport> export_tables(const std::vector<std::filesystem::path>& manifests,
                                        const std::filesystem::path& out_dir);

/// Best r != 0 among non-diverged SGA rows: highest FQ, then highest retain ROUGE-L.
std::optional<MetricReport> best_r_row(const std::vector<MetricReport>& rows);

}  // namespace ulab
