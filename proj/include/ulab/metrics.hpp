// SPDX-License-Identifier: Apache-2.0
//
// Evaluation metrics. Text metrics tokenise by lowercasing and splitting on
// whitespace; punctuation stays attached to its word.

#pragma once

#include "ulab/corpus.hpp"
#include "ulab/model.hpp"
#include "ulab/tokenizer.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace ulab {

std::vector<std::string> text_tokens(std::string_view text);

struct RougeScore {
  double recall = 0.0;
  double precision = 0.0;
  double f1 = 0.0;
};

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b);
RougeScore rouge_l(std::span<const std::string> candidate, std::span<const std::string> reference);
RougeScore rouge_l(std::string_view candidate, std::string_view reference);

/// Sentence BLEU-4, uniform weights, brevity penalty, no smoothing.
double bleu(std::span<const std::string> candidate, std::span<const std::string> reference);
double bleu(std::string_view candidate, std::string_view reference);

/// correct / sum(perturbed), all normalised probabilities.
double answer_probability_ratio(double correct, std::span<const double> perturbed);

/// geometric_mean(perturbed) / paraphrase.
double truth_ratio(std::span<const double> perturbed, double paraphrase);

/// Harmonic mean of exactly nine scores in [0, 1]; zero if any score is zero.
double model_utility(std::span<const double> scores);

struct KsResult {
  double statistic = 0.0;
  double lambda = 0.0;
  double p_value = 1.0;
};

/// Two-sided two-sample Kolmogorov-Smirnov statistic.
double ks_statistic(std::span<const double> a, std::span<const double> b);
/// Q(lambda) = 2 sum_{k>=1} (-1)^(k-1) exp(-2 k^2 lambda^2), k <= 100, clamped to [0, 1].
double kolmogorov_q(double lambda);
KsResult ks_test(std::span<const double> a, std::span<const double> b);
/// p-value of ks_test on the truth-ratio samples of the two models.
double forget_quality(std::span<const double> unlearned, std::span<const double> retained);

struct BleuRouge {
  double bleu = 0.0;
  double rouge = 0.0;
};

/// |BLEU_u - BLEU_r| + |ROUGE_u - ROUGE_r|
double fq_gap(const BleuRouge& unlearned, const BleuRouge& retained);

struct RocCurve {
  std::vector<double> thresholds;  // ascending; a score <= threshold is called a member
  std::vector<double> tpr;
  std::vector<double> fpr;
  double auc = 0.5;
};

/// Lower scores are more member-like. AUC = P(member < nonmember) + P(tie) / 2,
/// evaluated exactly as (2 wins + ties) / (2 n m).
RocCurve mia_auc(std::span<const double> member_scores, std::span<const double> nonmember_scores);

/// (auc_unlearned - auc_retrained) / auc_retrained * 100
double privleak(double auc_unlearned, double auc_retrained);

// ---------------------------------------------------------------------------
// Model-based metrics.

struct AnswerScores {
  double correct = 0.0;     // normalised probability of the answer
  double paraphrase = 0.0;  // of the paraphrase, or of the answer when absent
  std::vector<double> perturbed;
};

AnswerScores answer_scores(const LanguageModel& model, const Vocabulary& vocab, const QARecord& record);

/// Mean answer-token negative log-likelihood.
double answer_nll(const LanguageModel& model, const Vocabulary& vocab, const QARecord& record);

/// Greedy answer to a question, leading whitespace removed.
std::string generate_answer(const LanguageModel& model, const Vocabulary& vocab, const std::string& question,
                            int max_new_tokens = 32);

struct VerbMemResult {
  double score = 0.0;  // [0, 100]
  std::size_t evaluated = 0;
  std::size_t skipped = 0;
};

/// Mean ROUGE-L F1 x 100 between the greedy continuation of each passage's
/// first `prefix_tokens` tokens and its true continuation. Passages shorter
/// than prefix_tokens + 1 tokens are skipped with a warning; throws when all are.
VerbMemResult verbmem(const LanguageModel& model, const Vocabulary& vocab, std::span<const std::string> passages,
                      int prefix_tokens);

/// Passage text of a record for verbmem: prompt and answer as trained.
std::string record_passage(const QARecord& r);

/// Mean ROUGE-L F1 x 100 between generated and reference answers.
double knowmem(const LanguageModel& model, const Vocabulary& vocab, std::span<const QARecord> records,
               int max_new_tokens = 32);

/// knowmem on the retain records.
double utility_preservation(const LanguageModel& model, const Vocabulary& vocab, std::span<const QARecord> retain,
                            int max_new_tokens = 32);

// ---------------------------------------------------------------------------

/// One row of results. Missing values serialise as null in JSON and "n/a" in CSV.
struct MetricReport {
  std::string method;
  std::optional<double> r;
  std::optional<double> forget_quality;
  std::optional<double> model_utility;
  std::optional<double> forget_rouge;
  std::optional<double> retain_rouge;
  std::optional<double> fq_gap;
  std::optional<double> perplexity;
  std::optional<double> bleu;
  std::optional<double> verbmem;
  std::optional<double> knowmem_forget;
  std::optional<double> knowmem_retain;
  std::optional<double> privleak;
  std::optional<double> mia_auc;
  bool diverged = false;
  std::optional<std::uint64_t> diverged_at_step;
  std::string inputs_digest;

  /// Throws std::domain_error when a present score is outside its range.
  void validate() const;
  bool operator==(const MetricReport&) const = default;
};

nlohmann::json to_json(const MetricReport& r);
MetricReport metric_report_from_json(const nlohmann::json& j);

/// CSV columns: method, r, FQ, MU, F-RL, R-RL, FQ-Gap, PPL, BLEU, VerbMem,
/// KnowMem_f, KnowMem_r, PrivLeak, MIA-AUC, diverged.
std::string metric_csv_header();
std::string metric_csv_row(const MetricReport& r);
/// Parses rows written by metric_csv_row (header line included).
std::vector<MetricReport> parse_metric_csv(const std::string& text);

/// Shortest round-trip decimal form used in CSV and text reports.
std::string format_number(double v);

}  // namespace ulab
