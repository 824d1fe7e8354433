// SPDX-License-Identifier: Apache-2.0
//
// Question/answer records, their JSON Lines form, and the synthetic
// fictional-author corpus used by the experiments.

#pragma once

#include "ulab/model.hpp"
#include "ulab/tokenizer.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ulab {

struct QARecord {
  std::string id;
  std::string question;
  std::string answer;
  std::optional<std::string> paraphrased_answer;
  std::vector<std::string> perturbed_answers;

  /// Throws std::invalid_argument on an empty id, question or answer.
  void validate() const;
  bool operator==(const QARecord&) const = default;
};

void to_json(nlohmann::json& j, const QARecord& r);
void from_json(const nlohmann::json& j, QARecord& r);

/// One compact JSON object per line. Duplicate ids are rejected on read and write.
std::string serialize_corpus(std::span<const QARecord> records);
std::vector<QARecord> parse_corpus(const std::string& text);
void write_corpus(const std::filesystem::path& path, std::span<const QARecord> records);
std::vector<QARecord> read_corpus(const std::filesystem::path& path);

struct CorpusSpec {
  int authors = 40;
  int qa_per_author = 5;
  double forget_fraction = 0.1;
  double holdout_fraction = 0.1;
  /// Extra trained-on subsets standing in for well-known authors and
  /// general world knowledge; both are also seen by the retained model.
  int known_authors = 4;
  int world_facts = 12;

  void validate() const;
  bool operator==(const CorpusSpec&) const = default;
};

struct Corpora {
  std::vector<QARecord> forget;
  std::vector<QARecord> retain;
  std::vector<QARecord> holdout;
  std::vector<QARecord> known_authors;
  std::vector<QARecord> world_facts;
};

/// Deterministic in (spec, seed). Splits are by author: the first
/// round(forget_fraction * authors) shuffled authors are forgotten, the next
/// round(holdout_fraction * authors) are held out, the rest are retained.
Corpora synth_corpus(const CorpusSpec& spec, std::uint64_t seed);

/// Prompt text for a question; the answer follows after a single space.
std::string prompt_text(const std::string& question);

/// Tokenised prompt + " " + answer + end token. Only the answer tokens (and
/// the end token) are supervised unless `supervise_prompt` is set.
TokenSequence encode_qa(const Vocabulary& vocab, const std::string& question, const std::string& answer,
                        bool supervise_prompt = false);

std::vector<int> encode_prompt(const Vocabulary& vocab, const std::string& question);
std::vector<int> encode_answer(const Vocabulary& vocab, const std::string& answer);

/// Consecutive batches of at most `batch_size` records, in order.
std::vector<SequenceBatch> make_qa_batches(const Vocabulary& vocab, std::span<const QARecord> records,
                                           int batch_size, int context, bool supervise_prompt = false);

}  // namespace ulab
