// SPDX-License-Identifier: Apache-2.0

#include "ulab/metrics.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>

namespace ulab {

std::vector<std::string> text_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

RougeScore rouge_l(std::span<const std::string> candidate, std::span<const std::string> reference) {
  RougeScore s;
  if (candidate.empty() || reference.empty()) return s;
  const double lcs = static_cast<double>(lcs_length(candidate, reference));
  if (lcs == 0) return s;
  s.recall = lcs / static_cast<double>(reference.size());
  s.precision = lcs / static_cast<double>(candidate.size());
  s.f1 = 2 * s.recall * s.precision / (s.recall + s.precision);
  return s;
}

RougeScore rouge_l(std::string_view candidate, std::string_view reference) {
  return rouge_l(text_tokens(candidate), text_tokens(reference));
}

double bleu(std::span<const std::string> candidate, std::span<const std::string> reference) {
  if (candidate.empty() || reference.empty()) return 0.0;
  double log_sum = 0;
  for (std::size_t n = 1; n <= 4; ++n) {
    if (candidate.size() < n) return 0.0;
    std::map<std::vector<std::string>, int> ref_counts, cand_counts;
    for (std::size_t i = 0; i + n <= reference.size(); ++i)
      ++ref_counts[{reference.begin() + static_cast<std::ptrdiff_t>(i), reference.begin() + static_cast<std::ptrdiff_t>(i + n)}];
    for (std::size_t i = 0; i + n <= candidate.size(); ++i)
      ++cand_counts[{candidate.begin() + static_cast<std::ptrdiff_t>(i), candidate.begin() + static_cast<std::ptrdiff_t>(i + n)}];
    int clipped = 0;
    for (const auto& [gram, c] : cand_counts) {
      auto it = ref_counts.find(gram);
      if (it != ref_counts.end()) clipped += std::min(c, it->second);
    }
    if (clipped == 0) return 0.0;
    log_sum += std::log(static_cast<double>(clipped) / static_cast<double>(candidate.size() - n + 1));
  }
  const double c = static_cast<double>(candidate.size()), r = static_cast<double>(reference.size());
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::exp(log_sum / 4.0);
}

double bleu(std::string_view candidate, std::string_view reference) {
  return bleu(text_tokens(candidate), text_tokens(reference));
}

double answer_probability_ratio(double correct, std::span<const double> perturbed) {
  if (perturbed.empty()) throw std::invalid_argument("answer_probability_ratio: no perturbed answers");
  double denom = 0;
  for (double p : perturbed) denom += p;
  if (!(denom > 0)) throw std::domain_error("answer_probability_ratio: perturbed probabilities sum to zero");
  return correct / denom;
}

double truth_ratio(std::span<const double> perturbed, double paraphrase) {
  if (perturbed.empty()) throw std::invalid_argument("truth_ratio: no perturbed answers");
  if (!(paraphrase > 0)) throw std::domain_error("truth_ratio: paraphrase probability is zero");
  double log_sum = 0;
  for (double p : perturbed) {
    if (p < 0) throw std::invalid_argument("truth_ratio: negative probability");
    log_sum += std::log(p);
  }
  return std::exp(log_sum / static_cast<double>(perturbed.size())) / paraphrase;
}

double model_utility(std::span<const double> scores) {
  if (scores.size() != 9) throw std::invalid_argument("model_utility: expected nine scores, got " + std::to_string(scores.size()));
  double inv = 0;
  for (double s : scores) {
    if (!(s >= 0 && s <= 1)) throw std::invalid_argument("model_utility: score outside [0, 1]");
    if (s == 0) return 0.0;
    inv += 1.0 / s;
  }
  return 9.0 / inv;
}

// ---------------------------------------------------------------------------

double ks_statistic(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("ks: empty sample");
  std::vector<double> x(a.begin(), a.end()), y(b.begin(), b.end());
  std::sort(x.begin(), x.end());
  std::sort(y.begin(), y.end());
  const double n = static_cast<double>(x.size()), m = static_cast<double>(y.size());
  std::size_t i = 0, j = 0;
  double d = 0;
  while (i < x.size() && j < y.size()) {
    const double v = std::min(x[i], y[j]);
    while (i < x.size() && x[i] == v) ++i;
    while (j < y.size() && y[j] == v) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / n - static_cast<double>(j) / m));
  }
  return d;
}

double kolmogorov_q(double lambda) {
  if (!(lambda > 0)) return 1.0;
  const double a2 = -2.0 * lambda * lambda;
  double fac = 2.0, sum = 0.0, previous = 0.0;
  for (int k = 1; k <= 100; ++k) {
    const double term = fac * std::exp(a2 * k * k);
    sum += term;
    if (std::abs(term) <= 1e-3 * previous || std::abs(term) <= 1e-8 * sum) return std::clamp(sum, 0.0, 1.0);
    fac = -fac;
    previous = std::abs(term);
  }
  // The series has not settled: lambda is tiny, where Q is 1 to double precision.
  return 1.0;
}

KsResult ks_test(std::span<const double> a, std::span<const double> b) {
  KsResult r;
  r.statistic = ks_statistic(a, b);
  const double n = static_cast<double>(a.size()), m = static_cast<double>(b.size());
  r.lambda = r.statistic * std::sqrt(n * m / (n + m));
  r.p_value = kolmogorov_q(r.lambda);
  return r;
}

double forget_quality(std::span<const double> unlearned, std::span<const double> retained) {
  return ks_test(unlearned, retained).p_value;
}

double fq_gap(const BleuRouge& u, const BleuRouge& r) { return std::abs(u.bleu - r.bleu) + std::abs(u.rouge - r.rouge); }

RocCurve mia_auc(std::span<const double> members, std::span<const double> nonmembers) {
  if (members.empty() || nonmembers.empty()) throw std::invalid_argument("mia_auc: empty score set");
  std::vector<std::pair<double, bool>> all;
  for (double s : members) all.emplace_back(s, true);
  for (double s : nonmembers) all.emplace_back(s, false);
  for (const auto& [s, _] : all)
    if (std::isnan(s)) throw std::invalid_argument("mia_auc: NaN score");
  std::sort(all.begin(), all.end(), [](const auto& x, const auto& y) { return x.first < y.first; });

  const std::uint64_t n = members.size(), m = nonmembers.size();
  std::uint64_t tp = 0, fp = 0, wins = 0, ties = 0;
  RocCurve roc;
  roc.thresholds.push_back(-std::numeric_limits<double>::infinity());
  roc.tpr.push_back(0.0);
  roc.fpr.push_back(0.0);
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    std::uint64_t a = 0, b = 0;
    while (j < all.size() && all[j].first == all[i].first) {
      (all[j].second ? a : b) += 1;
      ++j;
    }
    // Members in this group beat every nonmember strictly above it.
    wins += a * (m - fp - b);
    ties += a * b;
    tp += a;
    fp += b;
    roc.thresholds.push_back(all[i].first);
    roc.tpr.push_back(static_cast<double>(tp) / static_cast<double>(n));
    roc.fpr.push_back(static_cast<double>(fp) / static_cast<double>(m));
    i = j;
  }
  roc.auc = static_cast<double>(2 * wins + ties) / static_cast<double>(2 * n * m);
  return roc;
}

double privleak(double auc_unlearned, double auc_retrained) {
  if (!(auc_retrained > 0)) throw std::domain_error("privleak: retrained AUC is zero");
  return (auc_unlearned - auc_retrained) / auc_retrained * 100.0;
}

// ---------------------------------------------------------------------------

AnswerScores answer_scores(const LanguageModel& model, const Vocabulary& vocab, const QARecord& record) {
  const std::vector<int> prompt = encode_prompt(vocab, record.question);
  auto prob = [&](const std::string& a) {
    return score_sequence(model, prompt, encode_answer(vocab, a)).normalized_prob;
  };
  AnswerScores s;
  s.correct = prob(record.answer);
  s.paraphrase = record.paraphrased_answer ? prob(*record.paraphrased_answer) : s.correct;
  for (const std::string& p : record.perturbed_answers) s.perturbed.push_back(prob(p));
  return s;
}

double answer_nll(const LanguageModel& model, const Vocabulary& vocab, const QARecord& record) {
  return -score_sequence(model, encode_prompt(vocab, record.question), encode_answer(vocab, record.answer)).mean_log_prob;
}

namespace {

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

std::string generate_answer(const LanguageModel& model, const Vocabulary& vocab, const std::string& question,
                            int max_new_tokens) {
  const std::vector<int> prompt = encode_prompt(vocab, question);
  return trim(vocab.decode(generate(model, prompt, max_new_tokens)));
}

std::string record_passage(const QARecord& r) { return prompt_text(r.question) + " " + r.answer; }

VerbMemResult verbmem(const LanguageModel& model, const Vocabulary& vocab, std::span<const std::string> passages,
                      int prefix_tokens) {
  if (prefix_tokens < 1) throw std::invalid_argument("verbmem: prefix length must be positive");
  VerbMemResult out;
  const auto l = static_cast<std::size_t>(prefix_tokens);
  double total = 0;
  for (std::size_t p = 0; p < passages.size(); ++p) {
    const std::vector<int> text = vocab.encode(passages[p]);
    if (text.size() < l + 1) {
      spdlog::warn("verbmem: passage {} has {} tokens, needs at least {}; skipped", p, text.size(), l + 1);
      ++out.skipped;
      continue;
    }
    std::vector<int> prefix{Vocabulary::kBos};
    prefix.insert(prefix.end(), text.begin(), text.begin() + static_cast<std::ptrdiff_t>(l));
    const std::vector<int> truth(text.begin() + static_cast<std::ptrdiff_t>(l), text.end());
    const std::vector<int> gen = generate(model, prefix, static_cast<int>(truth.size()));
    total += rouge_l(vocab.decode(gen), vocab.decode(truth)).f1;
    ++out.evaluated;
  }
  if (out.evaluated == 0) throw std::invalid_argument("verbmem: every passage is shorter than the prefix");
  out.score = 100.0 * total / static_cast<double>(out.evaluated);
  return out;
}

double knowmem(const LanguageModel& model, const Vocabulary& vocab, std::span<const QARecord> records,
               int max_new_tokens) {
  if (records.empty()) throw std::invalid_argument("knowmem: empty record set");
  double total = 0;
  for (const QARecord& r : records)
    total += rouge_l(generate_answer(model, vocab, r.question, max_new_tokens), r.answer).f1;
  return 100.0 * total / static_cast<double>(records.size());
}

double utility_preservation(const LanguageModel& model, const Vocabulary& vocab, std::span<const QARecord> retain,
                            int max_new_tokens) {
  return knowmem(model, vocab, retain, max_new_tokens);
}

// ---------------------------------------------------------------------------

void MetricReport::validate() const {
  auto in = [](const std::optional<double>& v, double lo, double hi, const char* name) {
    if (v && !(*v >= lo && *v <= hi))
      throw std::domain_error(std::string("metric report: ") + name + " outside its range");
  };
  in(forget_quality, 0, 1, "forget quality");
  in(model_utility, 0, 1, "model utility");
  in(forget_rouge, 0, 1, "forget ROUGE-L");
  in(retain_rouge, 0, 1, "retain ROUGE-L");
  in(bleu, 0, 1, "BLEU");
  in(verbmem, 0, 100, "VerbMem");
  in(knowmem_forget, 0, 100, "KnowMem forget");
  in(knowmem_retain, 0, 100, "KnowMem retain");
  in(mia_auc, 0, 1, "MIA AUC");
  if (perplexity && std::isfinite(*perplexity) && *perplexity < 1.0 - 1e-12)
    throw std::domain_error("metric report: perplexity below 1");
  if (perplexity && !std::isfinite(*perplexity) && !diverged)
    throw std::domain_error("metric report: non-finite perplexity on a run that did not diverge");
}

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

namespace {

double parse_number(const std::string& s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  double v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw std::invalid_argument("not a number: '" + s + "'");
  return v;
}

nlohmann::json number_json(const std::optional<double>& v) {
  if (!v) return nullptr;
  if (!std::isfinite(*v)) return format_number(*v);
  return *v;
}

std::optional<double> number_from_json(const nlohmann::json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return std::nullopt;
  if (it->is_string()) return parse_number(it->get<std::string>());
  return it->get<double>();
}

struct Column {
  const char* csv;
  const char* json;
  std::optional<double> MetricReport::*field;
};

const std::vector<Column>& columns() {
  static const std::vector<Column> c = {
      {"r", "r", &MetricReport::r},
      {"FQ", "forget_quality", &MetricReport::forget_quality},
      {"MU", "model_utility", &MetricReport::model_utility},
      {"F-RL", "forget_rouge", &MetricReport::forget_rouge},
      {"R-RL", "retain_rouge", &MetricReport::retain_rouge},
      {"FQ-Gap", "fq_gap", &MetricReport::fq_gap},
      {"PPL", "perplexity", &MetricReport::perplexity},
      {"BLEU", "bleu", &MetricReport::bleu},
      {"VerbMem", "verbmem", &MetricReport::verbmem},
      {"KnowMem_f", "knowmem_forget", &MetricReport::knowmem_forget},
      {"KnowMem_r", "knowmem_retain", &MetricReport::knowmem_retain},
      {"PrivLeak", "privleak", &MetricReport::privleak},
      {"MIA-AUC", "mia_auc", &MetricReport::mia_auc},
  };
  return c;
}

}  // namespace

nlohmann::json to_json(const MetricReport& r) {
  nlohmann::json j = {{"method", r.method}};
  for (const Column& c : columns()) j[c.json] = number_json(r.*(c.field));
  j["diverged"] = r.diverged;
  j["diverged_at_step"] = r.diverged_at_step ? nlohmann::json(*r.diverged_at_step) : nlohmann::json(nullptr);
  j["inputs_digest"] = r.inputs_digest;
  return j;
}

MetricReport metric_report_from_json(const nlohmann::json& j) {
  MetricReport r;
  r.method = j.at("method").get<std::string>();
  for (const Column& c : columns()) r.*(c.field) = number_from_json(j, c.json);
  r.diverged = j.value("diverged", false);
  if (auto it = j.find("diverged_at_step"); it != j.end() && !it->is_null()) r.diverged_at_step = it->get<std::uint64_t>();
  r.inputs_digest = j.value("inputs_digest", std::string());
  return r;
}

std::string metric_csv_header() {
  std::string h = "method";
  for (const Column& c : columns()) h += std::string(",") + c.csv;
  return h + ",diverged";
}

std::string metric_csv_row(const MetricReport& r) {
  if (r.method.find_first_of(",\"\n") != std::string::npos)
    throw std::invalid_argument("metric_csv_row: method name needs no quoting");
  std::string row = r.method;
  for (const Column& c : columns()) {
    const auto& v = r.*(c.field);
    row += "," + (v ? format_number(*v) : std::string("n/a"));
  }
  return row + (r.diverged ? ",yes" : ",no");
}

std::vector<MetricReport> parse_metric_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::vector<MetricReport> out;
  bool header = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (header) {
      if (line != metric_csv_header()) throw std::invalid_argument("metric CSV: unexpected header");
      header = false;
      continue;
    }
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != columns().size() + 2) throw std::invalid_argument("metric CSV: wrong column count");
    MetricReport r;
    r.method = cells[0];
    for (std::size_t i = 0; i < columns().size(); ++i)
      if (cells[i + 1] != "n/a") r.*(columns()[i].field) = parse_number(cells[i + 1]);
    r.diverged = cells.back() == "yes";
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace ulab
