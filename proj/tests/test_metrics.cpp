#include "ulab/metrics.hpp"

#include <doctest.h>

#include <algorithm>
#include <functional>
#include <map>
#include <random>

using namespace ulab;

namespace {

// Memoised recursion over suffixes; shares no code with the library's DP.
std::size_t lcs_oracle(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::map<std::pair<std::size_t, std::size_t>, std::size_t> memo;
  std::function<std::size_t(std::size_t, std::size_t)> go = [&](std::size_t i, std::size_t j) -> std::size_t {
    if (i == a.size() || j == b.size()) return 0;
    const auto key = std::make_pair(i, j);
    if (auto it = memo.find(key); it != memo.end()) return it->second;
    const std::size_t v = a[i] == b[j] ? 1 + go(i + 1, j + 1) : std::max(go(i + 1, j), go(i, j + 1));
    return memo[key] = v;
  };
  return go(0, 0);
}

std::vector<std::string> random_words(std::mt19937_64& rng, int max_len) {
  static const char* vocab[] = {"a", "b", "c", "d", "e"};
  std::uniform_int_distribution<int> len(0, max_len), w(0, 4);
  std::vector<std::string> out(static_cast<std::size_t>(len(rng)));
  for (auto& s : out) s = vocab[w(rng)];
  return out;
}

}  // namespace

TEST_CASE("text tokens") {
  CHECK(text_tokens("  The Cat,  sat. ") == std::vector<std::string>{"the", "cat,", "sat."});
  CHECK(text_tokens("").empty());
}

TEST_CASE("rouge-l agrees with an independent LCS") {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 200; ++i) {
    const auto a = random_words(rng, 12), b = random_words(rng, 12);
    const std::size_t l = lcs_oracle(a, b);
    CHECK(lcs_length(a, b) == l);
    const RougeScore s = rouge_l(a, b);
    CHECK(s.recall == (b.empty() ? 0.0 : static_cast<double>(l) / b.size()));
    CHECK(s.precision == (a.empty() ? 0.0 : static_cast<double>(l) / a.size()));
  }
  const RougeScore s = rouge_l("the cat sat on the mat", "the cat lay on a mat");
  CHECK(s.recall == doctest::Approx(4.0 / 6));
  CHECK(s.f1 == doctest::Approx(4.0 / 6));
  CHECK(rouge_l("", "x").f1 == 0.0);
}

TEST_CASE("bleu") {
  CHECK(bleu("the quick brown fox jumps", "the quick brown fox jumps") == doctest::Approx(1.0));
  CHECK(bleu("a b c", "a b c d e") == 0.0);  // no 4-grams
  // p1 = 5/6, p2 = 4/5, p3 = 3/4, p4 = 2/3, candidate shorter than reference by one.
  const double expected = std::exp(1 - 7.0 / 6) * std::pow((5.0 / 6) * 0.8 * 0.75 * (2.0 / 3), 0.25);
  CHECK(bleu("a b c d e f", "a b c d e g h") == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("probability ratios and truth ratio") {
  const std::vector<double> pert = {0.1, 0.4};
  CHECK(answer_probability_ratio(0.5, pert) == doctest::Approx(1.0));
  CHECK(truth_ratio(pert, 0.4) == doctest::Approx(0.2 / 0.4));
  CHECK_THROWS(truth_ratio(std::vector<double>{}, 0.3));
}

TEST_CASE("model utility is a harmonic mean of nine") {
  std::vector<double> s(9, 0.5);
  CHECK(model_utility(s) == doctest::Approx(0.5));
  s[3] = 0.0;
  CHECK(model_utility(s) == 0.0);
  s = {1, 1, 1, 1, 1, 1, 1, 1, 0.25};
  CHECK(model_utility(s) == doctest::Approx(9.0 / (8 + 4)));
  CHECK_THROWS(model_utility(std::vector<double>(8, 0.5)));
  s[0] = 1.5;
  CHECK_THROWS(model_utility(s));
}

TEST_CASE("ks statistic and asymptotic p-value") {
  const std::vector<double> a = {1, 2, 3, 4}, b = {1, 2, 3, 4};
  CHECK(ks_statistic(a, b) == 0.0);
  CHECK(ks_test(a, b).p_value == 1.0);
  const std::vector<double> lo = {1, 2, 3}, hi = {10, 11, 12};
  CHECK(ks_statistic(lo, hi) == 1.0);
  CHECK(kolmogorov_q(0.0) == 1.0);
  CHECK(kolmogorov_q(3.0) < 1e-6);
  CHECK(kolmogorov_q(1.0) == doctest::Approx(0.26999967).epsilon(1e-6));
  const KsResult r = ks_test(lo, hi);
  const double ne = 1.5;
  CHECK(r.lambda == doctest::Approx(std::sqrt(ne)));
  CHECK(forget_quality(a, b) == 1.0);
}

TEST_CASE("ks p-value tracks a permutation oracle") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int c = 0; c < 3; ++c) {
    std::vector<double> a(100), b(100);
    for (double& x : a) x = n(rng);
    for (double& x : b) x = n(rng) + 0.15 * c;
    const double d = ks_statistic(a, b);
    std::vector<double> pool(a);
    pool.insert(pool.end(), b.begin(), b.end());
    int hits = 0;
    const int P = 2000;
    for (int p = 0; p < P; ++p) {
      std::shuffle(pool.begin(), pool.end(), rng);
      const std::span<const double> x(pool.data(), 100), y(pool.data() + 100, 100);
      hits += ks_statistic(x, y) >= d - 1e-12;
    }
    CHECK(std::abs(ks_test(a, b).p_value - static_cast<double>(hits) / P) < 0.04);
  }
}

TEST_CASE("mia auc equals the pairwise oracle") {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> v(0, 6), len(1, 9);
  for (int i = 0; i < 50; ++i) {
    std::vector<double> m(static_cast<std::size_t>(len(rng))), nm(static_cast<std::size_t>(len(rng)));
    for (double& x : m) x = v(rng);
    for (double& x : nm) x = v(rng);
    double wins = 0;
    for (double x : m)
      for (double y : nm) wins += x < y ? 1.0 : (x == y ? 0.5 : 0.0);
    const RocCurve c = mia_auc(m, nm);
    CHECK(c.auc == wins / static_cast<double>(m.size() * nm.size()));
    CHECK(c.tpr.back() == 1.0);
    CHECK(c.fpr.back() == 1.0);
    CHECK(std::is_sorted(c.thresholds.begin(), c.thresholds.end()));
  }
  CHECK_THROWS(mia_auc(std::vector<double>{}, std::vector<double>{1.0}));
}

TEST_CASE("privleak and fq gap") {
  CHECK(privleak(0.63, 0.63) == 0.0);
  CHECK(privleak(0.75, 0.5) == doctest::Approx(50.0));
  CHECK(privleak(0.25, 0.5) == doctest::Approx(-50.0));
  CHECK(fq_gap({0.3, 0.5}, {0.1, 0.6}) == doctest::Approx(0.3));
}

TEST_CASE("metric report json and csv round trip") {
  MetricReport r;
  r.method = "SGA";
  r.r = -0.8;
  r.forget_quality = 0.0815;
  r.model_utility = 1.0 / 3.0;
  r.forget_rouge = 0.225;
  r.retain_rouge = 0.596;
  r.perplexity = 1.4780652472073657;
  r.privleak = -2.09;
  r.mia_auc = 0.585;
  r.diverged = true;
  r.diverged_at_step = 42;
  r.inputs_digest = "abc";
  CHECK(metric_report_from_json(to_json(r)) == r);

  MetricReport plain;
  plain.method = "finetuned";
  const std::string csv = metric_csv_header() + "\n" + metric_csv_row(r) + "\n" + metric_csv_row(plain) + "\n";
  CHECK(metric_csv_row(plain).find("n/a") != std::string::npos);
  const auto rows = parse_metric_csv(csv);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].r == r.r);
  CHECK(rows[0].perplexity == r.perplexity);
  CHECK(rows[0].model_utility == r.model_utility);
  CHECK(rows[0].diverged);
  CHECK_FALSE(rows[1].r.has_value());
  CHECK(metric_csv_row(rows[0]) == metric_csv_row(r));
  CHECK(format_number(0.1) == "0.1");

  MetricReport bad;
  bad.forget_quality = 1.5;
  CHECK_THROWS_AS(bad.validate(), std::domain_error);
}

TEST_CASE("model-based scores on the uniform model") {
  ModelConfig c;
  c.vocab_size = 300;
  c.dim = 8;
  c.layers = 1;
  c.heads = 2;
  c.context = 64;
  const Checkpoint u = Checkpoint::uniform(c);
  const CheckpointModel m(u);
  const Vocabulary v;
  const QARecord rec{"x", "Who?", "Ann.", std::string("It is Ann."), {"Bob.", "Cy."}};
  const AnswerScores s = answer_scores(m, v, rec);
  CHECK(s.correct == doctest::Approx(1.0 / 300));
  CHECK(s.paraphrase == doctest::Approx(1.0 / 300));
  REQUIRE(s.perturbed.size() == 2);
  CHECK(answer_nll(m, v, rec) == doctest::Approx(std::log(300.0)));

  const std::vector<std::string> passages = {"short"};
  CHECK_THROWS(verbmem(m, v, passages, 40));
  const std::vector<std::string> ok = {"one two three four five six seven eight nine ten"};
  const VerbMemResult vm = verbmem(m, v, ok, 8);
  CHECK(vm.evaluated == 1);
  CHECK(vm.score >= 0.0);
  CHECK(vm.score <= 100.0);
}
