#include "ulab/harness.hpp"

#include <doctest.h>

#include <filesystem>

using namespace ulab;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("ulab_harness_" + name);
  fs::remove_all(p);
  return p;
}

ExperimentConfig small_config(const fs::path& out) {
  ExperimentConfig c;
  c.seed = 77;
  c.corpus.authors = 10;
  c.corpus.known_authors = 1;
  c.corpus.world_facts = 3;
  c.model.vocab_size = 320;
  c.model.dim = 16;
  c.model.layers = 1;
  c.model.heads = 2;
  c.model.seed = c.seed;
  c.finetune = {2, 3e-3, 16};
  c.unlearn = {1, 1e-4, 4};
  c.r_sweep = {0.0, 0.5};
  c.max_new_tokens = 8;
  c.output_dir = out;
  return c;
}

Workspace workspace_from(const fs::path& root, int context) {
  Workspace ws;
  ws.vocab = Vocabulary::load(root / "corpus/tokenizer.json");
  ws.corpora.forget = read_corpus(root / "corpus/forget.jsonl");
  ws.corpora.retain = read_corpus(root / "corpus/retain.jsonl");
  ws.context = context;
  return ws;
}

}  // namespace

TEST_CASE("hash helpers") {
  CHECK(sha1_hex("abc") == "a9993e364706816aba3e25717850c26c9cd0d89d");
  CHECK(git_blob_hash("hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a");
  CHECK(git_blob_hash("") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
}

TEST_CASE("config json round trip and validation") {
  ExperimentConfig c = small_config("x");
  c.method.method = Method::NPO;
  c.method.llmu_weights = std::array<double, 3>{0.1, 0.2, 0.3};
  c.r_mode = RMode::per_step;
  c.normal_mode = NormalMode::fallback_only;
  const ExperimentConfig back = experiment_config_from_json(to_json(c));
  CHECK(to_json(back) == to_json(c));
  CHECK(config_digest(back) == config_digest(c));

  ExperimentConfig moved = c;
  moved.output_dir = "elsewhere";
  moved.stages = {"synth"};
  CHECK(config_digest(moved) == config_digest(c));
  moved.seed = 78;
  CHECK(config_digest(moved) != config_digest(c));

  nlohmann::json j = to_json(c);
  j["surprise"] = 1;
  CHECK_THROWS(experiment_config_from_json(j));

  ExperimentConfig bad = small_config("x");
  bad.stages = {"synth", "bake"};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = small_config("x");
  bad.r_sweep.clear();
  CHECK_THROWS(bad.validate());
  bad = small_config("x");
  bad.r_sweep = {1.5};
  CHECK_THROWS(bad.validate());
  bad = small_config("x");
  bad.unlearn.batch_size = 0;
  CHECK_THROWS(bad.validate());
  CHECK(r_mode_from_string(to_string(RMode::closed_form_once)) == RMode::closed_form_once);

  const fs::path file = scratch("cfg.json");
  save_experiment_config(c, file);
  CHECK(to_json(load_experiment_config(file)) == to_json(c));
  fs::remove(file);
}

TEST_CASE("a synth-only run writes only corpus files") {
  const fs::path out = scratch("synth");
  ExperimentConfig c = small_config(out);
  c.stages = {"synth"};
  const RunResult r = run_pipeline(c);
  CHECK(r.training_steps == 0);
  CHECK(r.stages_run == std::vector<std::string>{"synth"});
  CHECK(fs::exists(out / "corpus/forget.jsonl"));
  CHECK(fs::exists(out / "corpus/tokenizer.json"));
  CHECK_FALSE(fs::exists(out / "ckpt"));
  CHECK(r.manifest["stages"].size() == 1);
  CHECK_NOTHROW(verify_manifest(r.manifest, out));
  fs::remove_all(out);
}

TEST_CASE("full pipeline, idempotent rerun, tamper detection and tables") {
  const fs::path out = scratch("full");
  const ExperimentConfig c = small_config(out);
  const RunResult first = run_pipeline(c);
  CHECK(first.training_steps > 0);
  CHECK(first.stages_run.size() == 4);
  for (const char* f : {"ckpt/finetuned.ulab", "ckpt/retained.ulab", "normal/normal_set.jsonl", "reports/metrics.json",
                        "reports/table.csv", "reports/summary.txt", "manifest.json", "timings.json"})
    CHECK(fs::exists(out / f));
  CHECK_NOTHROW(verify_manifest(first.manifest, out));
  const std::string manifest_bytes = read_file(out / "manifest.json");

  const RunResult again = run_pipeline(c);
  CHECK(again.training_steps == 0);
  CHECK(again.stages_run.empty());
  CHECK(again.stages_reused.size() == 4);
  CHECK(read_file(out / "manifest.json") == manifest_bytes);

  // Changing only the unlearn settings reuses synth and finetune.
  ExperimentConfig tweaked = c;
  tweaked.r_sweep = {0.5, 0.5};
  const RunResult partial = run_pipeline(tweaked);
  CHECK(partial.stages_reused == std::vector<std::string>{"synth", "finetune"});
  const auto rows = sweep_r(tweaked);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].second == rows[1].second);

  const auto table = parse_metric_csv(read_file(out / "reports/table.csv"));
  CHECK(table.size() == 4);  // finetuned, retained, one row per sweep entry
  CHECK(table[0].method == "finetuned");
  CHECK(table[1].method == "retained");

  // Tables merged from the same manifest twice, plus one without eval.
  const fs::path synth_only = scratch("synth_only");
  ExperimentConfig s = small_config(synth_only);
  s.stages = {"synth"};
  run_pipeline(s);
  const auto merged = export_tables({out / "manifest.json", out / "manifest.json", synth_only / "manifest.json"},
                                    out / "merged");
  CHECK(merged.size() == 4);
  CHECK_FALSE(merged.back().forget_quality.has_value());
  CHECK(read_file(out / "merged/table.csv").find("n/a") != std::string::npos);
  CHECK(read_file(out / "merged/summary.txt").find("top-1 r = 0.5") != std::string::npos);

  write_file(out / "corpus/forget.jsonl", "tampered\n");
  CHECK_THROWS(verify_manifest(nlohmann::json::parse(manifest_bytes), out));
  fs::remove_all(out);
  fs::remove_all(synth_only);
}

TEST_CASE("smoothed unlearning at r = 0 retraces gradient ascent") {
  const fs::path out = scratch("ga");
  ExperimentConfig c = small_config(out);
  c.stages = {"synth", "finetune"};
  c.finetune.epochs = 1;
  run_pipeline(c);
  c.stages = {"synth", "finetune", "unlearn"};
  c.r_sweep = {0.0};
  run_pipeline(c);
  const Workspace ws = workspace_from(out, c.model.context);
  const Checkpoint original = load_checkpoint(out / "ckpt/finetuned.ulab");
  const NormalSet normals = load_normal_set(out / "normal/normal_set.jsonl");

  UnlearnMethodConfig sga = c.method;
  sga.r = 0.0;
  UnlearnMethodConfig ga = c.method;
  ga.method = Method::GA;
  const TrainSettings t{2, 1e-4, 4};
  const UnlearnOutcome a = unlearn_gradient(original, ws, normals, sga, t, RMode::fixed, 1e12);
  const UnlearnOutcome b = unlearn_gradient(original, ws, normals, ga, t, RMode::fixed, 1e12);
  CHECK(a.steps == b.steps);
  CHECK(a.steps == 2 * ((ws.corpora.forget.size() + 3) / 4));
  CHECK((a.checkpoint.theta - b.checkpoint.theta).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK(a.losses == b.losses);
  CHECK(load_checkpoint(out / "ckpt/unlearned-SGA-r0.ulab").theta.size() == original.theta.size());

  // An impossible divergence bound trips after the first epoch.
  const UnlearnOutcome d = unlearn_gradient(original, ws, normals, ga, t, RMode::fixed, 1.0000001);
  CHECK(d.diverged);
  REQUIRE(d.diverged_at_step.has_value());

  // probe-r emits one sign per forget record, and the report file round-trips.
  const ProbeResult p = probe_r(original, ws, normals);
  CHECK(p.profile.rows.size() == ws.corpora.forget.size());
  CHECK(p.profile.total() == ws.corpora.forget.size());
  CHECK(parse_sign_profile(serialize_sign_profile(p.profile)) == p.profile);
  fs::remove_all(out);
}

TEST_CASE("non-SGA methods run a single unlearn") {
  const fs::path out = scratch("methods");
  ExperimentConfig c = small_config(out);
  c.finetune.epochs = 1;
  c.method.method = Method::NPO;
  CHECK(c.unlearn_rates().size() == 1);
  const RunResult r = run_pipeline(c);
  const auto table = parse_metric_csv(read_file(out / "reports/table.csv"));
  REQUIRE(table.size() == 3);
  CHECK(table[2].method == "NPO");
  CHECK_FALSE(table[2].r.has_value());
  CHECK(r.manifest["stages"]["unlearn"]["runs"].size() == 1);
  fs::remove_all(out);
}

TEST_CASE("best r row") {
  auto row = [](std::string m, std::optional<double> r, double fq, double rl, bool div = false) {
    MetricReport x;
    x.method = std::move(m);
    x.r = r;
    x.forget_quality = fq;
    x.retain_rouge = rl;
    x.diverged = div;
    return x;
  };
  const std::vector<MetricReport> rows = {row("SGA", 0.0, 0.9, 0.9), row("SGA", 0.4, 0.2, 0.5), row("SGA", 0.8, 0.2, 0.6),
                                          row("SGA", -0.2, 0.95, 0.9, true), row("GA", std::nullopt, 1.0, 1.0)};
  const auto best = best_r_row(rows);
  REQUIRE(best.has_value());
  CHECK(*best->r == 0.8);
  CHECK_FALSE(best_r_row({rows[0], rows[4]}).has_value());
}
