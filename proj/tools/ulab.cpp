// SPDX-License-Identifier: Apache-2.0
//
// ulab: command-line front end for the unlearning pipeline.
//
//   ulab synth|finetune|unlearn|eval [--config c.json] [flags]
//   ulab sweep --r -0.8,0,0.8 [flags]
//   ulab report --manifest a/manifest.json --manifest b/manifest.json --out tables/
//   ulab probe-r [--checkpoint ckpt.ulab] [flags]

#include "ulab/harness.hpp"

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <cstdio>
#include <iostream>

namespace {

using ulab::ExperimentConfig;

struct Overrides {
  std::string config;
  std::string save_config;
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  std::optional<int> authors, qa_per_author, known_authors, world_facts;
  std::optional<double> forget_fraction, holdout_fraction;
  std::optional<int> vocab_size, dim, layers, heads, context;
  std::optional<int> finetune_epochs, finetune_batch;
  std::optional<double> finetune_lr;
  std::optional<std::string> method;
  std::optional<std::vector<double>> r;
  std::optional<std::string> r_mode;
  std::optional<int> K, normal_count;
  std::optional<double> lambda, beta, alpha;
  std::optional<std::string> divergence;
  std::optional<int> epochs, batch;
  std::optional<double> lr, divergence_ppl;
  std::optional<std::string> normal_mode, endpoint_url, endpoint_fixture, template_id;
  std::optional<double> threshold;
  std::optional<int> verbmem_prefix, max_new_tokens;
  bool verbose = false;

  void attach(CLI::App* app) {
    app->add_option("-c,--config", config, "JSON config file")->check(CLI::ExistingFile);
    app->add_option("--save-config", save_config, "write the effective config here");
    app->add_option("-o,--out", out, "output directory");
    app->add_option("--seed", seed);
    app->add_option("--authors", authors);
    app->add_option("--qa-per-author", qa_per_author);
    app->add_option("--known-authors", known_authors);
    app->add_option("--world-facts", world_facts);
    app->add_option("--forget-fraction", forget_fraction);
    app->add_option("--holdout-fraction", holdout_fraction);
    app->add_option("--vocab-size", vocab_size);
    app->add_option("--dim", dim);
    app->add_option("--layers", layers);
    app->add_option("--heads", heads);
    app->add_option("--context", context);
    app->add_option("--finetune-epochs", finetune_epochs);
    app->add_option("--finetune-lr", finetune_lr);
    app->add_option("--finetune-batch", finetune_batch);
    app->add_option("-m,--method", method, "SGA GA GD KL PO DPO DPO-RT NPO NPO-RT Mismatch LLMU FLAT TaskVector WHP");
    app->add_option("--r", r, "smoothing rates to sweep")->delimiter(',')->allow_extra_args(false);
    app->add_option("--r-mode", r_mode, "fixed | closed-form-once | per-step");
    app->add_option("--K", K);
    app->add_option("--normal-count", normal_count);
    app->add_option("--lambda", lambda);
    app->add_option("--beta", beta);
    app->add_option("--alpha", alpha);
    app->add_option("--divergence", divergence, "FLAT divergence: pearson | identity");
    app->add_option("--epochs", epochs, "unlearning epochs");
    app->add_option("--lr", lr, "unlearning learning rate");
    app->add_option("--batch-size", batch, "unlearning batch size");
    app->add_option("--divergence-ppl", divergence_ppl);
    app->add_option("--normal-mode", normal_mode, "similarity | endpoint | fallback-only");
    app->add_option("--threshold", threshold, "similarity threshold for normal data");
    app->add_option("--endpoint-url", endpoint_url);
    app->add_option("--endpoint-fixture", endpoint_fixture);
    app->add_option("--template", template_id, "endpoint prompt template: tofu | harry-potter | muse-news");
    app->add_option("--verbmem-prefix", verbmem_prefix);
    app->add_option("--max-new-tokens", max_new_tokens);
    app->add_flag("-v,--verbose", verbose);
  }

  ExperimentConfig resolve() const {
    ExperimentConfig c = config.empty() ? ExperimentConfig{} : ulab::load_experiment_config(config);
    if (out) c.output_dir = *out;
    if (seed) c.seed = c.model.seed = *seed;
    if (authors) c.corpus.authors = *authors;
    if (qa_per_author) c.corpus.qa_per_author = *qa_per_author;
    if (known_authors) c.corpus.known_authors = *known_authors;
    if (world_facts) c.corpus.world_facts = *world_facts;
    if (forget_fraction) c.corpus.forget_fraction = *forget_fraction;
    if (holdout_fraction) c.corpus.holdout_fraction = *holdout_fraction;
    if (vocab_size) c.model.vocab_size = *vocab_size;
    if (dim) c.model.dim = *dim;
    if (layers) c.model.layers = *layers;
    if (heads) c.model.heads = *heads;
    if (context) c.model.context = *context;
    if (finetune_epochs) c.finetune.epochs = *finetune_epochs;
    if (finetune_lr) c.finetune.learning_rate = *finetune_lr;
    if (finetune_batch) c.finetune.batch_size = *finetune_batch;
    if (method) c.method.method = ulab::method_from_string(*method);
    if (r) c.r_sweep = *r;
    if (r_mode) c.r_mode = ulab::r_mode_from_string(*r_mode);
    if (K) c.method.K = *K;
    if (normal_count) c.method.normal_count = *normal_count;
    if (lambda) c.method.lambda = *lambda;
    if (beta) c.method.beta = *beta;
    if (alpha) c.method.alpha = *alpha;
    if (divergence) c.method.divergence = *divergence;
    if (epochs) c.unlearn.epochs = *epochs;
    if (lr) c.unlearn.learning_rate = *lr;
    if (batch) c.unlearn.batch_size = *batch;
    if (divergence_ppl) c.divergence_ppl = *divergence_ppl;
    if (normal_mode) c.normal_mode = ulab::normal_mode_from_string(*normal_mode);
    if (threshold) c.normal_threshold = *threshold;
    if (endpoint_url) c.endpoint.base_url = *endpoint_url;
    if (endpoint_fixture) c.endpoint_fixture = *endpoint_fixture;
    if (template_id) c.endpoint.template_id = *template_id;
    if (verbmem_prefix) c.verbmem_prefix = *verbmem_prefix;
    if (max_new_tokens) c.max_new_tokens = *max_new_tokens;
    return c;
  }
};

void print_table(const std::filesystem::path& csv) { std::cout << ulab::read_file(csv); }

int run_stage(const Overrides& o, const std::string& stage) {
  ExperimentConfig c = o.resolve();
  // Earlier stages run too unless the manifest shows them complete.
  c.stages.clear();
  for (const char* s : {"synth", "finetune", "unlearn", "eval"}) {
    c.stages.push_back(s);
    if (stage == s) break;
  }
  if (!o.save_config.empty()) ulab::save_experiment_config(c, o.save_config);
  const ulab::RunResult res = ulab::run_pipeline(c);
  for (const std::string& s : res.stages_reused) spdlog::info("{}: reused", s);
  for (const std::string& s : res.stages_run) spdlog::info("{}: done", s);
  if (stage == "eval") print_table(c.output_dir / "reports/table.csv");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Unlearning laboratory: synthetic corpus, tiny LM, unlearning objectives and metrics"};
  app.require_subcommand(1);
  Overrides o;

  std::vector<CLI::App*> stage_cmds;
  for (const char* name : {"synth", "finetune", "unlearn", "eval"}) {
    CLI::App* sub = app.add_subcommand(name, std::string("run the ") + name + " stage (earlier stages are reused or run)");
    o.attach(sub);
    stage_cmds.push_back(sub);
  }
  CLI::App* sweep = app.add_subcommand("sweep", "full pipeline over an r sweep, printing the table");
  o.attach(sweep);

  std::vector<std::string> manifests;
  std::string report_out = "tables";
  CLI::App* report = app.add_subcommand("report", "merge manifests into one table and summary");
  report->add_option("--manifest", manifests, "manifest.json files")->required()->check(CLI::ExistingFile);
  report->add_option("-o,--out", report_out);

  std::string probe_ckpt;
  CLI::App* probe = app.add_subcommand("probe-r", "sign of <g_f, u> per forget instance and the closed-form r*");
  o.attach(probe);
  probe->add_option("--checkpoint", probe_ckpt, "defaults to {out}/ckpt/finetuned.ulab");

  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(o.verbose ? spdlog::level::debug : spdlog::level::info);

  std::string stage = "config";
  try {
    for (CLI::App* sub : stage_cmds)
      if (sub->parsed()) {
        stage = sub->get_name();
        return run_stage(o, stage);
      }
    if (sweep->parsed()) {
      ExperimentConfig c = o.resolve();
      c.method.method = ulab::Method::SGA;
      if (!o.save_config.empty()) ulab::save_experiment_config(c, o.save_config);
      stage = "sweep";
      const auto rows = ulab::sweep_r(c);
      std::cout << ulab::metric_csv_header() << "\n";
      for (const auto& [r, m] : rows) std::cout << ulab::metric_csv_row(m) << "\n";
      std::cout << ulab::read_file(c.output_dir / "reports/summary.txt");
      return 0;
    }
    if (report->parsed()) {
      stage = "report";
      std::vector<std::filesystem::path> paths(manifests.begin(), manifests.end());
      ulab::export_tables(paths, report_out);
      print_table(std::filesystem::path(report_out) / "table.csv");
      std::cout << ulab::read_file(std::filesystem::path(report_out) / "summary.txt");
      return 0;
    }
    if (probe->parsed()) {
      ExperimentConfig c = o.resolve();
      const std::filesystem::path root = c.output_dir;
      stage = "probe-r";
      ulab::Workspace ws;
      ws.vocab = ulab::Vocabulary::load(root / "corpus/tokenizer.json");
      ws.corpora.forget = ulab::read_corpus(root / "corpus/forget.jsonl");
      ws.corpora.retain = ulab::read_corpus(root / "corpus/retain.jsonl");
      ws.context = c.model.context;
      const ulab::Checkpoint ck =
          ulab::load_checkpoint(probe_ckpt.empty() ? root / "ckpt/finetuned.ulab" : std::filesystem::path(probe_ckpt));
      const ulab::NormalSet normals = ulab::load_normal_set(root / "normal/normal_set.jsonl");
      const ulab::ProbeResult p = ulab::probe_r(ck, ws, normals);
      ulab::write_file(root / "reports/sign_profile.jsonl", ulab::serialize_sign_profile(p.profile));
      std::cout << "instances " << p.profile.rows.size() << ": positive " << p.profile.positive << ", negative "
                << p.profile.negative << ", zero " << p.profile.zero << "\n";
      if (p.set_rate) std::cout << "r* " << ulab::format_number(p.set_rate->r_star) << "\n";
      else std::cout << "r* undefined (u vanishes)\n";
      return 0;
    }
  } catch (const ulab::StageError& e) {
    std::cerr << "ulab: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "ulab: stage " << stage << " failed: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
