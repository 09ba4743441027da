// fang: command-line front end.
//
//   fang prune  --config c.json --out dir/ [overrides]
//   fang eval   --ckpt model.fang --corpus text.txt
//   fang report --in report.json
//   fang init   --config c.json --out model.fang
//
// Exit codes: 0 success, 1 other failure, 2 configuration error, 3 numerical
// failure.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "fang/errors.hpp"
#include "fang/pipeline.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

struct PruneArgs {
  std::string config;
  std::string out;
  std::optional<double> sparsity;
  std::optional<std::string> method;
  std::optional<fang::Index> k_groups;
  std::optional<double> tau;
  std::optional<fang::Index> pca_dim;
  std::optional<std::string> alloc;
  std::optional<std::string> reweight;
  std::optional<std::string> grouping;
  bool no_shared_group = false;
  std::optional<std::string> propagation;
  std::optional<std::uint64_t> seed;
};

fang::RunConfig resolve_config(const PruneArgs& a) {
  fang::RunConfig cfg = fang::load_run_config(a.config);
  // Overrides go through the JSON form so they get the same validation.
  nlohmann::json j = fang::to_json(cfg);
  auto& p = j["prune"];
  if (a.sparsity) p["sparsity"] = *a.sparsity;
  if (a.method) p["method"] = *a.method;
  if (a.k_groups) p["k_groups"] = *a.k_groups;
  if (a.tau) p["tau"] = *a.tau;
  if (a.pca_dim) p["pca_dim"] = *a.pca_dim;
  if (a.alloc) p["alloc"] = *a.alloc;
  if (a.reweight) p["reweight"] = *a.reweight;
  if (a.grouping) p["grouping"] = *a.grouping;
  if (a.no_shared_group) p["shared_group"] = false;
  if (a.propagation) p["propagation"] = *a.propagation;
  if (a.seed) p["seed"] = *a.seed;
  return fang::run_config_from_json(j, cfg.base_dir);
}

int cmd_prune(const PruneArgs& a) {
  const fang::RunConfig cfg = resolve_config(a);
  const fang::PruneOutcome outcome = fang::run_prune(cfg);
  fang::write_outputs(outcome, a.out);
  const auto& r = outcome.report;
  std::printf("realized sparsity %.6f, params %s -> %s, perplexity %.6g -> %.6g\n",
              r.at("realized_sparsity").get<double>(), r.at("params").at("dense").dump().c_str(),
              r.at("params").at("pruned").dump().c_str(),
              r.at("perplexity").at("dense").get<double>(),
              r.at("perplexity").at("pruned").get<double>());
  std::printf("wrote %s/pruned.fang and %s/report.json\n", a.out.c_str(), a.out.c_str());
  return kExitOk;
}

int cmd_eval(const std::string& ckpt_path, const std::string& corpus_path, fang::Index window) {
  const fang::Checkpoint ckpt = fang::load_checkpoint(ckpt_path);
  const fang::Tokens corpus = fang::load_corpus(corpus_path);
  const fang::PerplexityResult r = fang::perplexity(ckpt, corpus, window);
  std::printf("perplexity %.17g tokens %zu\n", r.perplexity, r.predicted_tokens);
  return kExitOk;
}

int cmd_report(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw fang::InputError("cannot open report '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw fang::FormatError("report '" + path + "' is not valid JSON: " + e.what());
  }
  std::cout << fang::render_report(j);
  return kExitOk;
}

int cmd_init(const std::string& config_path, const std::string& out) {
  const fang::RunConfig cfg = fang::load_run_config(config_path);
  fang::save_checkpoint(fang::build_model(cfg), out);
  std::printf("wrote %s\n", out.c_str());
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Function-aware neuron grouping pruner for a toy transformer"};
  app.require_subcommand(1);

  PruneArgs pa;
  auto* prune = app.add_subcommand("prune", "prune a model and write pruned.fang + report.json");
  prune->add_option("--config", pa.config, "run config JSON")->required();
  prune->add_option("--out", pa.out, "output directory")->required();
  prune->add_option("--sparsity", pa.sparsity);
  prune->add_option("--method", pa.method, "obc | flap | fang-obc | fang-flap");
  prune->add_option("--k-groups", pa.k_groups);
  prune->add_option("--tau", pa.tau);
  prune->add_option("--pca-dim", pa.pca_dim);
  prune->add_option("--alloc", pa.alloc, "uniform | fc | taylor");
  prune->add_option("--reweight", pa.reweight, "ours | reverse | uniform | only_matched");
  prune->add_option("--grouping", pa.grouping, "fang | random");
  prune->add_flag("--no-shared-group", pa.no_shared_group);
  prune->add_option("--propagation", pa.propagation, "sequential | oneshot");
  prune->add_option("--seed", pa.seed);

  std::string ckpt, corpus;
  fang::Index window = 128;
  auto* eval = app.add_subcommand("eval", "perplexity of a checkpoint on a corpus");
  eval->add_option("--ckpt", ckpt)->required();
  eval->add_option("--corpus", corpus)->required();
  eval->add_option("--window", window);

  std::string report_in;
  auto* report = app.add_subcommand("report", "render a run report");
  report->add_option("--in", report_in)->required();

  std::string init_config, init_out;
  auto* init = app.add_subcommand("init", "materialize the dense model described by a config");
  init->add_option("--config", init_config)->required();
  init->add_option("--out", init_out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (prune->parsed()) return cmd_prune(pa);
    if (eval->parsed()) return cmd_eval(ckpt, corpus, window);
    if (report->parsed()) return cmd_report(report_in);
    if (init->parsed()) return cmd_init(init_config, init_out);
  } catch (const fang::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const fang::ParameterError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const fang::SingularityError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return kExitNumerical;
  } catch (const fang::NumericalError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitFailure;
  }
  return kExitFailure;
}
