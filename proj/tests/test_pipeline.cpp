#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fang/errors.hpp"
#include "fang/pipeline.hpp"
#include "testing.hpp"

using namespace fang;
using namespace fang::testing;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const fs::path kSource = FANG_SOURCE_DIR;

RunConfig tiny_config() {
  RunConfig c;
  c.base_dir = kSource;
  c.model.config = small_config();
  c.model.init_seed = 11;
  c.calib.n_seqs = 2;
  c.calib.seq_len = 32;
  c.prune.k_groups = 3;
  c.prune.pca_dim = 8;
  c.eval.window = 32;
  return c;
}

fs::path temp_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("fang_pipeline_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(FANG_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

double max_weight_diff(const Checkpoint& a, const Checkpoint& b) {
  double m = 0.0;
  for (Index l = 0; l < a.layers.size(); ++l) {
    const auto& x = a.layers[l];
    const auto& y = b.layers[l];
    for (const auto& [p, q] : {std::pair{&x.wo, &y.wo}, std::pair{&x.w_down, &y.w_down},
                               std::pair{&x.w_up, &y.w_up}, std::pair{&x.wq, &y.wq}}) {
      if (p->rows() != q->rows() || p->cols() != q->cols()) return INFINITY;
      m = std::max(m, max_abs_diff(*p, *q));
    }
  }
  return m;
}

}  // namespace

TEST(RunConfig, DefaultsFromEmptyJson) {
  const RunConfig c = run_config_from_json(json::object());
  EXPECT_EQ(to_json(c), to_json(RunConfig{}));
  EXPECT_EQ(c.prune.method, Method::kFangObc);
  EXPECT_EQ(c.prune.k_groups, 7u);
  EXPECT_EQ(c.prune.tau, 9.0);
}

TEST(RunConfig, UnknownKeysAndBadValuesRejected) {
  EXPECT_THROW(run_config_from_json(json{{"prun", json::object()}}), ConfigError);
  EXPECT_THROW(run_config_from_json(json{{"prune", {{"sparsty", 0.2}}}}), ConfigError);
  EXPECT_THROW(run_config_from_json(json{{"prune", {{"method", "magnitude"}}}}), ConfigError);
  EXPECT_THROW(method_from_string("fang"), ConfigError);
}

TEST(RunConfig, JsonRoundTrip) {
  RunConfig c = tiny_config();
  c.prune.method = Method::kFangFlap;
  c.prune.shared_group = false;
  c.prune.alloc = AllocMode::kTaylor;
  const RunConfig back = run_config_from_json(to_json(c), c.base_dir);
  EXPECT_EQ(to_json(back), to_json(c));
}

TEST(RunConfig, ReferenceConfigLoadsRelativeToItsDirectory) {
  const RunConfig c = load_run_config(kSource / "configs" / "reference.json");
  EXPECT_EQ(c.base_dir, kSource / "configs");
  EXPECT_TRUE(fs::exists(resolve_path(c, c.calib.corpus)));
  EXPECT_EQ(c.model.config.n_layers, 4u);
}

TEST(BlockBudget, HeadsRoundedFfnAbsorbsRest) {
  const ModelConfig cfg;  // d=64, 4 heads of 16, 192 gated neurons
  EXPECT_EQ(block_budget(cfg, 4, 192, 0.0).heads, 0u);
  EXPECT_EQ(block_budget(cfg, 4, 192, 0.0).neurons, 0u);
  // Hand computed: P_head = 4096, P_neuron = 192, block = 53248.
  const BlockBudget b = block_budget(cfg, 4, 192, 0.3);
  EXPECT_EQ(b.heads, 1u);
  EXPECT_EQ(b.neurons, 62u);  // round((15974.4 - 4096) / 192)
  const BlockBudget small = block_budget(cfg, 4, 192, 0.05);
  EXPECT_EQ(small.heads, 0u);
  EXPECT_EQ(small.neurons, 14u);  // round(2662.4 / 192)
}

TEST(RunPrune, ZeroSparsityLeavesModelUntouched) {
  RunConfig c = tiny_config();
  c.prune.sparsity = 0.0;
  const PruneOutcome out = run_prune(c);
  const fs::path dir = temp_dir("zero");
  save_checkpoint(out.pruned, dir / "pruned.fang");
  save_checkpoint(out.dense, dir / "dense.fang");
  EXPECT_EQ(slurp(dir / "pruned.fang"), slurp(dir / "dense.fang"));
  EXPECT_EQ(out.report["perplexity"]["pruned"], out.report["perplexity"]["dense"]);
}

TEST(RunPrune, DegenerateFangMatchesPlainObc) {
  RunConfig c = tiny_config();
  c.prune.alloc = AllocMode::kUniform;
  c.prune.method = Method::kObc;
  const PruneOutcome plain = run_prune(c);
  c.prune.method = Method::kFangObc;
  c.prune.k_groups = 1;
  c.prune.reweight = ReweightMode::kUniform;
  c.prune.shared_group = false;
  const PruneOutcome fang = run_prune(c, plain.dense);
  for (Index l = 0; l < plain.layers.size(); ++l) {
    EXPECT_EQ(plain.layers[l].head_mask, fang.layers[l].head_mask);
    EXPECT_EQ(plain.layers[l].neuron_mask, fang.layers[l].neuron_mask);
  }
  EXPECT_LE(max_weight_diff(plain.pruned, fang.pruned), 1e-8);
}

TEST(RunPrune, RealizedSparsityAndSharedGroupKept) {
  const PruneOutcome out = run_prune(tiny_config());
  EXPECT_NEAR(out.report["realized_sparsity"].get<double>(), 0.3, 0.03);
  EXPECT_TRUE(std::isfinite(out.report["perplexity"]["pruned"].get<double>()));
  for (const auto& layer : out.layers) {
    ASSERT_TRUE(layer.grouping.has_value());
    for (Index j : layer.grouping->shared) EXPECT_EQ(layer.neuron_mask[j], 0);
  }
}

TEST(RunPrune, DeterministicOutputs) {
  const RunConfig c = tiny_config();
  const PruneOutcome a = run_prune(c);
  const PruneOutcome b = run_prune(c);
  const fs::path da = temp_dir("det_a"), db = temp_dir("det_b");
  write_outputs(a, da);
  write_outputs(b, db);
  EXPECT_EQ(slurp(da / "pruned.fang"), slurp(db / "pruned.fang"));
  EXPECT_EQ(strip_timing(a.report), strip_timing(b.report));
  EXPECT_FALSE(strip_timing(a.report).contains("timing"));
}

TEST(RunPrune, AblationsRunAndDiffer) {
  // Three blocks so the allocation modes can disagree beyond the two endpoints.
  RunConfig c = tiny_config();
  c.model.config = small_config(3);
  const PruneOutcome base = run_prune(c);
  std::vector<RunConfig> variants;
  for (Method m : {Method::kObc, Method::kFlap, Method::kFangFlap}) {
    variants.push_back(c);
    variants.back().prune.method = m;
  }
  for (ReweightMode r : {ReweightMode::kReverse, ReweightMode::kUniform, ReweightMode::kOnlyMatched}) {
    variants.push_back(c);
    variants.back().prune.reweight = r;
  }
  variants.push_back(c);
  variants.back().prune.grouping = GroupingMode::kRandom;
  variants.push_back(c);
  variants.back().prune.shared_group = false;
  variants.push_back(c);
  variants.back().prune.propagation = Propagation::kOneshot;
  for (AllocMode a : {AllocMode::kUniform, AllocMode::kTaylor}) {
    variants.push_back(c);
    variants.back().prune.alloc = a;
  }
  for (const RunConfig& v : variants) {
    const PruneOutcome out = run_prune(v, base.dense);
    EXPECT_TRUE(std::isfinite(out.report["perplexity"]["pruned"].get<double>()));
    if (v.prune.alloc != c.prune.alloc) {
      // Small blocks can round distinct plans to the same unit counts.
      EXPECT_NE(out.plan.block_sparsity, base.plan.block_sparsity);
    } else {
      EXPECT_GT(max_weight_diff(base.pruned, out.pruned), 0.0) << to_json(v)["prune"].dump();
    }
  }
}

TEST(RandomMaskControl, SameCountsDifferentMasks) {
  const PruneOutcome out = run_prune(tiny_config());
  const Checkpoint ctrl = random_mask_control(out.dense, out, 3);
  EXPECT_EQ(ctrl.total_params(), out.pruned.total_params());
  EXPECT_GT(max_weight_diff(ctrl, out.pruned), 0.0);
}

TEST(RenderReport, HeaderOnlyRowsAndSchemaCheck) {
  json empty{{"schema_version", kReportSchemaVersion}, {"layers", json::array()}};
  const std::string header = render_report(empty);
  EXPECT_EQ(std::count(header.begin(), header.end(), '\n'), 1);
  EXPECT_NE(header.find("layer"), std::string::npos);

  const PruneOutcome out = run_prune(tiny_config());
  const std::string text = render_report(out.report);
  std::istringstream lines(text);
  std::string line;
  std::getline(lines, line);
  for (Index l = 0; l < 2; ++l) {
    ASSERT_TRUE(std::getline(lines, line));
    std::istringstream row(line);
    Index layer;
    double target;
    row >> layer >> target;
    EXPECT_EQ(layer, l);
    EXPECT_NEAR(target, out.report["layers"][l]["target_sparsity"].get<double>(), 1e-5 * target);
  }

  json bad = out.report;
  bad["schema_version"] = kReportSchemaVersion + 1;
  EXPECT_THROW(render_report(bad), FormatError);
  bad.erase("schema_version");
  EXPECT_THROW(render_report(bad), FormatError);
}

TEST(Cli, PruneEvalReportAndExitCodes) {
  const fs::path dir = temp_dir("cli");
  const fs::path cfg = dir / "config.json";
  json j = to_json(tiny_config());
  j["calib"]["corpus"] = (kSource / "data" / "train.txt").string();
  j["eval"]["corpus"] = (kSource / "data" / "eval.txt").string();
  std::ofstream(cfg) << j.dump(2);

  EXPECT_EQ(run_cli("prune --config " + cfg.string() + " --out " + (dir / "out").string()), 0);
  ASSERT_TRUE(fs::exists(dir / "out" / "pruned.fang"));
  EXPECT_EQ(run_cli("report --in " + (dir / "out" / "report.json").string()), 0);

  // eval agrees with the in-process perplexity to full printed precision.
  const std::string cmd = std::string(FANG_CLI_PATH) + " eval --ckpt " +
                          (dir / "out" / "pruned.fang").string() + " --corpus " +
                          (kSource / "data" / "eval.txt").string() + " --window 32";
  FILE* pipe = popen(cmd.c_str(), "r");
  ASSERT_NE(pipe, nullptr);
  double ppl = 0.0;
  ASSERT_EQ(std::fscanf(pipe, "perplexity %lf", &ppl), 1);
  pclose(pipe);
  const Checkpoint pruned = load_checkpoint(dir / "out" / "pruned.fang");
  const double in_process =
      perplexity(pruned, load_corpus(kSource / "data" / "eval.txt"), 32).perplexity;
  EXPECT_EQ(ppl, in_process);

  EXPECT_EQ(run_cli("prune --config " + cfg.string() + " --out " + (dir / "o2").string() +
                    " --sparsity 0.9"),
            2);
  EXPECT_EQ(run_cli("prune --config " + cfg.string() + " --out " + (dir / "o3").string() +
                    " --method magnitude"),
            2);
  EXPECT_EQ(run_cli("prune --bogus"), 2);
  EXPECT_FALSE(fs::exists(dir / "o2" / "pruned.fang"));
  EXPECT_EQ(run_cli("eval --ckpt /nonexistent.fang --corpus " + cfg.string()), 1);
}
