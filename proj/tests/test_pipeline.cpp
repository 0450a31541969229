#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "support/fake_completions_server.hpp"
#include "support/scenarios.hpp"
#include "xmodel/cli.hpp"

using namespace xmodel;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code;
  std::string out, err;
};

CliResult run(std::vector<std::string> args, const cli::BackendRegistry* backends = nullptr) {
  args.insert(args.begin(), "xmodel");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run_cli(static_cast<int>(argv.size()), argv.data(), out, err, backends);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::size_t count_lines(const fs::path& p) {
  const auto s = slurp(p);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

class PipelineTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = scenario::fresh_dir(::testing::UnitTest::GetInstance()->current_test_info()->name());
    world = scenario::make_mc_world(dir, 40, 0.7, 17);
    weak = std::make_unique<mock::ScriptedBackend>(scenario::confident_generator(world));
    strong = std::make_unique<mock::ScriptedBackend>(scenario::knowing_verifier(world));
    registry["weak"] = {weak.get(), "weak-v1"};
    registry["strong"] = {strong.get(), "strong-v1"};
  }

  std::vector<std::string> base(const std::string& out = "out") const {
    return {"--dataset", world.dataset.string(), "--preset", "mmlu", "--generator", "weak", "--verifier", "strong",
            "--out", (dir / out).string(), "--store", (dir / "store").string()};
  }

  std::vector<std::string> cmd(const std::string& sub, std::vector<std::string> extra = {}, const std::string& out = "out") const {
    auto args = base(out);
    args.insert(args.begin(), sub);
    args.insert(args.end(), extra.begin(), extra.end());
    return args;
  }

  void run_all(const std::string& out = "out") {
    for (const char* step : {"generate", "signals", "eval"}) {
      const auto r = run(cmd(step, {}, out), &registry);
      ASSERT_EQ(r.code, 0) << step << ": " << r.err;
    }
  }

  fs::path dir;
  scenario::McWorld world;
  std::unique_ptr<mock::ScriptedBackend> weak, strong;
  cli::BackendRegistry registry;
};

}  // namespace

TEST_F(PipelineTest, GenerateWritesOneGradedAnswerPerInstance) {
  const auto r = run(cmd("generate"), &registry);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(count_lines(dir / "out/answers/weak.jsonl"), 40u);
  EXPECT_EQ(count_lines(dir / "out/answers/strong.jsonl"), 40u);
  const auto diag = nlohmann::json::parse(slurp(dir / "out/answers/weak.diagnostics.json"));
  EXPECT_EQ(diag["correct"], 28);
  EXPECT_EQ(diag["extraction_failures"], 0);
}

TEST_F(PipelineTest, LimitTenProducesTenRecords) {
  ASSERT_EQ(run(cmd("generate", {"--limit", "10"}), &registry).code, 0);
  ASSERT_EQ(run(cmd("signals", {"--limit", "10"}), &registry).code, 0);
  EXPECT_EQ(count_lines(dir / "out/answers/weak.jsonl"), 10u);
  EXPECT_EQ(count_lines(dir / "out/signals/weak__strong.jsonl"), 10u);
}

TEST_F(PipelineTest, RerunIsCacheOnly) {
  run_all();
  weak->clear_calls();
  strong->clear_calls();
  ASSERT_EQ(run(cmd("generate"), &registry).code, 0);
  ASSERT_EQ(run(cmd("signals"), &registry).code, 0);
  EXPECT_EQ(weak->call_count(), 0u);
  EXPECT_EQ(strong->call_count(), 0u);
}

TEST_F(PipelineTest, VerifierNeverGeneratesDuringSignals) {
  ASSERT_EQ(run(cmd("generate"), &registry).code, 0);
  strong->clear_calls();
  ASSERT_EQ(run(cmd("signals"), &registry).code, 0);
  EXPECT_EQ(strong->call_count(mock::Call::Kind::generate), 0u);
  EXPECT_EQ(strong->call_count(mock::Call::Kind::score), 40u);
}

TEST_F(PipelineTest, SelfPairCmpEqualsGPpl) {
  auto args = cmd("generate");
  args[8] = "weak";  // --verifier weak
  ASSERT_EQ(run(args, &registry).code, 0);
  args[0] = "signals";
  ASSERT_EQ(run(args, &registry).code, 0);
  for (const auto& rec : pipeline::read_signals(dir / "out/signals/weak__weak.jsonl")) {
    ASSERT_TRUE(rec.log_cmp && rec.log_gppl);
    EXPECT_EQ(*rec.log_cmp, *rec.log_gppl);
  }
}

TEST_F(PipelineTest, VerifierWithoutEntropyOmitsCme) {
  auto script = scenario::knowing_verifier(world, "flat");
  script.entropy_support = EntropySupport::none();
  mock::ScriptedBackend flat(script);
  registry["flat"] = {&flat, "flat-v1"};
  auto args = cmd("generate");
  args[8] = "flat";
  ASSERT_EQ(run(args, &registry).code, 0);
  args[0] = "signals";
  ASSERT_EQ(run(args, &registry).code, 0);
  for (const auto& rec : pipeline::read_signals(dir / "out/signals/weak__flat.jsonl")) {
    EXPECT_FALSE(rec.cme);
    EXPECT_TRUE(rec.log_cmp);
  }
  const auto meta = nlohmann::json::parse(slurp(dir / "out/signals/weak__flat.meta.json"));
  EXPECT_EQ(meta["present"]["cme"], 0);
  EXPECT_EQ(meta["present"]["cmp"], 40);
}

TEST_F(PipelineTest, EvalOracleVerifierGivesPerfectCmpAuroc) {
  run_all();
  const auto report = nlohmann::json::parse(slurp(dir / "out/eval/weak__strong.json"));
  EXPECT_EQ(report["signals"]["cmp"]["auroc"], 1.0);
  EXPECT_EQ(report["signals"]["g_ent"]["auroc"], 0.5);
  EXPECT_TRUE(report["signals"]["cmp"].contains("apgr_raw"));
  EXPECT_TRUE(report["signals"]["cmp"].contains("apgr_normalized"));
  EXPECT_EQ(report["best_auroc_signal"], "cmp");
  const auto summary = nlohmann::json::parse(slurp(dir / "out/eval/summary.json"));
  EXPECT_EQ(summary["signals"]["cmp"]["mean_auroc"], 1.0);
}

TEST_F(PipelineTest, SmallGapPairExcludedFromMean) {
  // Weak answers 28/40 correctly; this verifier 29/40, a gap of 0.025.
  auto script = scenario::knowing_verifier(world, "near");
  std::size_t wrong = 0;
  for (auto& [prompt, answer] : script.answers) {
    if (wrong == 11) break;
    answer = std::string(" ") + static_cast<char>('A' + (world.gold_by_prompt[prompt] - 'A' + 1) % 4);
    ++wrong;
  }
  mock::ScriptedBackend near(script);
  registry["near"] = {&near, "near-v1"};
  auto args = cmd("generate", {"--verifier", "near"});
  for (const char* step : {"generate", "signals", "eval"}) {
    args[0] = step;
    const auto r = run(args, &registry);
    ASSERT_EQ(r.code, 0) << step << ": " << r.err;
  }
  const auto near_report = nlohmann::json::parse(slurp(dir / "out/eval/weak__near.json"));
  EXPECT_NEAR(near_report["gap"].get<double>(), 0.025, 1e-12);
  EXPECT_TRUE(near_report["signals"]["cmp"]["excluded"].get<bool>());
  const auto summary = nlohmann::json::parse(slurp(dir / "out/eval/summary.json"));
  EXPECT_EQ(summary["signals"]["cmp"]["apgr_pairs"], 1);
  EXPECT_EQ(summary["signals"]["cmp"]["auroc_pairs"], 2);
  EXPECT_EQ(summary["signals"]["cmp"]["gap_excluded_pairs"], nlohmann::json::array({"weak__near"}));
  const auto strong_report = nlohmann::json::parse(slurp(dir / "out/eval/weak__strong.json"));
  EXPECT_EQ(summary["signals"]["cmp"]["mean_apgr_raw"], strong_report["signals"]["cmp"]["apgr_raw"]);
}

TEST_F(PipelineTest, RouteBudgetEndpoints) {
  run_all();
  auto r0 = run(cmd("route", {"--budget", "0"}), &registry);
  ASSERT_EQ(r0.code, 0) << r0.err;
  auto summary0 = nlohmann::json::parse(slurp(dir / "out/route/weak__strong__cmp.summary.json"));
  EXPECT_EQ(summary0["routed_fraction"], 0.0);
  EXPECT_DOUBLE_EQ(summary0["routed_accuracy"].get<double>(), 0.7);
  ASSERT_EQ(run(cmd("route", {"--budget", "1"}), &registry).code, 0);
  auto summary1 = nlohmann::json::parse(slurp(dir / "out/route/weak__strong__cmp.summary.json"));
  EXPECT_EQ(summary1["routed_fraction"], 1.0);
  EXPECT_EQ(summary1["routed_accuracy"], 1.0);
  EXPECT_EQ(summary1["threshold"], "-inf");
  EXPECT_EQ(count_lines(dir / "out/route/weak__strong__cmp.jsonl"), 40u);
}

TEST_F(PipelineTest, AbstainWritesSeparateFiles) {
  run_all();
  ASSERT_EQ(run(cmd("route", {"--budget", "0.3", "--abstain"}), &registry).code, 0);
  const auto s = nlohmann::json::parse(slurp(dir / "out/route/weak__strong__cmp__abstain.summary.json"));
  EXPECT_EQ(s["retained_accuracy"], 1.0);
}

TEST_F(PipelineTest, ReportOnEmptyStoreHasHeadersOnly) {
  const auto r = run({"report", "--store", (dir / "empty-store").string(), "--out", (dir / "report").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(slurp(dir / "report/auroc_table.csv"), "run_id,pair,generator,verifier,signal,n,auroc\n");
  EXPECT_EQ(count_lines(dir / "report/coverage_accuracy.csv"), 1u);
  EXPECT_EQ(count_lines(dir / "report/gap_correlation.csv"), 1u);
}

TEST_F(PipelineTest, ReportMergesRunsIntoOneScatter) {
  run_all("out1");
  run_all("out2");
  const auto r = run({"report", "--store", (dir / "store").string(), "--out", (dir / "report").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto scatter = slurp(dir / "report/gap_vs_auroc.csv");
  std::istringstream lines(scatter);
  std::string line;
  std::size_t cmp_rows = 0;
  while (std::getline(lines, line)) cmp_rows += line.find(",weak__strong,cmp,") != std::string::npos;
  EXPECT_EQ(cmp_rows, 2u);

  // Last coverage row of every curve sits at coverage 1.
  std::istringstream cov(slurp(dir / "report/coverage_accuracy.csv"));
  std::getline(cov, line);
  std::string prev_key, prev_line;
  auto check = [](const std::string& l) {
    if (l.empty()) return;
    const auto parts = l.substr(0, l.rfind(','));
    EXPECT_EQ(std::stod(parts.substr(parts.rfind(',') + 1)), 1.0) << l;
  };
  while (std::getline(cov, line)) {
    const auto key = line.substr(0, line.find(',', line.find(',', line.find(',') + 1) + 1));
    if (!prev_key.empty() && key != prev_key) check(prev_line);
    prev_key = key;
    prev_line = line;
  }
  check(prev_line);
}

TEST_F(PipelineTest, ReportListsMissingRuns) {
  run_all();
  const auto r = run({"report", "--runs", "nope", "--store", (dir / "store").string(), "--out", (dir / "report").string()});
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(slurp(dir / "report/missing_runs.txt").find("nope"), std::string::npos);
}

TEST_F(PipelineTest, DuplicateRunIdIsConfigError) {
  ASSERT_EQ(run(cmd("generate"), &registry).code, 0);
  ASSERT_EQ(run(cmd("signals"), &registry).code, 0);
  ASSERT_EQ(run(cmd("eval", {"--run-id", "fixed"}), &registry).code, 0);
  EXPECT_EQ(run(cmd("eval", {"--run-id", "fixed"}), &registry).code, 2);
}

TEST_F(PipelineTest, ConfigFileOverridesFlags) {
  const auto cfg = dir / "run.json";
  std::ofstream(cfg) << nlohmann::json{{"limit", 5}, {"out", (dir / "from-config").string()}}.dump();
  ASSERT_EQ(run(cmd("generate", {"--limit", "20", "--config", cfg.string()}), &registry).code, 0);
  EXPECT_EQ(count_lines(dir / "from-config/answers/weak.jsonl"), 5u);
}

TEST_F(PipelineTest, ExitCodes) {
  auto with = [&](std::size_t at, std::string value) {
    auto args = cmd("generate");
    args[at] = std::move(value);
    return args;
  };
  EXPECT_EQ(run(with(4, "nope"), &registry).code, 2);   // --preset
  EXPECT_EQ(run(with(6, "ghost"), &registry).code, 2);  // --generator
  EXPECT_EQ(run(with(4, "gsm8k"), &registry).code, 3);  // task type mismatch
  EXPECT_EQ(run(cmd("generate", {"--preset", "gsm8k"}), &registry).code, 2);  // repeated flag
  auto missing = cmd("generate");
  missing[2] = (dir / "absent.jsonl").string();
  EXPECT_EQ(run(missing, &registry).code, 3);
  EXPECT_EQ(run({"bogus"}).code, 2);
  EXPECT_EQ(run(cmd("route", {"--budget", "0.5"}), &registry).code, 3);  // no signals yet
}

TEST(PipelineHttp, BackendConfigFileDrivesHttpBackends) {
  const auto dir = scenario::fresh_dir("pipeline-http");
  const auto world = scenario::make_mc_world(dir, 12, 0.5, 3);
  mock::ScriptedBackend weak(scenario::confident_generator(world));
  mock::ScriptedBackend strong(scenario::knowing_verifier(world));
  testsupport::FakeCompletionsServer weak_srv(weak), strong_srv(strong);
  const auto cfg = dir / "backends.json";
  std::ofstream(cfg) << nlohmann::json::array({{{"id", "weak"}, {"base_url", weak_srv.base_url()}, {"logprobs_k", 5}, {"vocab_size", 8}},
                                               {{"id", "strong"}, {"base_url", strong_srv.base_url()}, {"logprobs_k", 5}, {"vocab_size", 8}}})
                            .dump();
  for (const char* step : {"generate", "signals", "eval"}) {
    const auto r = run({step, "--dataset", world.dataset.string(), "--generator", "weak", "--verifier", "strong", "--out",
                        (dir / "out").string(), "--store", (dir / "store").string(), "--backend-config", cfg.string(),
                        "--signals", "cmp,cme,g_ppl,g_ent,p_true", "--parallel", "4"});
    ASSERT_EQ(r.code, 0) << step << ": " << r.err;
  }
  const auto report = nlohmann::json::parse(slurp(dir / "out/eval/weak__strong.json"));
  EXPECT_EQ(report["signals"]["cmp"]["auroc"], 1.0);
  EXPECT_EQ(report["signals"]["cmp"]["n"], 12);
  EXPECT_EQ(report["signals"]["p_true"]["n"], 12);
}
