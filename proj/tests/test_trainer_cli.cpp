// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cstring>

#include "test_support.hpp"

using namespace transunet;
using transunet::testing::TempDir;
using transunet::testing::tiny_cases;
using transunet::testing::tiny_run_config;

namespace {

int cli(std::vector<std::string> args, std::string* out = nullptr) {
  args.insert(args.begin(), "transunet");
  std::ostringstream o, e;
  const int rc = run_cli(args, o, e);
  if (out) *out = o.str() + e.str();
  return rc;
}

}  // namespace

TEST(PolyLr, ClosedFormValues) {
  EXPECT_EQ(poly_lr(0, 2000, 2e-3), 2e-3);
  EXPECT_NEAR(poly_lr(1000, 2000, 2e-3), 1.0718e-3, 1e-7);
  EXPECT_DOUBLE_EQ(poly_lr(1000, 2000, 2e-3), 2e-3 * std::pow(0.5, 0.9));
  EXPECT_EQ(poly_lr(2000, 2000, 2e-3), 0.0);
  EXPECT_EQ(poly_lr(2500, 2000, 2e-3), 0.0);
  EXPECT_DOUBLE_EQ(poly_lr(10, 40, 1.0, 2.0), 0.5625);
}

TEST(Config, ParseAndRoundTrip) {
  const auto cfg = parse_config("# comment\nvariant: enc\nwidths: 4 8 16\nbase_lr: 1e-3  # trailing\naugment: off\n");
  EXPECT_EQ(cfg.model.variant, Variant::kEnc);
  EXPECT_EQ(cfg.model.unet.widths, (std::vector<std::size_t>{4, 8, 16}));
  EXPECT_EQ(cfg.base_lr, 1e-3);
  EXPECT_FALSE(cfg.augment);
  EXPECT_EQ(to_text(parse_config(to_text(cfg))), to_text(cfg));
  EXPECT_EQ(fingerprint(parse_config(to_text(cfg))), fingerprint(cfg));
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  try {
    parse_config("seed: 1\nlearning_rate: 3\n", "run.cfg");
    FAIL() << "unknown key accepted";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("run.cfg:2"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("learning_rate"), std::string::npos);
  }
  EXPECT_THROW(parse_config("seed 1\n"), ConfigError);
  EXPECT_THROW(parse_config("batch_size: two\n"), ConfigError);
  EXPECT_THROW(parse_config("variant: mixed\n"), ConfigError);
  auto cfg = parse_config("batch_size: 0\n");
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Config, FingerprintCoversTrainingIdentityOnly) {
  RunConfig a, b;
  b.out_dir = "elsewhere";
  b.log_every = 7;
  EXPECT_EQ(fingerprint(a), fingerprint(b));
  b.base_lr = 1e-3;
  EXPECT_NE(fingerprint(a), fingerprint(b));
  const auto diff = fingerprint_diff(a, b);
  ASSERT_EQ(diff.size(), 1u);
  EXPECT_EQ(diff[0].rfind("base_lr: ", 0), 0u) << diff[0];
}

TEST(Config, EnvironmentOverridesPathsOnly) {
  ::setenv("TRANSUNET_DATA_DIR", "/tmp/somewhere", 1);
  RunConfig cfg;
  apply_env_overrides(cfg);
  ::unsetenv("TRANSUNET_DATA_DIR");
  EXPECT_EQ(cfg.data_dir, "/tmp/somewhere");
  EXPECT_EQ(cfg.out_dir, "run");
}

TEST(Checkpoint, GoldenBytes) {
  Checkpoint ck;
  ck.iteration = 3;
  ck.fingerprint = "0123456789abcdef";
  ck.config = {{"seed", "5"}};
  ck.weights.add("a", Tensor<float>(Shape{2}, {1.0f, -2.0f}));
  ck.optimizer.add("a", Tensor<float>(Shape{2}, {0.5f, 0.0f}));
  const std::string manifest =
      "iteration 3\nfingerprint 0123456789abcdef\nconfig seed: 5\ntensor a 1 2 0 2\ntensor opt.a 1 2 8 2\n";
  std::string want = "TUNETCKP";
  want += std::string("\x01\x00\x00\x00", 4);
  want += std::string(1, char(manifest.size())) + std::string(3, '\0');
  want += manifest;
  want += std::string("\x00\x00\x80\x3f\x00\x00\x00\xc0\x00\x00\x00\x3f\x00\x00\x00\x00", 16);
  const auto bytes = serialize_checkpoint(ck);
  EXPECT_EQ(bytes, want);
  const auto back = parse_checkpoint(bytes);
  EXPECT_EQ(back.iteration, 3u);
  EXPECT_EQ(back.fingerprint, ck.fingerprint);
  EXPECT_EQ(back.config, ck.config);
  EXPECT_EQ(back.weights["a"].vec(), ck.weights["a"].vec());
  EXPECT_EQ(back.optimizer["a"].vec(), ck.optimizer["a"].vec());
}

TEST(Checkpoint, CorruptionIsReported) {
  Checkpoint ck;
  ck.fingerprint = "0000000000000000";
  ck.weights.add("w", Tensor<float>(Shape{3}, {1, 2, 3}));
  const auto good = serialize_checkpoint(ck);
  auto bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_THROW(parse_checkpoint(bad_magic), FormatError);
  auto bad_version = good;
  bad_version[8] = 2;
  EXPECT_THROW(parse_checkpoint(bad_version), FormatError);
  try {
    parse_checkpoint(good.substr(0, good.size() - 4));
    FAIL() << "truncated checkpoint accepted";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse_checkpoint(good + "xx"), FormatError);
  EXPECT_THROW(load_checkpoint("/nonexistent/ck.tuc"), FormatError);
}

TEST(Trainer, LoggedLrFollowsSchedule) {
  auto cfg = tiny_run_config();
  cfg.max_iters = 5;
  Trainer t(cfg, tiny_cases(2));
  while (!t.done()) {
    const auto r = t.step().record;
    EXPECT_NEAR(r.lr, 2e-3 * std::pow(1.0 - double(r.iteration) / 5.0, 0.9), 1e-15);
  }
  EXPECT_THROW(t.step(), ContractError);
}

TEST(Trainer, DeterministicForAFixedSeed) {
  for (auto v : {Variant::kDec, Variant::kEnc}) {
    auto cfg = tiny_run_config(v);
    cfg.max_iters = 10;
    cfg.augment = true;
    std::vector<std::string> logs[2];
    for (auto& log : logs) {
      Trainer t(cfg, tiny_cases(2));
      while (!t.done()) log.push_back(format_record(t.step().record));
    }
    EXPECT_EQ(logs[0], logs[1]);
  }
}

TEST(Trainer, ResumeReproducesUninterruptedRun) {
  auto cfg = tiny_run_config();
  cfg.max_iters = 5;
  cfg.augment = true;
  Trainer full(cfg, tiny_cases(2));
  std::vector<double> losses;
  while (!full.done()) losses.push_back(full.step().record.total);

  Trainer first(cfg, tiny_cases(2));
  first.step();
  first.step();
  const auto bytes = serialize_checkpoint(first.checkpoint());
  Trainer resumed(cfg, tiny_cases(2));
  resumed.restore(parse_checkpoint(bytes));
  EXPECT_EQ(resumed.iteration(), 2u);
  for (std::size_t t = 2; t < 5; ++t) EXPECT_NEAR(resumed.step().record.total, losses[t], 1e-6);
}

TEST(Trainer, RefusesCheckpointFromDifferentConfig) {
  auto cfg = tiny_run_config();
  Trainer a(cfg, tiny_cases(2));
  a.step();
  cfg.base_lr = 5e-3;
  Trainer b(cfg, tiny_cases(2));
  try {
    b.restore(a.checkpoint());
    FAIL() << "mismatched checkpoint accepted";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("base_lr"), std::string::npos) << e.what();
  }
}

TEST(Trainer, RejectsEmptyOrMismatchedData) {
  EXPECT_THROW(Trainer(tiny_run_config(), {}), ConfigError);
  EXPECT_THROW(Trainer(tiny_run_config(), tiny_cases(1, {8, 8, 4})), ConfigError);
}

TEST(Trainer, TrainWritesLogAndLoadableCheckpoint) {
  TempDir tmp("train");
  auto cfg = tiny_run_config();
  cfg.out_dir = tmp.path.string();
  cfg.max_iters = 4;
  const auto records = train(cfg, tiny_cases(2), {.quiet = true});
  ASSERT_EQ(records.size(), 4u);
  const auto log = io_detail::read_file(tmp.path / "train_log.tsv");
  EXPECT_EQ(log.substr(0, log.find('\n')), kTrainLogHeader);
  EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 5);
  const auto m = load_model(tmp.path / "checkpoint.tuc");
  const auto cases = tiny_cases(2);
  const auto a = predict(m.config.model, m.weights, cases[0].image);
  const auto b = predict(m.config.model, m.weights, cases[0].image);
  EXPECT_EQ(a.labels, b.labels);
  for (auto l : a.labels) EXPECT_LE(l, 2);
}

TEST(Cli, UsageErrorsExitOne) {
  std::string out;
  EXPECT_EQ(cli({"--bogus"}, &out), 1);
  EXPECT_NE(out.find("Usage"), std::string::npos);
  EXPECT_EQ(cli({"frobnicate"}), 1);
  EXPECT_EQ(cli({"eval", "--pred", "x"}), 1);
  EXPECT_EQ(cli({}), 1);
  EXPECT_EQ(cli({"--help"}), 0);
}

TEST(Cli, EvalIdenticalDirsIsPerfect) {
  TempDir tmp("cli_eval");
  const auto d = (tmp.path / "data").string();
  ASSERT_EQ(cli({"synth", "--out", d, "--count", "2", "--size", "8", "--seed", "3"}), 0);
  std::string out;
  EXPECT_EQ(cli({"eval", "--pred", d, "--gt", d, "--out", (tmp.path / "rep").string()}, &out), 0);
  std::istringstream lines(io_detail::read_file(tmp.path / "rep.jsonl"));
  std::string line, last;
  while (std::getline(lines, line)) last = line;
  const auto cohort = nlohmann::json::parse(last);
  for (const auto& r : cohort["regions"]) {
    EXPECT_EQ(r["dice"], 1.0);
    EXPECT_EQ(r["lesion_dice"], 1.0);
    EXPECT_EQ(r["hd95"], 0.0);
  }
}

TEST(Cli, DataErrorsExitTwo) {
  TempDir tmp("cli_data");
  EXPECT_EQ(cli({"eval", "--pred", (tmp.path / "none").string(), "--gt", tmp.path.string()}), 2);
  const auto d = (tmp.path / "data").string();
  ASSERT_EQ(cli({"synth", "--out", d, "--count", "1", "--size", "8"}), 0);
  std::filesystem::create_directories(tmp.path / "empty");
  EXPECT_EQ(cli({"eval", "--pred", (tmp.path / "empty").string(), "--gt", d}), 2);
  // Default config expects 32^3 volumes.
  EXPECT_EQ(cli({"train", "--data", d, "--out", (tmp.path / "run").string(), "--quiet"}), 2);
}

TEST(Cli, GradcheckPasses) {
  std::string out;
  EXPECT_EQ(cli({"gradcheck", "--seeds", "2"}, &out), 0) << out;
  EXPECT_NE(out.find("matmul"), std::string::npos);
  EXPECT_EQ(out.find("FAIL"), std::string::npos);
}

TEST(Cli, PipelineIsSeedDeterministic) {
  TempDir a("pipe_a"), b("pipe_b");
  const auto ra = transunet::testing::cli_pipeline(a.path, Variant::kDec, 11);
  EXPECT_EQ(ra, transunet::testing::cli_pipeline(b.path, Variant::kDec, 11));
  EXPECT_NE(ra.find("\"kind\":\"cohort\""), std::string::npos);
}
