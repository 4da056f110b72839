// Copyright 2026 The omniscan Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <fstream>
#include <sstream>

#include "omniscan/cli.hpp"

namespace omniscan::cli {
namespace {

std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream s;
  s << is.rdbuf();
  return s.str();
}

std::vector<std::string> lines(const fs::path& p) {
  std::istringstream is(read_file(p));
  std::vector<std::string> out;
  for (std::string l; std::getline(is, l);) out.push_back(l);
  return out;
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("omniscan_cli_" + std::to_string(::getpid()) + "_" +
            ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  // Micro model so every command finishes in about a second.
  RunConfig micro(const std::string& sub) const {
    RunConfig rc;
    rc.out_dir = (dir_ / sub).string();
    rc.overrides = {"channels=8", "ssm_hidden=4", "n_blocks=1", "stft_window=16",
                    "stft_hop=8", "segment_seconds=0.02", "steps=20",
                    "steps_per_epoch=10", "valid_utterances=1",
                    "eval_utterances=3", "eval_seconds=0.03"};
    return rc;
  }

  // Paired WAV set from the synthetic generator.
  void write_paired(const fs::path& root, std::size_t n) const {
    for (const char* d : {"mix", "s1", "s2"}) fs::create_directories(root / d);
    signal::SynthConfig sc;
    sc.seconds = 0.1;
    for (std::size_t i = 0; i < n; ++i) {
      const auto m = signal::synth_mixture(100 + i, sc);
      const std::string id = "utt" + std::to_string(i) + ".wav";
      signal::wav_write((root / "mix" / id).string(), m.mixture);
      signal::wav_write((root / "s1" / id).string(), m.sources[0]);
      signal::wav_write((root / "s2" / id).string(), m.sources[1]);
    }
  }

  fs::path dir_;
};

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd =
      std::string(OMNISCAN_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int st = std::system(cmd.c_str());
  return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

TEST(Csv, QuotesOnlyWhenNeeded) {
  EXPECT_EQ(csv_field("plain"), "plain");
  EXPECT_EQ(csv_field("a,b"), "\"a,b\"");
  EXPECT_EQ(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
  EXPECT_EQ(csv_field("two\nlines"), "\"two\nlines\"");
  EXPECT_EQ(csv_field(""), "");
}

TEST_F(CliTest, CsvWriterUsesCrlf) {
  {
    CsvWriter w(dir_ / "t.csv");
    w.row({"a", "b,c"});
    w.row({"1", "2"});
  }
  EXPECT_EQ(read_file(dir_ / "t.csv"), "a,\"b,c\"\r\n1,2\r\n");
  EXPECT_THROW(CsvWriter(dir_ / "no" / "such" / "dir.csv"), IoError);
}

TEST_F(CliTest, TrainSmokeThenEvalSynthetic) {
  const RunConfig rc = micro("run");
  std::ostringstream log;
  const TrainOutcome t = cmd_train(rc, log);
  ASSERT_TRUE(fs::exists(t.checkpoint));
  ASSERT_EQ(t.log.size(), 20u);
  const auto csv = lines(fs::path(rc.out_dir) / "train_log.csv");
  ASSERT_EQ(csv.size(), 21u);
  EXPECT_EQ(csv[0], "step,loss,grad_norm,lr,valid_loss,seed\r");
  const json manifest = json::parse(read_file(fs::path(rc.out_dir) / "config.json"));
  EXPECT_EQ(manifest["seed"], 17);
  EXPECT_EQ(manifest["config"]["channels"], 8);

  RunConfig ev;
  ev.checkpoint = t.checkpoint;
  ev.out_dir = rc.out_dir;
  const auto rows = cmd_eval(ev, log);
  EXPECT_EQ(rows.size(), 3u);
  const auto m = lines(fs::path(rc.out_dir) / "metrics.csv");
  ASSERT_EQ(m.size(), 1u + 3u + 1u);
  EXPECT_EQ(m[0], "utterance_id,si_sdr,si_sdri,sdr,sdri\r");
  EXPECT_EQ(m.back().rfind("mean,", 0), 0u);
  // Evaluation keys may be overridden at eval time.
  ev.overrides = {"eval_utterances=2"};
  EXPECT_EQ(cmd_eval(ev, log).size(), 2u);
}

TEST_F(CliTest, TrainRejectsUnknownKey) {
  RunConfig rc = micro("bad");
  rc.overrides.push_back("learning_rate=1");
  std::ostringstream log;
  EXPECT_THROW(cmd_train(rc, log), ContractError);
}

TEST_F(CliTest, EstimatesEqualReferencesHitClamp) {
  write_paired(dir_ / "data", 3);
  RunConfig rc;
  rc.data_dir = (dir_ / "data").string();
  rc.estimates_dir = rc.data_dir;
  rc.out_dir = (dir_ / "out").string();
  std::ostringstream log;
  const auto m = sepnet::mean_metrics(cmd_eval(rc, log));
  EXPECT_EQ(m.si_sdr, 60.0);
  EXPECT_EQ(m.sdr, 60.0);
  EXPECT_EQ(lines(dir_ / "out" / "metrics.csv").size(), 5u);
}

TEST_F(CliTest, MixtureAsEstimateGivesZeroImprovement) {
  write_paired(dir_ / "data", 3);
  for (const char* s : {"s1", "s2"}) {
    fs::create_directories(dir_ / "est" / s);
    for (const auto& e : fs::directory_iterator(dir_ / "data" / "mix"))
      fs::copy_file(e.path(), dir_ / "est" / s / e.path().filename());
  }
  RunConfig rc;
  rc.data_dir = (dir_ / "data").string();
  rc.estimates_dir = (dir_ / "est").string();
  rc.out_dir = (dir_ / "out").string();
  std::ostringstream log;
  const auto m = sepnet::mean_metrics(cmd_eval(rc, log));
  EXPECT_EQ(m.si_sdri, 0.0);
  EXPECT_EQ(m.sdri, 0.0);
}

TEST_F(CliTest, MissingFilesAreListed) {
  write_paired(dir_ / "data", 2);
  fs::remove(dir_ / "data" / "s2" / "utt1.wav");
  RunConfig rc;
  rc.data_dir = (dir_ / "data").string();
  rc.estimates_dir = rc.data_dir;
  rc.out_dir = (dir_ / "out").string();
  std::ostringstream log;
  try {
    cmd_eval(rc, log);
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("utt1.wav"), std::string::npos);
  }
  RunConfig ck;
  ck.checkpoint = (dir_ / "nope.ckpt").string();
  ck.out_dir = rc.out_dir;
  EXPECT_THROW(cmd_eval(ck, log), IoError);
  rc.data_dir = (dir_ / "empty").string();
  EXPECT_THROW(cmd_eval(rc, log), IoError);
}

TEST_F(CliTest, BenchMacsAreDeterministic) {
  RunConfig rc;
  rc.overrides = {"timing=false"};
  std::ostringstream log;
  rc.out_dir = (dir_ / "a").string();
  cmd_bench(rc, log);
  rc.out_dir = (dir_ / "b").string();
  const BenchOutcome b = cmd_bench(rc, log);
  EXPECT_EQ(read_file(dir_ / "a" / "bench.csv"), read_file(dir_ / "b" / "bench.csv"));
  EXPECT_EQ(read_file(dir_ / "a" / "bench_summary.txt"),
            read_file(dir_ / "b" / "bench_summary.txt"));
  EXPECT_EQ(b.rows.size(), 10u);
  rc.overrides = {"timing=false", "Q=3"};
  EXPECT_THROW(bench_config(rc), ContractError);
  rc.overrides = {"grid=[10,0]"};
  EXPECT_THROW(bench_config(rc), ContractError);
}

TEST_F(CliTest, AblationRunsEveryCell) {
  RunConfig rc = micro("ablate");
  rc.overrides.push_back("steps=2");
  rc.overrides.push_back("eval_utterances=1");
  std::ostringstream log;
  const AblationOutcome res = cmd_ablate(rc, log);
  ASSERT_EQ(res.cells.size(), 7u);
  for (const auto& c : res.cells) EXPECT_TRUE(c.ok) << c.configuration << ": " << c.error;
  EXPECT_TRUE(res.deltas_ok);
  EXPECT_EQ(res.cells[0].params, res.cells[2].params);  // 4d_tf vs 8d_tf
  EXPECT_EQ(lines(fs::path(rc.out_dir) / "ablation.csv").size(), 8u);
  EXPECT_NE(read_file(fs::path(rc.out_dir) / "ablation_summary.txt").find("delta check: ok"),
            std::string::npos);
}

TEST_F(CliTest, BinaryExitCodes) {
  EXPECT_EQ(run_cli("verify --fault scan_composition --out " + (dir_ / "v").string(),
                    dir_ / "v.log"),
            1);
  const std::string out = read_file(dir_ / "v.log");
  EXPECT_NE(out.find("FAIL"), std::string::npos);
  EXPECT_NE(out.find("failed: parallel_sequential"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir_ / "v" / "verify.csv"));
  EXPECT_EQ(run_cli("verify --fault bogus", dir_ / "b.log"), 2);
  EXPECT_EQ(run_cli("train --set nokey=1 --out " + (dir_ / "t").string(), dir_ / "t.log"), 2);
  EXPECT_EQ(run_cli("bench --set timing=false --out " + (dir_ / "bench").string(),
                    dir_ / "bench.log"),
            0);
  EXPECT_TRUE(fs::exists(dir_ / "bench" / "bench.csv"));
}

}  // namespace
}  // namespace omniscan::cli
