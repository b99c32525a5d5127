#include <tsipr/core.hpp>
#include <tsipr/io.hpp>

#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

using namespace tsipr;

namespace {

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / ("tsipr_cli_" + std::to_string(::getpid()));
    fs::remove_all(root_);
    fs::create_directories(root_);
    const int rc = run("gen-data", "--run-dir " + (root_ / "gen").string() + " " + data_args());
    ASSERT_EQ(rc, 0);
  }
  static void TearDownTestSuite() { fs::remove_all(root_); }

  static std::string data_args() {
    return "--set paths.dataset=" + (root_ / "data").string() +
           " --set data.image_size=256 --set data.n_train=4 --set data.n_val=0 --set data.n_test_easy=3"
           " --set data.n_test_decoy=2 --seed 3";
  }

  static int run(const std::string& cmd, const std::string& args) {
    const std::string line = std::string(TSIPR_CLI_PATH) + " " + cmd + " " + args + " >>" +
                             (root_ / "log.txt").string() + " 2>&1";
    const int status = std::system(line.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  static int code(ErrorKind k) { return 10 + static_cast<int>(k); }

  static fs::path root_;
};

fs::path Cli::root_;

}  // namespace

TEST_F(Cli, GenDataWritesManifestAndRunRecord) {
  const auto m = read_manifest(root_ / "data");
  EXPECT_EQ(m.split("train").size(), 4u);
  EXPECT_EQ(m.split("test_easy").size(), 3u);
  EXPECT_EQ(m.split("test_decoy").size(), 2u);
  const auto run = read_json(root_ / "gen" / "run.json");
  EXPECT_EQ(run.at("command"), "gen-data");
  EXPECT_EQ(run.at("seed"), 3);
  EXPECT_TRUE(run.contains("git_describe"));
  EXPECT_GE(run.at("wall_clock_s").get<double>(), 0.0);
  EXPECT_TRUE(fs::exists(root_ / "gen" / "config.json"));
}

TEST_F(Cli, GroundTruthPredictionsScorePerfectly) {
  const auto infer_dir = root_ / "gt_infer";
  ASSERT_EQ(run("infer", "--run-dir " + infer_dir.string() + " " + data_args() +
                             " --set infer.source='\"ground_truth\"' --set infer.split='\"test_decoy\"'"),
            0);
  ASSERT_EQ(run("eval", "--run-dir " + (root_ / "gt_eval").string() + " " + data_args() +
                            " --set infer.split='\"test_decoy\"' --set paths.predictions=" +
                            (infer_dir / "predictions.jsonl").string()),
            0);
  const auto metrics = read_json(root_ / "gt_eval" / "metrics.json");
  EXPECT_DOUBLE_EQ(metrics.at("fused").at("ap").get<double>(), 1.0);
  EXPECT_DOUBLE_EQ(metrics.at("fused").at("mre_px").get<double>(), 0.0);
  EXPECT_DOUBLE_EQ(metrics.at("root_within_5px").get<double>(), 1.0);
  EXPECT_TRUE(fs::exists(root_ / "gt_eval" / "pr_curve.csv"));
}

TEST_F(Cli, MissingInputsFailWithTypedExitCodes) {
  EXPECT_EQ(run("train-mspenet", "--run-dir " + (root_ / "x1").string() + " --set paths.dataset=" +
                                     (root_ / "nowhere").string()),
            code(ErrorKind::MissingPath));
  EXPECT_EQ(run("eval", "--run-dir " + (root_ / "x2").string() + " " + data_args()), code(ErrorKind::MissingPath));
  EXPECT_EQ(run("gen-data", "--run-dir " + (root_ / "x3").string() + " --set data.n_trian=3"), code(ErrorKind::Config));
  EXPECT_EQ(run("gen-data", "--run-dir " + (root_ / "x4").string() + " --set train_mspenet.milestones='[50]'"),
            code(ErrorKind::Config));
  EXPECT_NE(run("frobnicate", ""), 0);
}

TEST_F(Cli, CheckpointRefusesDifferentArchitecture) {
  const std::string tiny = data_args() +
                           " --set mspenet.input_size=64 --set mspenet.base_channels=4 --set mspenet.decoder_channels=4"
                           " --set mspenet.head_channels=4 --set train_mspenet.epochs=1 --set 'train_mspenet.milestones=[]'"
                           " --set train_mspenet.batch_size=4";
  const auto train_dir = root_ / "tiny_train";
  ASSERT_EQ(run("train-mspenet", "--run-dir " + train_dir.string() + " " + tiny), 0);
  ASSERT_TRUE(fs::exists(train_dir / "mspenet.pt"));
  ASSERT_TRUE(fs::exists(train_dir / "losses.csv"));
  const std::string ckpt = " --set paths.mspenet_checkpoint=" + (train_dir / "mspenet.pt").string() +
                           " --set infer.use_fusion=false";
  EXPECT_EQ(run("infer", "--run-dir " + (root_ / "ok_infer").string() + " " + tiny + ckpt), 0);
  EXPECT_EQ(run("infer", "--run-dir " + (root_ / "bad_infer").string() + " " + tiny + ckpt +
                             " --set mspenet.base_channels=8"),
            code(ErrorKind::CheckpointMismatch));
}
