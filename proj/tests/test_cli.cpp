#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "osseg/checkpoint.hpp"
#include "osseg/gradcheck.hpp"

using namespace osseg;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("osseg_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void put(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

struct Run {
  int code;
  std::string output;
};

Run cli(const std::string& args) {
  const auto out = fs::temp_directory_path() / "osseg_cli_output.txt";
  const std::string cmd = std::string(OSSEG_CLI) + " " + args + " > " + out.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out)};
}

Checkpoint small_checkpoint(HeadKind kind) {
  ModelConfig c;
  c.head_kind = kind;
  c.backbone_widths = {4, 6, 8, 8};
  c.ladder_width = 6;
  Checkpoint ck{Model::build(c, Rng(5)), 5, 3};
  ck.model.batch_norms()[0].stats.mean[1] = 0.25f;
  return ck;
}

const char* kTrainConfig =
    "head_kind = twohead\nepochs = 1\nbatch_size = 4\nlearning_rate = 4e-4\nseed = 0\n"
    "image_size = 32\ncrop = 32\ntrain_count = 4\nnegative_count = 4\n"
    "backbone_widths = 4,6,8,8\nladder_width = 6\n";

}  // namespace

TEST(Checkpoint, RoundTripIsByteIdentical) {
  for (auto kind : {HeadKind::multiclass, HeadKind::twohead, HeadKind::confidence, HeadKind::cplus1}) {
    const std::string bytes = serialize_checkpoint(small_checkpoint(kind));
    const auto back = deserialize_checkpoint(bytes);
    EXPECT_EQ(serialize_checkpoint(back), bytes);
    EXPECT_EQ(back.seed, 5u);
    EXPECT_EQ(back.epoch, 3u);
    EXPECT_EQ(back.model.config(), small_checkpoint(kind).model.config());
  }
}

TEST(Checkpoint, FileRoundTrip) {
  const auto dir = scratch("ckpt");
  const auto ck = small_checkpoint(HeadKind::twohead);
  save_checkpoint((dir / "a.ckpt").string(), ck);
  save_checkpoint((dir / "b.ckpt").string(), load_checkpoint((dir / "a.ckpt").string()));
  EXPECT_EQ(slurp(dir / "a.ckpt"), slurp(dir / "b.ckpt"));
  EXPECT_EQ(slurp(dir / "a.ckpt").substr(0, 8), std::string("ODSG\x01\0\0\0", 8));
}

TEST(Checkpoint, TruncatedRejected) {
  const std::string bytes = serialize_checkpoint(small_checkpoint(HeadKind::multiclass));
  for (std::size_t cut : {std::size_t{3}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1}) {
    try {
      deserialize_checkpoint(bytes.substr(0, cut), "x.ckpt");
      FAIL() << cut;
    } catch (const CheckpointError& e) {
      EXPECT_NE(std::string(e.what()).find("x.ckpt"), std::string::npos);
    }
  }
}

TEST(Checkpoint, ForeignMagicAndVersionRejected) {
  std::string bytes = serialize_checkpoint(small_checkpoint(HeadKind::multiclass));
  std::string bad = bytes;
  bad[0] = 'P';
  EXPECT_THROW(deserialize_checkpoint(bad), CheckpointError);
  bad = bytes;
  bad[4] = 2;
  try {
    deserialize_checkpoint(bad);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }
  EXPECT_THROW(deserialize_checkpoint(bytes + "x"), CheckpointError);
}

TEST(KeyValues, CommentsAndErrors) {
  const auto kv = KeyValues::parse("# header\n a = 1 # trailing\n\nb=two\n", "f");
  EXPECT_EQ(kv.get("a"), "1");
  EXPECT_EQ(kv.get("b"), "two");
  EXPECT_THROW(KeyValues::parse("a\n", "f"), ConfigError);
  EXPECT_THROW(KeyValues::parse("a=1\na=2\n", "f"), ConfigError);
  EXPECT_THROW(kv.get_size("b", 0), ConfigError);
  EXPECT_THROW(KeyValues::parse("n=-3\n", "f").get_size("n", 0), ConfigError);
  EXPECT_THROW(kv.check({"a"}, {}), ConfigError);
  EXPECT_THROW(kv.check({"a", "b"}, {"c"}), ConfigError);
}

TEST(Gradcheck, InjectedFaultIsCaught) {
  GradcheckOptions opt;
  opt.seeds = 2;
  opt.filter = "loss_th";
  EXPECT_TRUE(run_gradcheck(opt).at(0).passed);
  opt.inject_fault = "loss_th";
  EXPECT_FALSE(run_gradcheck(opt).at(0).passed);
}

TEST(Cli, UsageErrors) {
  EXPECT_EQ(cli("").code, 1);
  EXPECT_EQ(cli("frobnicate").code, 1);
  EXPECT_EQ(cli("gen --out /tmp/x").code, 1);
  EXPECT_EQ(cli("--help").code, 0);
}

TEST(Cli, GenCountZeroAndRegeneration) {
  const auto dir = scratch("gen");
  put(dir / "spec.txt", "seed = 2\nimage_size = 32\n");
  ASSERT_EQ(cli("gen --spec " + (dir / "spec.txt").string() + " --out " + (dir / "zero").string() + " --count 0").code, 0);
  EXPECT_TRUE(nlohmann::json::parse(slurp(dir / "zero" / "manifest.json"))["pairs"].empty());
  for (const char* out : {"a", "b"})
    ASSERT_EQ(cli("gen --spec " + (dir / "spec.txt").string() + " --out " + (dir / out).string() + " --count 2").code, 0);
  for (const auto& e : fs::directory_iterator(dir / "a")) EXPECT_EQ(slurp(e.path()), slurp(dir / "b" / e.path().filename()));
  put(dir / "bad.txt", "sead = 2\n");
  const auto r = cli("gen --spec " + (dir / "bad.txt").string() + " --out " + (dir / "c").string() + " --count 1");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("sead"), std::string::npos);
}

TEST(Cli, TrainConfigDiagnostics) {
  const auto dir = scratch("train_cfg");
  put(dir / "typo.cfg", std::string(kTrainConfig) + "lerning_rate = 1\n");
  auto r = cli("train --config " + (dir / "typo.cfg").string() + " --out " + (dir / "x.ckpt").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("unknown key 'lerning_rate'"), std::string::npos);
  put(dir / "dup.cfg", std::string(kTrainConfig) + "seed = 4\n");
  r = cli("train --config " + (dir / "dup.cfg").string() + " --out " + (dir / "x.ckpt").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("duplicate key 'seed'"), std::string::npos);
  put(dir / "missing.cfg", "head_kind = twohead\nepochs = 1\nbatch_size = 4\nseed = 0\n");
  r = cli("train --config " + (dir / "missing.cfg").string() + " --out " + (dir / "x.ckpt").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("missing required key 'learning_rate'"), std::string::npos);
}

TEST(Cli, TrainEvalEndToEnd) {
  const auto dir = scratch("e2e");
  put(dir / "train.cfg", kTrainConfig);
  put(dir / "eval.spec", "seed = 7\nimage_size = 32\n");
  ASSERT_EQ(cli("gen --spec " + (dir / "eval.spec").string() + " --out " + (dir / "eval").string() +
                " --count 2 --eval-bundle").code, 0);
  const std::string train = "train --config " + (dir / "train.cfg").string() + " --log " + (dir / "log.jsonl").string();
  ASSERT_EQ(cli(train + " --out " + (dir / "a.ckpt").string()).code, 0);
  ASSERT_EQ(cli(train + " --out " + (dir / "b.ckpt").string()).code, 0);
  ASSERT_EQ(cli(train + " --seed 9 --out " + (dir / "c.ckpt").string()).code, 0);
  EXPECT_EQ(slurp(dir / "a.ckpt"), slurp(dir / "b.ckpt"));
  EXPECT_EQ(load_checkpoint((dir / "c.ckpt").string()).seed, 9u);
  EXPECT_EQ(nlohmann::json::parse(slurp(dir / "log.jsonl"))["epoch"], 1);

  const std::string eval = "eval --ckpt " + (dir / "a.ckpt").string() + " --data " + (dir / "eval").string() +
                           " --score twohead --assays 3";
  ASSERT_EQ(cli(eval + " --report " + (dir / "r1.json").string() + " --maps " + (dir / "maps").string()).code, 0);
  ASSERT_EQ(cli(eval + " --report " + (dir / "r2.json").string()).code, 0);
  EXPECT_EQ(slurp(dir / "r1.json"), slurp(dir / "r2.json"));
  const auto report = nlohmann::json::parse(slurp(dir / "r1.json"));
  EXPECT_EQ(report["threshold"], 0.5);
  EXPECT_EQ(report["num_assays"], 3);
  EXPECT_TRUE(fs::exists(dir / "maps" / "pasted_00000_merged.png"));

  auto r = cli("eval --ckpt " + (dir / "a.ckpt").string() + " --data " + (dir / "eval").string() + " --score cplus1");
  EXPECT_EQ(r.code, 1);
  put(dir / "junk.ckpt", "ODSG");
  r = cli("eval --ckpt " + (dir / "junk.ckpt").string() + " --data " + (dir / "eval").string());
  EXPECT_EQ(r.code, 2);
}

TEST(Cli, GradcheckExitCodes) {
  EXPECT_EQ(cli("gradcheck --seeds 2 --filter loss_").code, 0);
  const auto r = cli("gradcheck --seeds 2 --filter loss_kl --inject-fault loss_kl");
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.output.find("FAIL"), std::string::npos);
}
