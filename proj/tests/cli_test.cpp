/* Copyright 2026 The sparse-contrast Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "sc/persist.hpp"

#ifndef SC_CLI_PATH
#error "SC_CLI_PATH must point at the sc binary"
#endif

namespace sc {
namespace {

namespace fs = std::filesystem;

struct CliRun {
  int rc = -1;
  std::string out;
};

// Runs `sc <args>` in `dir` with stdout and stderr merged.
CliRun sc(const fs::path& dir, const std::string& args, const std::string& env = "") {
  const std::string cmd = "cd '" + dir.string() + "' && " + env + (env.empty() ? "" : " ") +
                          "'" + SC_CLI_PATH + "' " + args + " 2>&1";
  CliRun r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (pipe == nullptr) return r;
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, n);
  const int status = pclose(pipe);
  r.rc = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

std::vector<std::uint8_t> bytes(const fs::path& p) { return io::read_file(p); }

const char* kTinyConfig =
    "# small model on the default 64x64 geometry\n"
    "d = 16\n"
    "n_blocks = 1\n"
    "mlp_hidden = 32\n"
    "saliency_hidden = 32, 16\n"
    "proj_hidden = 16\n"
    "d_z = 8\n"
    "batch = 8\n"
    "steps = 4\n"
    "finetune_steps = 3\n"
    "finetune_batch = 8\n"
    "labeled = 16\n"
    "log_every = 2\n";

// One workspace per test binary: a dataset and a pretrained checkpoint.
class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / ("sc_cli_test_" + std::to_string(::getpid()));
    fs::create_directories(dir_);
    write(dir_ / "spec.txt", "n_images = 40\nseed = 5\n");
    write(dir_ / "cfg.txt", std::string(kTinyConfig) + "seed = 2\n");
    write(dir_ / "noseed.txt", kTinyConfig);
    ASSERT_EQ(sc(dir_, "gen-data --spec spec.txt --out d.scds").rc, 0);
    const CliRun r = sc(dir_, "pretrain --config cfg.txt --data d.scds --out a.ckpt");
    ASSERT_EQ(r.rc, 0) << r.out;
  }
  static void TearDownTestSuite() { fs::remove_all(dir_); }

  static fs::path dir_;
};

fs::path Cli::dir_;

TEST_F(Cli, PretrainWritesAllArtifacts) {
  EXPECT_TRUE(fs::exists(dir_ / "a.ckpt"));
  EXPECT_TRUE(fs::exists(dir_ / "a.ckpt.cache"));
  std::ifstream csv(dir_ / "a.ckpt.metrics.csv");
  std::string header;
  std::getline(csv, header);
  EXPECT_EQ(header, "step,L_contrast,L_sparse_soft,L_sparse_hard,L_total");
  std::size_t rows = 0;
  for (std::string line; std::getline(csv, line);) ++rows;
  EXPECT_EQ(rows, 4u);
  const AttnCache cache = load_cache(dir_ / "a.ckpt.cache");
  EXPECT_EQ(cache.entries.size(), 40u);
  EXPECT_EQ(cache.K, 19u);
}

TEST_F(Cli, PretrainIsByteReproducible) {
  const CliRun r = sc(dir_, "pretrain --config cfg.txt --data d.scds --out b.ckpt");
  ASSERT_EQ(r.rc, 0) << r.out;
  EXPECT_EQ(bytes(dir_ / "a.ckpt"), bytes(dir_ / "b.ckpt"));
  EXPECT_EQ(bytes(dir_ / "a.ckpt.cache"), bytes(dir_ / "b.ckpt.cache"));
  EXPECT_EQ(bytes(dir_ / "a.ckpt.metrics.csv"), bytes(dir_ / "b.ckpt.metrics.csv"));
}

TEST_F(Cli, SeedFromEnvironment) {
  ASSERT_EQ(sc(dir_, "pretrain --config noseed.txt --data d.scds --out e2.ckpt", "SC_SEED=2").rc, 0);
  ASSERT_EQ(sc(dir_, "pretrain --config noseed.txt --data d.scds --out e3.ckpt", "SC_SEED=3").rc, 0);
  EXPECT_NE(bytes(dir_ / "e2.ckpt"), bytes(dir_ / "e3.ckpt"));
  EXPECT_EQ(load_checkpoint(dir_ / "e3.ckpt").config.seed, 3u);
  // Same weights as the config-seeded run.
  const auto a = load_checkpoint(dir_ / "a.ckpt"), e2 = load_checkpoint(dir_ / "e2.ckpt");
  for (const auto& [name, t] : a.params.tensors) EXPECT_EQ(t, e2.params.at(name)) << name;

  const CliRun both = sc(dir_, "eval --config cfg.txt --data d.scds --ckpt a.ckpt --cache a.ckpt.cache",
                      "SC_SEED=2");
  EXPECT_EQ(both.rc, 3);
  EXPECT_NE(both.out.find("seed set in both"), std::string::npos) << both.out;
}

TEST_F(Cli, FinetuneAndEval) {
  CliRun r = sc(dir_, "finetune --config cfg.txt --data d.scds --ckpt a.ckpt --cache a.ckpt.cache "
                   "--out f.ckpt");
  ASSERT_EQ(r.rc, 0) << r.out;
  EXPECT_TRUE(fs::exists(dir_ / "f.ckpt.metrics.csv"));
  r = sc(dir_, "eval --config cfg.txt --data d.scds --ckpt f.ckpt --cache a.ckpt.cache");
  ASSERT_EQ(r.rc, 0) << r.out;
  EXPECT_NE(r.out.find("accuracy "), std::string::npos);
  EXPECT_NE(r.out.find("auc "), std::string::npos);
  EXPECT_NE(r.out.find("n 24"), std::string::npos) << r.out;

  // reuse_cache without a cache is refused rather than silently recomputed.
  r = sc(dir_, "eval --config cfg.txt --data d.scds --ckpt f.ckpt");
  EXPECT_EQ(r.rc, 6);
  EXPECT_NE(r.out.find("no attention cache"), std::string::npos) << r.out;
}

TEST_F(Cli, InspectDumpsHeatmapSupportAndRowSums) {
  const CliRun r = sc(dir_, "inspect --ckpt a.ckpt --data d.scds --image 3 --out insp --row-sums");
  ASSERT_EQ(r.rc, 0) << r.out;
  std::ifstream pgm(dir_ / "insp.pgm");
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  pgm >> magic >> w >> h >> maxval;
  EXPECT_EQ(magic, "P2");
  EXPECT_EQ(w, 8u);
  EXPECT_EQ(h, 8u);
  EXPECT_EQ(maxval, 255u);
  std::size_t pixels = 0;
  for (int v; pgm >> v; ++pixels) {
    EXPECT_GE(v, 0);
    EXPECT_LE(v, 255);
  }
  EXPECT_EQ(pixels, 64u);

  std::ifstream sup(dir_ / "insp.support.txt");
  std::string comment;
  std::getline(sup, comment);
  std::vector<std::size_t> S;
  for (std::size_t j; sup >> j;) S.push_back(j);
  EXPECT_EQ(S.size(), 19u);
  EXPECT_EQ(S, load_cache(dir_ / "a.ckpt.cache").at(3).S);

  std::ifstream rs(dir_ / "insp.rowsums.csv");
  std::string line;
  std::getline(rs, line);
  EXPECT_EQ(line, "block,row,sum");
  std::size_t rows = 0;
  while (std::getline(rs, line)) {
    const double sum = std::stod(line.substr(line.rfind(',') + 1));
    EXPECT_NEAR(sum, 1.0, 1e-6) << line;
    ++rows;
  }
  EXPECT_EQ(rows, 64u);
}

TEST_F(Cli, BenchEmitsReport) {
  const CliRun r = sc(dir_, "bench --config cfg.txt --sweep 64,19,16 --sweep 256,76,16 --trials 10 "
                         "--csv bench.csv");
  ASSERT_EQ(r.rc, 0) << r.out;
  EXPECT_NE(r.out.find("runtime counters match"), std::string::npos) << r.out;
  std::ifstream csv(dir_ / "bench.csv");
  std::string line;
  std::size_t rows = 0;
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, 3u);
  EXPECT_EQ(sc(dir_, "bench --config cfg.txt --sweep 64,65,16 --trials 0").rc, 3);
}

TEST_F(Cli, StructuredFailures) {
  CliRun r = sc(dir_, "eval --config cfg.txt --data missing.scds --ckpt a.ckpt");
  EXPECT_EQ(r.rc, 1);
  EXPECT_NE(r.out.find("cannot open 'missing.scds'"), std::string::npos) << r.out;

  auto data = bytes(dir_ / "d.scds");
  data.resize(data.size() / 2);
  io::write_file(dir_ / "trunc.scds", data);
  r = sc(dir_, "eval --config cfg.txt --data trunc.scds --ckpt a.ckpt --cache a.ckpt.cache");
  EXPECT_EQ(r.rc, 4);
  EXPECT_NE(r.out.find("dataset parse error at byte"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("truncated file"), std::string::npos) << r.out;

  auto ck = bytes(dir_ / "a.ckpt");
  ck[0] = 'X';
  io::write_file(dir_ / "magic.ckpt", ck);
  r = sc(dir_, "eval --config cfg.txt --data d.scds --ckpt magic.ckpt --cache a.ckpt.cache");
  EXPECT_EQ(r.rc, 4);
  EXPECT_NE(r.out.find("bad magic"), std::string::npos) << r.out;

  ck = bytes(dir_ / "a.ckpt");
  ck[4] = 9;
  io::write_file(dir_ / "future.ckpt", ck);
  r = sc(dir_, "eval --config cfg.txt --data d.scds --ckpt future.ckpt --cache a.ckpt.cache");
  EXPECT_EQ(r.rc, 4);
  EXPECT_NE(r.out.find("unsupported future version 9"), std::string::npos) << r.out;

  write(dir_ / "dup.txt", std::string(kTinyConfig) + "d = 24\n");
  r = sc(dir_, "eval --config dup.txt --data d.scds --ckpt a.ckpt --cache a.ckpt.cache");
  EXPECT_EQ(r.rc, 3);
  EXPECT_NE(r.out.find("duplicate key 'd'"), std::string::npos) << r.out;
  std::string wide = kTinyConfig;
  wide.replace(wide.find("d = 16"), 6, "d = 24");
  write(dir_ / "wide.txt", wide);
  r = sc(dir_, "eval --config wide.txt --data d.scds --ckpt a.ckpt --cache a.ckpt.cache");
  EXPECT_EQ(r.rc, 5);
  EXPECT_NE(r.out.find("architecture requires"), std::string::npos) << r.out;

  write(dir_ / "bad.txt", "rho = 0.3\nrho_typo = 1\n");
  r = sc(dir_, "bench --config bad.txt");
  EXPECT_EQ(r.rc, 3);
  EXPECT_NE(r.out.find("line 2"), std::string::npos) << r.out;

  EXPECT_EQ(sc(dir_, "").rc, 2);
  EXPECT_EQ(sc(dir_, "pretrain --config cfg.txt").rc, 2);
}

TEST(CliGradcheck, FreshBuildPasses) {
  const CliRun r = sc(fs::temp_directory_path(), "gradcheck");
  EXPECT_EQ(r.rc, 0) << r.out;
  EXPECT_NE(r.out.find("all passed"), std::string::npos);
  EXPECT_EQ(r.out.find("FAIL "), std::string::npos) << r.out;
  EXPECT_EQ(sc(fs::temp_directory_path(), "gradcheck --module losses").rc, 0);
  EXPECT_EQ(sc(fs::temp_directory_path(), "gradcheck --module nope").rc, 2);
}

// ------------------------------------------------------ config and files

TEST(Config, EmptyTextGivesDefaults) {
  const RunConfig c = parse_config("");
  EXPECT_EQ(c.P, 8u);
  EXPECT_EQ(c.d, 64u);
  EXPECT_EQ(c.n_blocks, 2u);
  EXPECT_EQ(c.d_z, 32u);
  EXPECT_DOUBLE_EQ(c.rho, 0.3);
  EXPECT_DOUBLE_EQ(c.tau, 0.1);
  EXPECT_DOUBLE_EQ(c.lambda, 0.5);
  EXPECT_DOUBLE_EQ(c.theta_value(), 1.0 / 64.0);
  EXPECT_DOUBLE_EQ(c.t_ind, 0.05);
  EXPECT_EQ(c.bias_mode, BiasMode::kSaliency);
  EXPECT_EQ(c.saliency_input, SaliencyInput::kEmbedded);
  EXPECT_EQ(c.alt_period, 1u);
  EXPECT_TRUE(c.reuse_cache);
  EXPECT_DOUBLE_EQ(c.lr, 3e-4);
  EXPECT_EQ(c.K(), 19u);
}

TEST(Config, BoundsNameTheRule) {
  try {
    parse_config("# comment\nrho = 1.5\n");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("line 2"), std::string::npos) << msg;
    EXPECT_NE(msg.find("rho in (0, 1]"), std::string::npos) << msg;
  }
  EXPECT_THROW(parse_config("tau = 0\n"), ConfigError);
  EXPECT_THROW(parse_config("lambda = -1\n"), ConfigError);
  EXPECT_THROW(parse_config("t_ind = 0\n"), ConfigError);
  EXPECT_THROW(parse_config("lr = 0\n"), ConfigError);
  EXPECT_THROW(parse_config("steps = many\n"), ConfigError);
  EXPECT_THROW(parse_config("unknown = 1\n"), ConfigError);
}

TEST(Config, SerializedFormParsesBack) {
  RunConfig c = parse_config("rho = 0.25\nbias_mode = none\nseed = 9\ntheta = 0.01\n");
  const RunConfig back = parse_config(serialize_config(c));
  EXPECT_EQ(serialize_config(back), serialize_config(c));
  EXPECT_EQ(back.bias_mode, BiasMode::kNone);
  EXPECT_EQ(back.seed, 9u);
}

TEST(Persist, CheckpointRoundTripIsBitExact) {
  Checkpoint ck;
  ck.config = parse_config("d = 8\nn_blocks = 1\nmlp_hidden = 8\nsaliency_hidden = 8\n");
  ck.params = init_params<float>(ck.config.arch(), 4);
  OptimizerState<float> opt;
  opt.updates = 3;
  opt.slots["embed.bias"].step = 3;
  opt.slots["embed.bias"].m.assign(8, 0.25f);
  opt.slots["embed.bias"].v.assign(8, 0.5f);
  ck.optimizer = opt;
  const auto first = encode_checkpoint(ck);
  const Checkpoint back = decode_checkpoint(first);
  EXPECT_EQ(encode_checkpoint(back), first);
  for (const auto& [name, t] : ck.params.tensors) EXPECT_EQ(back.params.at(name), t) << name;
  ASSERT_TRUE(back.optimizer);
  EXPECT_EQ(back.optimizer->slots.at("embed.bias").m, opt.slots["embed.bias"].m);
}

TEST(Persist, CheckpointShapesValidated) {
  Checkpoint ck;
  ck.config = parse_config("d = 8\nn_blocks = 1\nmlp_hidden = 8\nsaliency_hidden = 8\n");
  ck.params = init_params<float>(ck.config.arch(), 4);
  ck.params.tensors.at("embed.bias") = Tensor<float>(Shape{9});
  try {
    decode_checkpoint(encode_checkpoint(ck));
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("embed.bias has shape (9)"), std::string::npos)
        << e.what();
  }
}

TEST(Persist, CacheRoundTripAndCorruption) {
  AttnCache c;
  c.L = 4;
  c.K = 2;
  c.entries[0] = {{1, 3}, {0.1f, 0.4f, 0.2f, 0.3f}};
  c.entries[7] = {{0, 2}, {0.4f, 0.1f, 0.3f, 0.2f}};
  const auto enc = encode_cache(c);
  EXPECT_EQ(decode_cache(enc), c);
  EXPECT_EQ(encode_cache(decode_cache(enc)), enc);

  auto bad = enc;
  bad[0] = 'Z';
  EXPECT_THROW(decode_cache(bad), FormatError);
  bad = enc;
  bad.pop_back();
  EXPECT_THROW(decode_cache(bad), FormatError);
  bad = enc;
  // First entry's indices (1, 3) become (3, 3): not strictly increasing.
  bad[4 + 2 + 12 + 4 + 2] = 3;
  EXPECT_THROW(decode_cache(bad), FormatError);
}

}  // namespace
}  // namespace sc
