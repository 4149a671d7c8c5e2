#include <catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "cvslt/training.hpp"
#include "helpers.hpp"
#include "json.hpp"

using namespace cvslt;
using namespace cvslt::testing;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / "cvslt_unit" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

RunConfig tiny_run() {
  RunConfig c;
  c.model = tiny_config();
  c.model.dropout = 0.1;
  c.model.anneal_steps = 4;
  c.max_steps = 6;
  c.log_every = 2;
  c.batch_size = 3;
  c.seed = 13;
  c.beam_size = 2;
  c.learning_rate = 1e-2;
  return c;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t line_count(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) n += !line.empty();
  return n;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(CVSLT_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("run config JSON round trip", "[config]") {
  auto c = tiny_run();
  c.variant.aep = false;
  c.variant.shared_attention = false;
  c.model.lambda_sd = 0.5;
  c.train_data = "a.jsonl";
  const auto back = RunConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK(back.variant == c.variant);
  CHECK(back.model.lambda_sd == 0.5);
  CHECK(back.model.d_model == 8);

  const auto overlaid = RunConfig::from_json(R"({"max_steps": 9})", c);
  CHECK(overlaid.max_steps == 9);
  CHECK(overlaid.model.d_model == 8);

  CHECK_THROWS_AS(RunConfig::from_json(R"({"not_a_key": 1})"), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json(R"({"max_steps": "many"})"), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json("[1, 2]"), ConfigError);
}

TEST_CASE("run config validation", "[config]") {
  auto c = tiny_run();
  CHECK_NOTHROW(c.validate());
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_run();
  c.learning_rate = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("checkpoint bytes survive save, load and save again", "[checkpoint]") {
  const auto pairs = generate_corpus(tiny_corpus(31, 9));
  Trainer trainer(tiny_run(), pairs);
  for (int i = 0; i < 3; ++i) trainer.train_step();
  const auto ckpt = trainer.checkpoint();
  CHECK(ckpt.step == 3);
  CHECK(ckpt.optimizer.t == 3);

  const auto dir = fresh_dir("ckpt");
  save_checkpoint(dir / "a.ckpt", ckpt);
  const auto loaded = load_checkpoint(dir / "a.ckpt");
  save_checkpoint(dir / "b.ckpt", loaded);
  CHECK(read_file(dir / "a.ckpt") == read_file(dir / "b.ckpt"));
  CHECK(read_file(dir / "a.ckpt").rfind("CVSLT1", 0) == 0);

  CvSltModel other(tiny_run().model, {}, 999);
  restore(loaded, other);
  const auto a = trainer.model().parameters().all();
  const auto b = other.parameters().all();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(copy_values(a[i].value) == copy_values(b[i].value));
}

TEST_CASE("malformed checkpoints are rejected", "[checkpoint]") {
  CvSltModel model(tiny_config(), {}, 1);
  const auto bytes = serialize(capture(model, 0, 1, "{}"));
  CHECK_THROWS_AS(deserialize(bytes.substr(0, bytes.size() - 3)), IoError);
  CHECK_THROWS_AS(deserialize("NOTCKPT" + bytes), IoError);
  CHECK_THROWS_AS(deserialize(bytes + "x"), IoError);
  CHECK_THROWS_AS(load_checkpoint(fresh_dir("missing") / "none.ckpt"), IoError);

  auto wrong_shape = tiny_config();
  wrong_shape.d_ff = 12;
  CvSltModel other(wrong_shape, {}, 1);
  CHECK_THROWS_AS(restore(deserialize(bytes), other), ContractError);

  CvSltModel unshared(tiny_config(), Variant{true, true, true, false}, 1);
  CHECK_THROWS_AS(restore(deserialize(bytes), unshared), ContractError);
}

TEST_CASE("resuming replays the uninterrupted trajectory", "[training]") {
  const auto pairs = generate_corpus(tiny_corpus(32, 8));
  Trainer straight(tiny_run(), pairs);
  std::vector<StepRecord> full;
  for (int i = 0; i < 6; ++i) full.push_back(straight.train_step());

  Trainer first(tiny_run(), pairs);
  for (int i = 0; i < 4; ++i) first.train_step();
  const auto bytes = serialize(first.checkpoint());
  Trainer second(tiny_run(), pairs, deserialize(bytes));
  CHECK(second.step() == 4);
  for (int i = 4; i < 6; ++i) {
    const auto r = second.train_step();
    CHECK(r.step == full[static_cast<std::size_t>(i)].step);
    CHECK(r.total == full[static_cast<std::size_t>(i)].total);
  }
  const auto a = straight.model().parameters().all();
  const auto b = second.model().parameters().all();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(copy_values(a[i].value) == copy_values(b[i].value));
}

TEST_CASE("run_training writes the documented artefacts", "[training]") {
  const auto pairs = generate_corpus(tiny_corpus(33, 10));
  auto config = tiny_run();
  config.max_steps = 7;
  config.log_every = 3;
  config.eval_every = 3;
  config.out_dir = fresh_dir("run").string();
  Trainer trainer(config, pairs);
  std::size_t callbacks = 0;
  const auto result = run_training(trainer, pairs, [&](const StepRecord&, const std::optional<DevMetrics>&) { ++callbacks; });
  const fs::path out = config.out_dir;
  // Steps 3, 6 and the final step 7.
  CHECK(result.log.size() == 3);
  CHECK(callbacks == 3);
  CHECK(line_count(out / "metrics.jsonl") == 3);
  CHECK(fs::exists(out / "last.ckpt"));
  CHECK(fs::exists(out / "best.ckpt"));
  CHECK(fs::exists(out / "config.json"));
  REQUIRE(result.final_dev.has_value());

  std::ifstream in(out / "metrics.jsonl");
  std::string line;
  std::getline(in, line);
  const auto j = nlohmann::json::parse(line);
  for (const char* key : {"step", "recon_posterior", "kl_latent", "recon_prior", "sd_kl", "total", "kl_weight",
                          "grad_norm", "dev_bleu4", "dev_rouge_l", "dev_mean_gap"}) {
    CHECK(j.contains(key));
  }
  CHECK(j["step"] == 3);
  CHECK(load_checkpoint(out / "last.ckpt").step == 7);
}

TEST_CASE("command-line exit codes", "[cli]") {
  const auto dir = fresh_dir("cli");
  const auto d = dir.string();
  REQUIRE(run_cli("gen-data --seed 3 --size 40 --out " + d + "/data") == 0);
  CHECK(line_count(dir / "data" / "train.jsonl") == 32);
  CHECK(line_count(dir / "data" / "dev.jsonl") == 4);
  CHECK(fs::exists(dir / "data" / "manifest.json"));

  {
    std::ofstream cfg(dir / "config.json");
    cfg << R"({"d_model": 8, "n_heads": 2, "n_enc_layers": 1, "n_dec_layers": 1, "d_ff": 16, "d_z": 4,
               "max_steps": 4, "log_every": 2, "batch_size": 8, "beam_size": 2})";
  }
  const std::string common = "--config " + d + "/config.json --train " + d + "/data/train.jsonl --dev " + d +
                             "/data/dev.jsonl";
  REQUIRE(run_cli("train " + common + " --out " + d + "/run") == 0);
  CHECK(line_count(dir / "run" / "metrics.jsonl") == 2);
  CHECK(run_cli("train " + common + " --out " + d + "/run --resume " + d + "/run/last.ckpt --max-steps 6") == 0);
  CHECK(line_count(dir / "run" / "metrics.jsonl") == 3);

  CHECK(run_cli("evaluate --ckpt " + d + "/run/last.ckpt --data " + d + "/data/test.jsonl --out " + d +
                "/eval --beam-size 2") == 0);
  CHECK(line_count(dir / "eval" / "hypotheses.txt") == 4);
  const auto report = nlohmann::json::parse(read_file(dir / "eval" / "report.json"));
  CHECK(report.contains("bleu4"));
  CHECK(run_cli("analyze --ckpt " + d + "/run/last.ckpt --data " + d + "/data/dev.jsonl --out " + d +
                "/analysis --bins 2 --beam-size 1") == 0);
  CHECK(line_count(dir / "analysis" / "gap_report.csv") == 5);

  CHECK(run_cli("train " + common + " --out " + d + "/bad --lr -1") == 1);
  CHECK(run_cli("train --train " + d + "/nope.jsonl --out " + d + "/bad") == 2);
  CHECK(run_cli("evaluate --ckpt " + d + "/nope.ckpt --data " + d + "/data/test.jsonl --out " + d + "/e2") == 2);
  CHECK(run_cli("no-such-command") == 1);
  CHECK(run_cli("--help") == 0);
}
