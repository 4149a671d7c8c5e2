// cvslt: corpus generation, training, evaluation and gap analysis.
//
// Exit codes: 0 success, 1 contract or configuration error, 2 I/O error.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "cvslt/checkpoint.hpp"
#include "cvslt/data_synth.hpp"
#include "cvslt/decode_eval.hpp"
#include "cvslt/training.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace cvslt;

namespace {

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory " + dir.string());
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

std::vector<SyntheticPair> read_corpus(const std::string& path) {
  if (path.empty()) throw ConfigError("no data path given");
  if (!fs::is_regular_file(path)) throw IoError("data file not found: " + path);
  auto pairs = read_jsonl(path);
  if (pairs.empty()) throw ContractError(path + " holds no pairs");
  return pairs;
}

CvSltModel load_model(const std::string& ckpt_path) {
  const auto ckpt = load_checkpoint(ckpt_path);
  const auto cfg = RunConfig::from_json(ckpt.config_json);
  CvSltModel model(cfg.model, cfg.variant, cfg.seed);
  restore(ckpt, model);
  return model;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

struct GenArgs {
  std::uint64_t seed = 1;
  std::size_t size = 1000;
  std::size_t vocab = 64;
  double noise = 0.1;
  std::string out;
};

int cmd_gen_data(const GenArgs& a) {
  CorpusOptions o;
  o.seed = a.seed;
  o.size = a.size;
  o.vocab_size = a.vocab;
  o.noise_sigma = a.noise;
  const auto pairs = generate_corpus(o);
  const auto split = split_corpus(pairs, a.seed);
  const fs::path out = a.out;
  ensure_dir(out);
  write_jsonl(out / "train.jsonl", split.train);
  write_jsonl(out / "dev.jsonl", split.dev);
  write_jsonl(out / "test.jsonl", split.test);

  nlohmann::ordered_json m;
  m["seed"] = o.seed;
  m["size"] = o.size;
  m["vocab"] = o.vocab_size;
  m["noise_sigma"] = o.noise_sigma;
  m["d_feature"] = o.d_feature;
  m["min_tokens"] = o.min_tokens;
  m["max_tokens"] = o.max_tokens;
  m["min_duration"] = o.min_duration;
  m["max_duration"] = o.max_duration;
  m["split_ratios"] = {0.8, 0.1, 0.1};
  m["counts"] = {{"train", split.train.size()}, {"dev", split.dev.size()}, {"test", split.test.size()}};
  write_file(out / "manifest.json", m.dump(2) + "\n");
  std::cout << "wrote " << split.train.size() << "/" << split.dev.size() << "/" << split.test.size()
            << " pairs to " << out.string() << "\n";
  return 0;
}

struct TrainArgs {
  std::string config;
  std::string out;
  std::string train;
  std::string dev;
  std::string resume;
  std::optional<long> max_steps, log_every, eval_every, anneal_steps;
  std::optional<std::uint64_t> seed;
  std::optional<double> lr, lambda_sd, dropout;
  std::optional<std::size_t> batch_size, threads, eval_max_pairs;
  bool no_aep = false, no_sd = false, no_argd = false, no_shared = false;
};

int cmd_train(const TrainArgs& a) {
  RunConfig cfg;
  if (!a.config.empty()) cfg = RunConfig::from_json(read_file(a.config));
  if (!a.out.empty()) cfg.out_dir = a.out;
  if (!a.train.empty()) cfg.train_data = a.train;
  if (!a.dev.empty()) cfg.dev_data = a.dev;
  if (a.max_steps) cfg.max_steps = *a.max_steps;
  if (a.log_every) cfg.log_every = *a.log_every;
  if (a.eval_every) cfg.eval_every = *a.eval_every;
  if (a.anneal_steps) cfg.model.anneal_steps = *a.anneal_steps;
  if (a.seed) cfg.seed = *a.seed;
  if (a.lr) cfg.learning_rate = *a.lr;
  if (a.lambda_sd) cfg.model.lambda_sd = *a.lambda_sd;
  if (a.dropout) cfg.model.dropout = *a.dropout;
  if (a.batch_size) cfg.batch_size = *a.batch_size;
  if (a.threads) cfg.threads = *a.threads;
  if (a.eval_max_pairs) cfg.eval_max_pairs = *a.eval_max_pairs;
  if (a.no_aep) cfg.variant.aep = false;
  if (a.no_sd) cfg.variant.self_distillation = false;
  if (a.no_argd) cfg.variant.residual_posterior = false;
  if (a.no_shared) cfg.variant.shared_attention = false;
  cfg.validate();
  if (cfg.out_dir.empty()) throw ConfigError("an output directory is required (--out)");

  auto train = read_corpus(cfg.train_data);
  std::vector<SyntheticPair> dev;
  if (!cfg.dev_data.empty()) dev = read_corpus(cfg.dev_data);
  std::optional<Trainer> trainer;
  if (a.resume.empty()) {
    trainer.emplace(cfg, std::move(train));
  } else {
    trainer.emplace(cfg, std::move(train), load_checkpoint(a.resume));
  }
  std::cout << "variant " << cfg.variant.name() << ", " << trainer->model().parameters().scalar_count()
            << " parameters, starting at step " << trainer->step() << "\n";
  run_training(*trainer, dev, [](const StepRecord& r, const std::optional<DevMetrics>& d) {
    std::cout << "step " << r.step << " total " << fmt(r.total) << " recon_q " << fmt(r.recon_posterior) << " kl "
              << fmt(r.kl_latent) << " recon_p " << fmt(r.recon_prior) << " sd " << fmt(r.sd_kl);
    if (d) std::cout << " | dev bleu4 " << fmt(d->bleu4) << " gap " << fmt(d->mean_gap);
    std::cout << std::endl;
  });
  return 0;
}

struct EvalArgs {
  std::string ckpt;
  std::string data;
  std::string out;
  std::size_t beam_size = 5;
  double length_penalty = 1.0;
  std::size_t max_len = 0;
  std::size_t threads = 1;
};

int cmd_evaluate(const EvalArgs& a) {
  const auto model = load_model(a.ckpt);
  const auto pairs = read_corpus(a.data);
  BeamOptions beam;
  beam.beam_size = a.beam_size;
  beam.length_penalty = a.length_penalty;
  if (a.max_len > 0) beam.max_len = a.max_len;
  const auto hyps = decode_corpus(model, pairs, beam, a.threads);

  Vocabulary vocab(model.config().vocab_size);
  std::vector<std::string> cand, ref;
  std::string lines;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    cand.push_back(vocab.detokenize(hyps[i]));
    ref.push_back(vocab.detokenize(pairs[i].tokens));
    lines += cand.back() + "\n";
  }
  const auto scores = bleu(cand, ref);
  const double rl = rouge_l(cand, ref);

  nlohmann::ordered_json r;
  r["checkpoint"] = a.ckpt;
  r["data"] = a.data;
  r["pairs"] = pairs.size();
  r["beam_size"] = beam.beam_size;
  r["length_penalty"] = beam.length_penalty;
  r["max_len"] = beam.max_len;
  r["bleu1"] = scores.bleu[0];
  r["bleu2"] = scores.bleu[1];
  r["bleu3"] = scores.bleu[2];
  r["bleu4"] = scores.bleu[3];
  r["brevity_penalty"] = scores.brevity_penalty;
  r["rouge_l"] = rl;

  const fs::path out = a.out;
  ensure_dir(out);
  write_file(out / "hypotheses.txt", lines);
  write_file(out / "report.json", r.dump(2) + "\n");
  std::cout << "BLEU-1/2/3/4 " << fmt(scores.bleu[0]) << " " << fmt(scores.bleu[1]) << " " << fmt(scores.bleu[2])
            << " " << fmt(scores.bleu[3]) << "  ROUGE-L " << fmt(rl) << "\n";
  return 0;
}

struct AnalyzeArgs {
  std::string ckpt;
  std::string data;
  std::string out;
  std::size_t bins = 5;
  std::size_t beam_size = 5;
  std::size_t threads = 1;
};

int cmd_analyze(const AnalyzeArgs& a) {
  const auto model = load_model(a.ckpt);
  const auto pairs = read_corpus(a.data);
  BeamOptions beam;
  beam.beam_size = a.beam_size;
  const auto report = gap_quantile_report(model, pairs, a.bins, beam, a.threads);
  const fs::path out = a.out;
  ensure_dir(out);
  write_gap_csv(out / "gap_report.csv", report);
  write_representation_dump(out / "representations.csv", model, pairs);
  for (std::size_t b = 0; b < report.bin_sizes.size(); ++b) {
    std::cout << "bin " << b << ": n=" << report.bin_sizes[b] << " mean_gap " << fmt(report.bin_mean_gap[b])
              << " bleu4 " << fmt(report.bin_bleu4[b]) << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Cross-modal variational sign-language translation on synthetic data"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic corpus with train/dev/test splits");
  gen_cmd->add_option("--seed", gen.seed, "Corpus seed")->capture_default_str();
  gen_cmd->add_option("--size", gen.size, "Number of pairs")->capture_default_str();
  gen_cmd->add_option("--vocab", gen.vocab, "Vocabulary size including 4 specials")->capture_default_str();
  gen_cmd->add_option("--noise", gen.noise, "Frame noise standard deviation")->capture_default_str();
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a model");
  train_cmd->add_option("--config", tr.config, "JSON config with flat keys; flags override it");
  train_cmd->add_option("--out", tr.out, "Output directory");
  train_cmd->add_option("--train", tr.train, "Training JSONL");
  train_cmd->add_option("--dev", tr.dev, "Dev JSONL for periodic evaluation");
  train_cmd->add_option("--resume", tr.resume, "Checkpoint to continue from");
  train_cmd->add_option("--max-steps", tr.max_steps);
  train_cmd->add_option("--log-every", tr.log_every);
  train_cmd->add_option("--eval-every", tr.eval_every);
  train_cmd->add_option("--anneal-steps", tr.anneal_steps);
  train_cmd->add_option("--seed", tr.seed);
  train_cmd->add_option("--lr", tr.lr);
  train_cmd->add_option("--lambda-sd", tr.lambda_sd);
  train_cmd->add_option("--dropout", tr.dropout);
  train_cmd->add_option("--batch-size", tr.batch_size);
  train_cmd->add_option("--threads", tr.threads, "Decoding threads for dev evaluation");
  train_cmd->add_option("--eval-max-pairs", tr.eval_max_pairs);
  train_cmd->add_flag("--no-aep", tr.no_aep, "Drop the prior-path reconstruction loss");
  train_cmd->add_flag("--no-sd", tr.no_sd, "Drop self-distillation");
  train_cmd->add_flag("--no-argd", tr.no_argd, "Independent absolute posterior instead of the residual one");
  train_cmd->add_flag("--no-shared-attn", tr.no_shared, "Separate attention weights for the posterior path");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("evaluate", "Decode a split and score it");
  eval_cmd->add_option("--ckpt", ev.ckpt)->required();
  eval_cmd->add_option("--data", ev.data)->required();
  eval_cmd->add_option("--out", ev.out)->required();
  eval_cmd->add_option("--beam-size", ev.beam_size)->capture_default_str();
  eval_cmd->add_option("--length-penalty", ev.length_penalty)->capture_default_str();
  eval_cmd->add_option("--max-len", ev.max_len, "0 keeps the default of 28");
  eval_cmd->add_option("--threads", ev.threads)->capture_default_str();

  AnalyzeArgs an;
  auto* analyze_cmd = app.add_subcommand("analyze", "Modality-gap quantile report and representation dump");
  analyze_cmd->add_option("--ckpt", an.ckpt)->required();
  analyze_cmd->add_option("--data", an.data)->required();
  analyze_cmd->add_option("--out", an.out)->required();
  analyze_cmd->add_option("--bins", an.bins)->capture_default_str();
  analyze_cmd->add_option("--beam-size", an.beam_size)->capture_default_str();
  analyze_cmd->add_option("--threads", an.threads)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*gen_cmd) return cmd_gen_data(gen);
    if (*train_cmd) return cmd_train(tr);
    if (*eval_cmd) return cmd_evaluate(ev);
    if (*analyze_cmd) return cmd_analyze(an);
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
