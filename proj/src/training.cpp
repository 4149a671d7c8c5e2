#include "cvslt/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "json.hpp"

namespace cvslt {

namespace {

using ordered_json = nlohmann::ordered_json;

template <typename T>
void read_key(const ordered_json& j, const char* key, T& field) {
  if (j.contains(key)) field = j.at(key).get<T>();
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  if (max_steps < 1) throw ConfigError("max_steps must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("betas must lie in [0,1)");
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be > 0");
  if (grad_clip < 0.0) throw ConfigError("grad_clip must be >= 0 (0 disables clipping)");
  if (log_every < 1) throw ConfigError("log_every must be >= 1");
  if (eval_every < 0 || (eval_every > 0 && eval_every % log_every != 0)) {
    throw ConfigError("eval_every must be 0 or a multiple of log_every");
  }
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (beam_size == 0) throw ConfigError("beam_size must be >= 1");
  if (length_penalty < 0.0) throw ConfigError("length_penalty must be >= 0");
}

std::string RunConfig::to_json() const {
  ordered_json j;
  j["d_model"] = model.d_model;
  j["n_heads"] = model.n_heads;
  j["n_enc_layers"] = model.n_enc_layers;
  j["n_dec_layers"] = model.n_dec_layers;
  j["d_ff"] = model.d_ff;
  j["d_feature"] = model.d_feature;
  j["vocab_size"] = model.vocab_size;
  j["d_z"] = model.d_z;
  j["lambda_sd"] = model.lambda_sd;
  j["anneal_steps"] = model.anneal_steps;
  j["label_smoothing"] = model.label_smoothing;
  j["dropout"] = model.dropout;
  j["aep"] = variant.aep;
  j["self_distillation"] = variant.self_distillation;
  j["residual_posterior"] = variant.residual_posterior;
  j["shared_attention"] = variant.shared_attention;
  j["learning_rate"] = learning_rate;
  j["beta1"] = beta1;
  j["beta2"] = beta2;
  j["adam_eps"] = adam_eps;
  j["grad_clip"] = grad_clip;
  j["max_steps"] = max_steps;
  j["log_every"] = log_every;
  j["eval_every"] = eval_every;
  j["batch_size"] = batch_size;
  j["seed"] = seed;
  j["beam_size"] = beam_size;
  j["length_penalty"] = length_penalty;
  j["eval_max_pairs"] = eval_max_pairs;
  j["threads"] = threads;
  j["train_data"] = train_data;
  j["dev_data"] = dev_data;
  j["out_dir"] = out_dir;
  return j.dump(2);
}

RunConfig RunConfig::from_json(const std::string& json) { return from_json(json, RunConfig{}); }

RunConfig RunConfig::from_json(const std::string& json, RunConfig c) {
  ordered_json j;
  try {
    j = ordered_json::parse(json);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  const auto known = ordered_json::parse(RunConfig{}.to_json());
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw ConfigError("unknown config key '" + key + "'");
  }
  try {
    read_key(j, "d_model", c.model.d_model);
    read_key(j, "n_heads", c.model.n_heads);
    read_key(j, "n_enc_layers", c.model.n_enc_layers);
    read_key(j, "n_dec_layers", c.model.n_dec_layers);
    read_key(j, "d_ff", c.model.d_ff);
    read_key(j, "d_feature", c.model.d_feature);
    read_key(j, "vocab_size", c.model.vocab_size);
    read_key(j, "d_z", c.model.d_z);
    read_key(j, "lambda_sd", c.model.lambda_sd);
    read_key(j, "anneal_steps", c.model.anneal_steps);
    read_key(j, "label_smoothing", c.model.label_smoothing);
    read_key(j, "dropout", c.model.dropout);
    read_key(j, "aep", c.variant.aep);
    read_key(j, "self_distillation", c.variant.self_distillation);
    read_key(j, "residual_posterior", c.variant.residual_posterior);
    read_key(j, "shared_attention", c.variant.shared_attention);
    read_key(j, "learning_rate", c.learning_rate);
    read_key(j, "beta1", c.beta1);
    read_key(j, "beta2", c.beta2);
    read_key(j, "adam_eps", c.adam_eps);
    read_key(j, "grad_clip", c.grad_clip);
    read_key(j, "max_steps", c.max_steps);
    read_key(j, "log_every", c.log_every);
    read_key(j, "eval_every", c.eval_every);
    read_key(j, "batch_size", c.batch_size);
    read_key(j, "seed", c.seed);
    read_key(j, "beam_size", c.beam_size);
    read_key(j, "length_penalty", c.length_penalty);
    read_key(j, "eval_max_pairs", c.eval_max_pairs);
    read_key(j, "threads", c.threads);
    read_key(j, "train_data", c.train_data);
    read_key(j, "dev_data", c.dev_data);
    read_key(j, "out_dir", c.out_dir);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config value has the wrong type: ") + e.what());
  }
  return c;
}

Adam::Adam(ParameterStore& store, double learning_rate, double beta1, double beta2, double eps, double clip_norm)
    : store_(store), lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps), clip_(clip_norm) {
  for (const auto& p : store_.all()) {
    state_.m.emplace_back(p.value.numel(), 0.0);
    state_.v.emplace_back(p.value.numel(), 0.0);
  }
}

void Adam::load_state(OptimizerState state) {
  const auto& params = store_.all();
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ContractError("optimizer state covers " + std::to_string(state.m.size()) + " of " +
                        std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].size() != params[i].value.numel() || state.v[i].size() != params[i].value.numel()) {
      throw ContractError("optimizer state size mismatch for " + params[i].name);
    }
  }
  state_ = std::move(state);
}

double Adam::step() {
  const auto& params = store_.all();
  double sq = 0.0;
  for (const auto& p : params) {
    for (double g : p.value.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  const double factor = (clip_ > 0.0 && norm > clip_) ? clip_ / norm : 1.0;
  state_.t += 1;
  const double t = static_cast<double>(state_.t);
  const double c1 = 1.0 - std::pow(beta1_, t);
  const double c2 = 1.0 - std::pow(beta2_, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor value = params[i].value;
    const auto grad = value.grad();
    auto data = value.data();
    auto& m = state_.m[i];
    auto& v = state_.v[i];
    for (std::size_t k = 0; k < data.size(); ++k) {
      const double g = grad.empty() ? 0.0 : grad[k] * factor;
      m[k] = beta1_ * m[k] + (1.0 - beta1_) * g;
      v[k] = beta2_ * v[k] + (1.0 - beta2_) * g * g;
      data[k] -= lr_ * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_);
    }
  }
  return norm;
}

NonFiniteLoss::NonFiniteLoss(long step, std::vector<std::string> batch_ids)
    : ContractError([&] {
        std::string msg = "non-finite loss at step " + std::to_string(step) + " in batch [";
        for (std::size_t i = 0; i < batch_ids.size(); ++i) msg += (i ? ", " : "") + batch_ids[i];
        return msg + "]";
      }()),
      step_(step),
      batch_ids_(std::move(batch_ids)) {}

Trainer::Trainer(RunConfig config, std::vector<SyntheticPair> train)
    : config_(std::move(config)),
      train_(std::move(train)),
      model_(config_.model, config_.variant, config_.seed),
      adam_(model_.parameters(), config_.learning_rate, config_.beta1, config_.beta2, config_.adam_eps,
            config_.grad_clip) {
  config_.validate();
  if (train_.empty()) throw ContractError("training split is empty");
}

Trainer::Trainer(RunConfig config, std::vector<SyntheticPair> train, const Checkpoint& resume)
    : Trainer([&] {
        config.seed = resume.seed;
        return std::move(config);
      }(),
              std::move(train)) {
  restore(resume, model_);
  if (!resume.optimizer.m.empty()) adam_.load_state(resume.optimizer);
  step_ = static_cast<long>(resume.step);
}

const Batch& Trainer::batch_for(long step) {
  // Steps per epoch: ceil(n / B). Each epoch reshuffles under its own seed.
  const long per_epoch = static_cast<long>((train_.size() + config_.batch_size - 1) / config_.batch_size);
  const long epoch = step / per_epoch;
  if (epoch != cached_epoch_) {
    const std::uint64_t shuffle_seed = seeded_rng({config_.seed, static_cast<std::uint64_t>(epoch), 5})();
    epoch_batches_ = make_batches(train_, config_.batch_size, shuffle_seed, true);
    cached_epoch_ = epoch;
  }
  return epoch_batches_[static_cast<std::size_t>(step % per_epoch)];
}

StepRecord Trainer::train_step() {
  const Batch& batch = batch_for(step_);
  auto rng = seeded_rng({config_.seed, static_cast<std::uint64_t>(step_), 4});
  const Tensor noise = standard_normal(batch.size(), batch.features.length, config_.model.d_z, rng);
  ForwardContext ctx;
  ctx.train = true;
  ctx.dropout = config_.model.dropout;
  ctx.rng = &rng;

  model_.parameters().zero_grad();
  const auto loss = total_loss(model_, batch.features, batch.targets, step_, noise, ctx);
  if (!std::isfinite(loss.total.item())) throw NonFiniteLoss(step_, batch.ids);
  backward(loss.total);

  StepRecord r;
  r.grad_norm = adam_.step();
  if (!std::isfinite(r.grad_norm)) throw NonFiniteLoss(step_, batch.ids);
  ++step_;
  r.step = step_;
  r.recon_posterior = loss.recon_posterior.item();
  r.kl_latent = loss.kl_latent.item();
  r.recon_prior = loss.recon_prior.item();
  r.sd_kl = loss.sd_kl.item();
  r.total = loss.total.item();
  r.kl_weight = loss.kl_weight;
  return r;
}

Checkpoint Trainer::checkpoint() const {
  return capture(model_, static_cast<std::uint64_t>(step_), config_.seed, config_.to_json(), adam_.state());
}

DevMetrics evaluate_dev(const CvSltModel& model, std::span<const SyntheticPair> dev, const BeamOptions& options,
                        std::size_t threads) {
  const auto hyps = decode_corpus(model, dev, options, threads);
  Vocabulary vocab(model.config().vocab_size);
  std::vector<std::string> cand, ref;
  for (std::size_t i = 0; i < dev.size(); ++i) {
    cand.push_back(vocab.detokenize(hyps[i]));
    ref.push_back(vocab.detokenize(dev[i].tokens));
  }
  DevMetrics m;
  m.bleu4 = bleu(cand, ref).bleu[3];
  m.rouge_l = rouge_l(cand, ref);
  const auto gaps = sentence_gaps(model, dev);
  for (double g : gaps) m.mean_gap += g;
  m.mean_gap /= static_cast<double>(gaps.size());
  return m;
}

std::string to_json_line(const StepRecord& r, const std::optional<DevMetrics>& dev) {
  ordered_json j;
  j["step"] = r.step;
  j["recon_posterior"] = r.recon_posterior;
  j["kl_latent"] = r.kl_latent;
  j["recon_prior"] = r.recon_prior;
  j["sd_kl"] = r.sd_kl;
  j["total"] = r.total;
  j["kl_weight"] = r.kl_weight;
  j["grad_norm"] = r.grad_norm;
  if (dev) {
    j["dev_bleu4"] = dev->bleu4;
    j["dev_rouge_l"] = dev->rouge_l;
    j["dev_mean_gap"] = dev->mean_gap;
  }
  return j.dump();
}

TrainResult run_training(Trainer& trainer, std::span<const SyntheticPair> dev,
                         const std::function<void(const StepRecord&, const std::optional<DevMetrics>&)>& on_log) {
  const auto& cfg = trainer.config();
  const bool write = !cfg.out_dir.empty();
  const std::filesystem::path out = cfg.out_dir;
  std::ofstream metrics;
  if (write) {
    std::error_code ec;
    std::filesystem::create_directories(out, ec);
    if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());
    std::ofstream(out / "config.json") << cfg.to_json() << '\n';
    metrics.open(out / "metrics.jsonl", trainer.step() > 0 ? std::ios::app : std::ios::trunc);
    if (!metrics) throw IoError("cannot open " + (out / "metrics.jsonl").string());
  }
  if (cfg.eval_max_pairs > 0 && dev.size() > cfg.eval_max_pairs) dev = dev.first(cfg.eval_max_pairs);
  BeamOptions beam;
  beam.beam_size = cfg.beam_size;
  beam.length_penalty = cfg.length_penalty;

  TrainResult result;
  double best = -1.0;
  while (trainer.step() < cfg.max_steps) {
    StepRecord rec;
    try {
      rec = trainer.train_step();
    } catch (const NonFiniteLoss& e) {
      if (write) {
        ordered_json dump;
        dump["step"] = e.step();
        dump["batch_ids"] = e.batch_ids();
        std::ofstream(out / "nonfinite_batch.json") << dump.dump(2) << '\n';
      }
      throw;
    }
    const bool last = rec.step == cfg.max_steps;
    if (rec.step % cfg.log_every != 0 && !last) continue;
    std::optional<DevMetrics> dev_metrics;
    if (!dev.empty() && (last || (cfg.eval_every > 0 && rec.step % cfg.eval_every == 0))) {
      dev_metrics = evaluate_dev(trainer.model(), dev, beam, cfg.threads);
    }
    result.log.push_back(rec);
    if (write) {
      metrics << to_json_line(rec, dev_metrics) << '\n' << std::flush;
      if (dev_metrics || last) save_checkpoint(out / "last.ckpt", trainer.checkpoint());
      if (dev_metrics && dev_metrics->bleu4 > best) {
        best = dev_metrics->bleu4;
        save_checkpoint(out / "best.ckpt", trainer.checkpoint());
      }
    }
    if (on_log) on_log(rec, dev_metrics);
    if (last) result.final_dev = dev_metrics;
  }
  return result;
}

std::size_t default_max_len(std::span<const SyntheticPair> pairs) {
  std::size_t longest = 0;
  for (const auto& p : pairs) longest = std::max(longest, p.tokens.size());
  return 2 + 2 * longest;
}

}  // namespace cvslt
