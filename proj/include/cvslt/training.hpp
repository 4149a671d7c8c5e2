#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cvslt/checkpoint.hpp"
#include "cvslt/data_synth.hpp"
#include "cvslt/decode_eval.hpp"
#include "cvslt/model.hpp"
#include "cvslt/objectives.hpp"

namespace cvslt {

struct RunConfig {
  ModelConfig model;
  Variant variant;
  double learning_rate = 3e-4;  // 1e-5 suits a pretrained backbone, not a from-scratch desk model
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;
  long max_steps = 2000;
  long log_every = 50;
  long eval_every = 0;  // 0: only after the last step; else a multiple of log_every
  std::size_t batch_size = 16;
  std::uint64_t seed = 1;
  std::size_t beam_size = 5;
  double length_penalty = 1.0;
  std::size_t eval_max_pairs = 0;  // 0: whole dev split
  std::size_t threads = 1;
  std::string train_data;
  std::string dev_data;
  std::string out_dir;

  void validate() const;
  /// Flat JSON object; keys are the field names above plus the model and variant fields.
  std::string to_json() const;
  /// Overlays the keys present in `json` onto `base`; unknown keys are an error.
  static RunConfig from_json(const std::string& json, RunConfig base);
  static RunConfig from_json(const std::string& json);
};

/// Adam with bias correction and global-norm gradient clipping.
class Adam {
 public:
  Adam(ParameterStore& store, double learning_rate, double beta1, double beta2, double eps, double clip_norm);

  /// Applies one update from the accumulated gradients; returns the pre-clip global norm.
  double step();
  OptimizerState state() const { return state_; }
  void load_state(OptimizerState state);

 private:
  ParameterStore& store_;
  double lr_, beta1_, beta2_, eps_, clip_;
  OptimizerState state_;
};

struct StepRecord {
  long step = 0;  // number of completed updates
  double recon_posterior = 0.0;
  double kl_latent = 0.0;
  double recon_prior = 0.0;
  double sd_kl = 0.0;
  double total = 0.0;
  double kl_weight = 0.0;
  double grad_norm = 0.0;
};

struct DevMetrics {
  double bleu4 = 0.0;
  double rouge_l = 0.0;
  double mean_gap = 0.0;
};

/// Thrown when the loss stops being finite; carries the offending batch.
class NonFiniteLoss : public ContractError {
 public:
  NonFiniteLoss(long step, std::vector<std::string> batch_ids);
  long step() const { return step_; }
  const std::vector<std::string>& batch_ids() const { return batch_ids_; }

 private:
  long step_;
  std::vector<std::string> batch_ids_;
};

/// Single-threaded training loop. Batch order, dropout masks and latent noise
/// for update k are pure functions of (seed, k), so a run resumed from a
/// checkpoint replays the unbroken trajectory exactly.
class Trainer {
 public:
  Trainer(RunConfig config, std::vector<SyntheticPair> train);
  Trainer(RunConfig config, std::vector<SyntheticPair> train, const Checkpoint& resume);

  const RunConfig& config() const { return config_; }
  CvSltModel& model() { return model_; }
  const CvSltModel& model() const { return model_; }
  long step() const { return step_; }

  StepRecord train_step();
  Checkpoint checkpoint() const;

 private:
  const Batch& batch_for(long step);

  RunConfig config_;
  std::vector<SyntheticPair> train_;
  CvSltModel model_;
  Adam adam_;
  long step_ = 0;
  long cached_epoch_ = -1;
  std::vector<Batch> epoch_batches_;
};

DevMetrics evaluate_dev(const CvSltModel& model, std::span<const SyntheticPair> dev, const BeamOptions& options,
                        std::size_t threads = 1);

std::string to_json_line(const StepRecord& record, const std::optional<DevMetrics>& dev);

struct TrainResult {
  std::vector<StepRecord> log;
  std::optional<DevMetrics> final_dev;
};

/// Runs the configured number of steps, writing metrics.jsonl, last.ckpt,
/// best.ckpt and config.json into `config.out_dir` when it is non-empty.
/// `on_log` sees every logged record.
TrainResult run_training(Trainer& trainer, std::span<const SyntheticPair> dev,
                         const std::function<void(const StepRecord&, const std::optional<DevMetrics>&)>& on_log = {});

/// Maximum decode length for a corpus: 2 + 2 * longest target.
std::size_t default_max_len(std::span<const SyntheticPair> pairs);

}  // namespace cvslt
