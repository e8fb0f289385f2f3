#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mmvr/corpus.hpp"
#include "mmvr/encoders.hpp"
#include "mmvr/masking.hpp"
#include "mmvr/metrics.hpp"
#include "mmvr/rng.hpp"

namespace mmvr {

enum class TrainPhase { kPretrain, kFinetune, kScratch };

const char* phase_name(TrainPhase p);

struct TrainConfig {
  TrainPhase phase = TrainPhase::kPretrain;
  int batch_size = 32;
  double lr0 = 1e-4;
  double decay_factor = 0.98;
  int decay_every_steps = 2000;
  std::int64_t total_steps = 2000;
  double margin = 0.05;
  MaskingConfig masking;  // pretrain only
  std::uint64_t seed = 0;
  std::int64_t eval_every_steps = 100;
  int crop_s = 8;
  SampleCaps caps;
  CaptionAggregation aggregation = CaptionAggregation::kPooled;  // finetune query path
  bool freeze_query = false;  // finetune variant: train only the video side

  void validate() const;  // throws ConfigError
};

// lr0 * decay_factor^floor(step / decay_every); step counts completed updates
double lr_at(std::int64_t step, const TrainConfig& cfg);

struct AdamSlots {
  std::vector<double> m;
  std::vector<double> v;
};

struct AdamState {
  std::int64_t step = 0;  // applied updates; bias correction uses step after increment
  std::map<std::string, AdamSlots> slots;
};

// Standard bias-corrected Adam over every tensor that requires grad, in name
// order. Unallocated gradients count as zero. Throws TrainError naming the
// parameter on a non-finite gradient.
void adam_step(ModelParams& params, AdamState& state, double lr, double beta1 = 0.9,
               double beta2 = 0.999, double eps = 1e-8);

struct Checkpoint {
  std::uint32_t version = 1;
  std::uint64_t config_fingerprint = 0;
  std::int64_t step = 0;
  Rng::State trainer_rng{};
  Rng::State masking_rng{};
  ModelParams params;
  AdamState adam;
};

struct PretrainResult {
  Checkpoint checkpoint;  // state after the last step
  std::vector<double> loss_history;
  std::vector<std::pair<std::int64_t, double>> val_loss_history;
};

// Alternating-objective pre-training. resume, when given, must carry the same
// config fingerprint and continues the identical trajectory bit-exactly.
PretrainResult pretrain(const FeatureStore& store, const ModelConfig& model_cfg,
                        const TrainConfig& cfg, const Checkpoint* resume = nullptr,
                        std::ostream* log = nullptr);

struct FinetuneResult {
  Checkpoint checkpoint;    // state after the last step
  ModelParams best_params;  // snapshot maximizing validation gm (first best kept on ties)
  std::int64_t best_step = 0;
  RetrievalMetrics best_val_metrics;
  std::vector<double> loss_history;
  std::vector<std::pair<std::int64_t, RetrievalMetrics>> val_history;
};

// Caption-to-video fine-tuning. init == nullptr trains from scratch.
FinetuneResult finetune(const FeatureStore& store, const ModelConfig& model_cfg,
                        const TrainConfig& cfg, const ModelParams* init = nullptr,
                        std::ostream* log = nullptr);

// FNV-1a over a canonical rendering of every trajectory-defining field.
// total_steps and eval cadence are excluded so a resumed run may extend them.
std::uint64_t config_fingerprint(const ModelConfig& model_cfg, const TrainConfig& cfg);

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
// Fingerprint mismatches throw ConfigError unless force.
Checkpoint load_checkpoint(const std::string& path,
                           std::optional<std::uint64_t> expect_fingerprint = std::nullopt,
                           bool force = false);

}  // namespace mmvr
