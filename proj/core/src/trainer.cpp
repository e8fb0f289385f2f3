#include "mmvr/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>

#include "mmvr/errors.hpp"
#include "mmvr/objective.hpp"

namespace mmvr {

const char* phase_name(TrainPhase p) {
  switch (p) {
    case TrainPhase::kPretrain: return "pretrain";
    case TrainPhase::kFinetune: return "finetune";
    case TrainPhase::kScratch: return "scratch";
  }
  throw Error("bad phase");
}

void TrainConfig::validate() const {
  if (batch_size < 2) throw ConfigError("train: batch_size must be >= 2");
  if (lr0 <= 0.0) throw ConfigError("train: lr0 must be > 0");
  if (decay_factor <= 0.0 || decay_factor > 1.0)
    throw ConfigError("train: decay_factor must be in (0,1]");
  if (decay_every_steps < 1) throw ConfigError("train: decay_every_steps must be >= 1");
  if (total_steps < 1) throw ConfigError("train: total_steps must be >= 1");
  if (margin < 0.0) throw ConfigError("train: margin must be >= 0");
  if (eval_every_steps < 1) throw ConfigError("train: eval_every_steps must be >= 1");
  if (crop_s < 1) throw ConfigError("train: crop_s must be >= 1");
  if (phase == TrainPhase::kPretrain) masking.validate();
}

double lr_at(std::int64_t step, const TrainConfig& cfg) {
  if (step < 0) throw ConfigError("lr_at: step must be >= 0");
  return cfg.lr0 * std::pow(cfg.decay_factor, static_cast<double>(step / cfg.decay_every_steps));
}

void adam_step(ModelParams& params, AdamState& state, double lr, double beta1, double beta2,
               double eps) {
  ++state.step;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (auto& [name, param] : params.tensors) {
    if (!param.requires_grad()) continue;
    const size_t n = static_cast<size_t>(param.size());
    AdamSlots& slots = state.slots[name];
    if (slots.m.size() != n) {
      slots.m.assign(n, 0.0);
      slots.v.assign(n, 0.0);
    }
    const bool has_grad = param.grad_allocated();
    const std::vector<double>& g = param.grad();
    double* theta = param.data();
    for (size_t i = 0; i < n; ++i) {
      const double gi = has_grad ? g[i] : 0.0;
      if (!std::isfinite(gi)) throw TrainError("non-finite gradient in parameter " + name);
      slots.m[i] = beta1 * slots.m[i] + (1.0 - beta1) * gi;
      slots.v[i] = beta2 * slots.v[i] + (1.0 - beta2) * gi * gi;
      theta[i] -= lr * (slots.m[i] / bc1) / (std::sqrt(slots.v[i] / bc2) + eps);
    }
  }
}

namespace {

void check_model_matches_store(const ModelConfig& model_cfg, const CorpusManifest& manifest) {
  if (model_cfg.d_rgb != manifest.gen.d_rgb || model_cfg.d_aud != manifest.gen.d_aud ||
      model_cfg.d_asr != manifest.gen.d_asr)
    throw ConfigError("model feature dims do not match the corpus manifest");
  if (model_cfg.vocab_size != manifest.gen.vocab_size)
    throw ConfigError("model vocab_size does not match the corpus manifest");
}

void check_crop_within_caps(const TrainConfig& cfg, const ModelConfig& model_cfg) {
  // temporal tables index crop-relative seconds, so crops may not exceed caps
  if (cfg.crop_s > model_cfg.cap_rgb || cfg.crop_s > model_cfg.cap_audio)
    throw ConfigError("train: crop_s exceeds the rgb/audio sequence caps");
}

double run_loss_batch(const std::vector<MaskedClip>& clips, const ModelConfig& model_cfg,
                      const ModelParams& params, double margin, Rng* dropout_rng,
                      Tensor* loss_out) {
  std::vector<VideoRepr> videos;
  std::vector<QueryRepr> queries;
  videos.reserve(clips.size());
  queries.reserve(clips.size());
  for (const MaskedClip& mc : clips) videos.push_back(encode_video(mc.video, model_cfg, params, dropout_rng));
  const Tensor uniform = Tensor::full({1, kNumModalities}, 1.0 / kNumModalities);
  for (const MaskedClip& mc : clips) {
    QueryRepr q = encode_query_pretrain(mc.query, model_cfg, params, dropout_rng);
    // pre-training scores use uniform weights; renormalization over the
    // video's nonzero modalities spreads them over the collaborators
    q.weights = uniform;
    queries.push_back(std::move(q));
  }
  const Tensor s = similarity_matrix(queries, videos);
  Tensor loss = bidirectional_max_margin_loss(s, margin);
  const double value = loss.item();
  if (!std::isfinite(value)) throw TrainError("pretrain: non-finite loss");
  if (loss_out != nullptr) *loss_out = std::move(loss);
  return value;
}

double pretrain_val_loss(const FeatureStore& store, const ModelConfig& model_cfg,
                         const TrainConfig& cfg, const ModelParams& params, std::int64_t step) {
  const auto& val_ids = store.manifest().val_ids;
  const int b = std::min<int>(cfg.batch_size, static_cast<int>(val_ids.size()));
  if (b < 2) return std::numeric_limits<double>::quiet_NaN();
  // derived stream keyed by (seed, step): never touches the training rngs
  Rng vrng(mix64(cfg.seed ^ static_cast<std::uint64_t>(step) ^ 0xA11DA7AULL));
  const RawBatch raw = sample_batch(store, val_ids, b, cfg.crop_s, cfg.caps, vrng);
  const ModalityId sup = sample_objective(vrng, cfg.masking);
  const MaskedBatch masked = build_masked_batch(raw, sup, cfg.masking.mask_fraction, vrng);
  NoGradGuard no_grad;
  return run_loss_batch(masked.clips, model_cfg, params, cfg.margin, nullptr, nullptr);
}

}  // namespace

std::uint64_t config_fingerprint(const ModelConfig& m, const TrainConfig& t) {
  std::string s;
  auto field = [&s](const std::string& v) {
    s += v;
    s += '\x1f';
  };
  auto num = [&field](double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    field(buf);
  };
  field("model");
  for (int v : {m.d_model, m.n_layers, m.n_heads, m.d_ff, m.d_rgb, m.d_aud, m.d_asr,
                m.vocab_size, m.cap_rgb, m.cap_audio, m.cap_asr, m.cap_text,
                m.use_temporal_embeddings_psi ? 1 : 0, m.use_temporal_embeddings_phi ? 1 : 0,
                m.netvlad_clusters})
    num(v);
  num(m.dropout_p);
  num(m.ln_eps);
  field("train");
  field(phase_name(t.phase));
  num(t.batch_size);
  num(t.lr0);
  num(t.decay_factor);
  num(t.decay_every_steps);
  num(t.margin);
  num(t.masking.p);
  num(t.masking.mask_fraction);
  num(static_cast<double>(t.masking.seed));
  num(static_cast<double>(t.seed));
  num(t.crop_s);
  for (int v : {t.caps.rgb, t.caps.audio, t.caps.asr, t.caps.text}) num(v);
  field(t.aggregation == CaptionAggregation::kPooled ? "pooled" : "netvlad");
  num(t.freeze_query ? 1 : 0);

  // FNV-1a 64
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

PretrainResult pretrain(const FeatureStore& store, const ModelConfig& model_cfg,
                        const TrainConfig& cfg, const Checkpoint* resume, std::ostream* log) {
  model_cfg.validate();
  cfg.validate();
  if (cfg.phase != TrainPhase::kPretrain) throw ConfigError("pretrain: config phase mismatch");
  check_model_matches_store(model_cfg, store.manifest());
  check_crop_within_caps(cfg, model_cfg);
  const std::uint64_t fingerprint = config_fingerprint(model_cfg, cfg);

  PretrainResult result;
  Rng trainer_rng(cfg.seed);
  Rng masking_rng(cfg.masking.seed);
  std::int64_t start_step = 0;
  if (resume != nullptr) {
    if (resume->config_fingerprint != fingerprint)
      throw ConfigError("pretrain: resume checkpoint has a different config fingerprint");
    // detach from the caller's tensors; updates must not leak into *resume
    result.checkpoint.params = resume->params.clone();
    result.checkpoint.adam = resume->adam;
    trainer_rng = Rng::from_state(resume->trainer_rng);
    masking_rng = Rng::from_state(resume->masking_rng);
    start_step = resume->step;
  } else {
    Rng init_rng(mix64(cfg.seed ^ 0x1217ULL));
    result.checkpoint.params =
        ModelParams::init(model_cfg, init_rng, &store.manifest().codebook);
  }
  ModelParams& params = result.checkpoint.params;
  AdamState& adam = result.checkpoint.adam;
  result.checkpoint.config_fingerprint = fingerprint;

  const auto& train_ids = store.manifest().train_ids;
  for (std::int64_t step = start_step; step < cfg.total_steps; ++step) {
    const RawBatch raw =
        sample_batch(store, train_ids, cfg.batch_size, cfg.crop_s, cfg.caps, trainer_rng);
    const ModalityId sup = sample_objective(masking_rng, cfg.masking);
    const MaskedBatch masked =
        build_masked_batch(raw, sup, cfg.masking.mask_fraction, masking_rng);

    Tensor loss;
    const double loss_value =
        run_loss_batch(masked.clips, model_cfg, params, cfg.margin, &trainer_rng, &loss);
    params.zero_grad();
    backward(loss);
    adam_step(params, adam, lr_at(step, cfg));
    result.loss_history.push_back(loss_value);

    const std::int64_t done = step + 1;
    if (done % cfg.eval_every_steps == 0 || done == cfg.total_steps) {
      const double val = pretrain_val_loss(store, model_cfg, cfg, params, done);
      result.val_loss_history.emplace_back(done, val);
      if (log != nullptr)
        *log << "pretrain step " << done << " loss " << loss_value << " val_loss " << val
             << " lr " << lr_at(step, cfg) << "\n";
    }
  }

  result.checkpoint.step = cfg.total_steps;
  result.checkpoint.trainer_rng = trainer_rng.state();
  result.checkpoint.masking_rng = masking_rng.state();
  return result;
}

FinetuneResult finetune(const FeatureStore& store, const ModelConfig& model_cfg,
                        const TrainConfig& cfg, const ModelParams* init, std::ostream* log) {
  model_cfg.validate();
  cfg.validate();
  if (cfg.phase == TrainPhase::kPretrain) throw ConfigError("finetune: config phase mismatch");
  check_model_matches_store(model_cfg, store.manifest());
  check_crop_within_caps(cfg, model_cfg);

  FinetuneResult result;
  Rng trainer_rng(cfg.seed);
  if (init != nullptr) {
    // detached copy: updates must not leak into the caller's snapshot
    result.checkpoint.params = init->clone();
    // a loaded snapshot may have been frozen; training starts unfrozen
    result.checkpoint.params.set_requires_grad_prefix("", true);
  } else {
    Rng init_rng(mix64(cfg.seed ^ 0x1217ULL));
    result.checkpoint.params =
        ModelParams::init(model_cfg, init_rng, &store.manifest().codebook);
  }
  ModelParams& params = result.checkpoint.params;
  AdamState& adam = result.checkpoint.adam;
  result.checkpoint.config_fingerprint = config_fingerprint(model_cfg, cfg);
  if (cfg.freeze_query) params.set_requires_grad_prefix("phi.", false);

  const auto& train_ids = store.manifest().train_ids;
  const auto& val_ids = store.manifest().val_ids;
  EvalOptions eval_opt;
  eval_opt.crop_s = cfg.crop_s;
  eval_opt.caps = cfg.caps;
  eval_opt.aggregation = cfg.aggregation;

  double best_gm = -1.0;
  for (std::int64_t step = 0; step < cfg.total_steps; ++step) {
    const RawBatch raw =
        sample_batch(store, train_ids, cfg.batch_size, cfg.crop_s, cfg.caps, trainer_rng);
    std::vector<VideoRepr> videos;
    std::vector<QueryRepr> queries;
    videos.reserve(raw.clips.size());
    queries.reserve(raw.clips.size());
    for (const SampledClip& clip : raw.clips)
      videos.push_back(encode_video(VideoInputs::all_of(clip), model_cfg, params, &trainer_rng));
    for (const SampledClip& clip : raw.clips)
      queries.push_back(encode_query_caption(clip.caption_tokens, cfg.aggregation, model_cfg,
                                             params, &trainer_rng));
    const Tensor s = similarity_matrix(queries, videos);
    Tensor loss = bidirectional_max_margin_loss(s, cfg.margin);
    const double loss_value = loss.item();
    if (!std::isfinite(loss_value)) throw TrainError("finetune: non-finite loss");
    params.zero_grad();
    backward(loss);
    adam_step(params, adam, lr_at(step, cfg));
    result.loss_history.push_back(loss_value);

    const std::int64_t done = step + 1;
    if (done % cfg.eval_every_steps == 0 || done == cfg.total_steps) {
      const RetrievalMetrics val = evaluate_retrieval(store, val_ids, model_cfg, params, eval_opt);
      result.val_history.emplace_back(done, val);
      const double gm = geometric_mean_selection(val);
      if (gm > best_gm) {
        best_gm = gm;
        result.best_step = done;
        result.best_val_metrics = val;
        result.best_params.tensors.clear();
        for (const auto& [name, t] : params.tensors)
          result.best_params.tensors.emplace(name, t.clone(true));
      }
      if (log != nullptr)
        *log << phase_name(cfg.phase) << " step " << done << " loss " << loss_value << " val_gm "
             << gm << " best " << best_gm << "@" << result.best_step << "\n";
    }
  }

  result.checkpoint.step = cfg.total_steps;
  result.checkpoint.trainer_rng = trainer_rng.state();
  return result;
}

}  // namespace mmvr
