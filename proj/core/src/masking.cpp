#include "mmvr/masking.hpp"

#include <algorithm>
#include <cmath>

#include "mmvr/errors.hpp"

namespace mmvr {

void MaskingConfig::validate() const {
  if (p < 0.0 || p > 1.0) throw ConfigError("masking: p must be in [0,1]");
  if (mask_fraction <= 0.0 || mask_fraction > 1.0)
    throw ConfigError("masking: mask_fraction must be in (0,1]");
}

ModalityId sample_objective(Rng& rng, const MaskingConfig& cfg) {
  cfg.validate();
  const double u = rng.uniform();
  if (u < cfg.p) return ModalityId::ASR;
  return u < cfg.p + (1.0 - cfg.p) / 2.0 ? ModalityId::RGB : ModalityId::AUDIO;
}

namespace {

// ceil(f * len) guarded against the product landing epsilon above an integer
int masked_count(double f, int len) {
  const int k = static_cast<int>(std::ceil(f * static_cast<double>(len) - 1e-9));
  return std::clamp(k, 1, len);
}

}  // namespace

MaskedBatch build_masked_batch(const RawBatch& raw, ModalityId supervising, double f, Rng& rng) {
  if (f <= 0.0 || f > 1.0) throw ConfigError("build_masked_batch: mask_fraction must be in (0,1]");
  MaskedBatch batch;
  batch.supervising = supervising;
  batch.clips.reserve(raw.clips.size());
  const auto sup = static_cast<size_t>(supervising);

  for (const SampledClip& clip : raw.clips) {
    MaskedClip mc;
    mc.video = VideoInputs::all_of(clip);
    mc.query.supervising = supervising;

    const SampledStream& stream = mc.video.streams[sup];
    const int len = static_cast<int>(stream.feats.size());
    if (len == 0)
      throw DataError("build_masked_batch: clip " + std::to_string(clip.clip_id) +
                      " has no tokens in the supervising modality");
    const int k = masked_count(f, len);
    const std::vector<int> moved = sample_indices_sorted(len, k, rng);

    std::vector<bool> is_moved(static_cast<size_t>(len), false);
    for (int i : moved) is_moved[static_cast<size_t>(i)] = true;

    SampledStream kept;
    for (int i = 0; i < len; ++i) {
      if (is_moved[static_cast<size_t>(i)]) {
        mc.query.feats.feats.push_back(stream.feats[static_cast<size_t>(i)]);
        mc.query.feats.pos.push_back(stream.pos[static_cast<size_t>(i)]);
        if (supervising == ModalityId::ASR) {
          mc.query.tokens.push_back(clip.asr_tokens[static_cast<size_t>(i)]);
          mc.query.token_pos.push_back(stream.pos[static_cast<size_t>(i)]);
        }
      } else {
        kept.feats.push_back(stream.feats[static_cast<size_t>(i)]);
        kept.pos.push_back(stream.pos[static_cast<size_t>(i)]);
      }
    }
    mc.video.streams[sup] = std::move(kept);
    if (mc.video.streams[sup].feats.empty()) mc.video.present[sup] = false;

    batch.clips.push_back(std::move(mc));
  }
  return batch;
}

}  // namespace mmvr
