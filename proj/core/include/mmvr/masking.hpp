#pragma once

#include <cstdint>
#include <vector>

#include "mmvr/corpus.hpp"
#include "mmvr/encoders.hpp"
#include "mmvr/rng.hpp"

namespace mmvr {

// Per-batch alternation: one modality supervises (its tokens go to the query
// encoder), the others collaborate (they stay with the video encoder).

struct MaskingConfig {
  double p = 0.8;             // probability asr supervises; rgb/audio get (1-p)/2 each
  double mask_fraction = 1.0;  // f in (0, 1]: fraction of supervising tokens moved
  std::uint64_t seed = 0;

  void validate() const;  // throws ConfigError
};

struct MaskedClip {
  VideoInputs video;         // c_i: collaborators in full, plus any kept fraction
  PretrainQueryInput query;  // q_i: exactly the tokens removed from the video side
};

struct MaskedBatch {
  ModalityId supervising = ModalityId::ASR;
  std::vector<MaskedClip> clips;
};

// asr with probability p, rgb and audio each (1-p)/2
ModalityId sample_objective(Rng& rng, const MaskingConfig& cfg);

// Moves a uniform random ceil(f * len) subset of the supervising stream's
// tokens to the query side; the video side keeps the exact complement. f = 1
// moves the whole stream and drops the modality from the present set.
MaskedBatch build_masked_batch(const RawBatch& raw, ModalityId supervising, double f, Rng& rng);

}  // namespace mmvr
