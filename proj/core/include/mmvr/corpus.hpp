#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "mmvr/rng.hpp"

namespace mmvr {

// Synthetic multimodal corpus. Every clip is a set of noisy views of one
// latent vector z: dense per-second rgb/audio features through fixed random
// projections, and speech as nearest-codebook tokens of projected z, so that
// captions and speech share a vocabulary and genuinely co-vary with the
// visual stream.

struct GeneratorConfig {
  std::int64_t n_clips = 0;
  int z_dim = 16;
  int d_rgb = 64;
  int d_aud = 16;
  int d_asr = 32;
  int vocab_size = 256;
  double noise_rgb = 0.7;
  double noise_aud = 1.0;
  double noise_asr = 0.3;
  int caption_min = 4;   // caption length range, inclusive
  int caption_max = 8;
  int duration_min = 8;  // clip duration range in seconds, inclusive
  int duration_max = 15;
  int words_per_second = 2;
  bool silence_alignment = false;
  double silence_prob = 0.25;  // per-second chance of a synchronized silence
  std::uint64_t seed = 0;

  void validate() const;  // throws ConfigError
  bool operator==(const GeneratorConfig&) const = default;
};

struct ClipRecord {
  std::int64_t clip_id = 0;
  int duration_s = 0;
  std::vector<std::vector<double>> rgb;    // duration_s x d_rgb
  std::vector<std::vector<double>> audio;  // duration_s x d_aud
  std::vector<std::vector<double>> asr;    // one d_asr feature per wordpiece
  std::vector<int> asr_tokens;             // vocabulary id per wordpiece
  std::vector<int> asr_times_s;            // second each wordpiece was uttered
  std::vector<int> caption_tokens;
  std::vector<double> latent;  // generation-only ground truth, never encoded

  bool operator==(const ClipRecord&) const = default;
};

struct CorpusManifest {
  std::uint32_t format_version = 1;
  GeneratorConfig gen;
  std::int64_t n_clips = 0;
  // fixed per-corpus projections, row-major [D_m x Z]
  std::vector<double> a_rgb;
  std::vector<double> a_aud;
  std::vector<double> a_asr;
  std::vector<double> codebook;  // [vocab_size x d_asr]
  // hash-ranked split with exact 80/10/10 quotas
  std::vector<std::int64_t> train_ids;
  std::vector<std::int64_t> val_ids;
  std::vector<std::int64_t> test_ids;
  std::vector<std::uint64_t> offsets;  // absolute file offset per clip record

  bool operator==(const CorpusManifest&) const = default;
};

std::pair<CorpusManifest, std::vector<ClipRecord>> generate_corpus(const GeneratorConfig& cfg);

void write_store(const CorpusManifest& manifest, const std::vector<ClipRecord>& records,
                 const std::string& path);

// The whole file is held in memory; records decode (and checksum-verify) on
// access. Reads are const and safe to share across threads.
class FeatureStore {
 public:
  static FeatureStore open(const std::string& path);  // throws DataError / MissingInputError

  const CorpusManifest& manifest() const { return manifest_; }
  std::int64_t size() const { return manifest_.n_clips; }
  ClipRecord record(std::int64_t clip_id) const;

 private:
  CorpusManifest manifest_;
  std::vector<std::uint8_t> bytes_;
};

FeatureStore read_store(const std::string& path);

// One line per clip: id and stream lengths, for eyeballing a store.
void dump_manifest(const FeatureStore& store, std::ostream& out);

// Per-modality sequence caps applied when sampling; text covers captions and
// the query-side ASR window.
struct SampleCaps {
  int rgb = 30;
  int audio = 30;
  int asr = 128;
  int text = 30;
};

struct SampledStream {
  std::vector<std::vector<double>> feats;
  std::vector<int> pos;  // temporal index per feature (crop-relative)
};

struct SampledClip {
  std::int64_t clip_id = 0;
  SampledStream rgb;
  SampledStream audio;
  SampledStream asr;          // asr.pos is the crop-relative second of each word
  std::vector<int> asr_tokens;
  std::vector<int> caption_tokens;
};

struct RawBatch {
  std::vector<SampledClip> clips;
};

// B distinct clips from pool, each randomly cropped to crop_s seconds; dense
// streams keep a sorted random subsample when over cap, ASR words inside the
// visual crop take a random contiguous window, captions a random contiguous
// window. No padding is fabricated.
RawBatch sample_batch(const FeatureStore& store, std::span<const std::int64_t> pool, int batch_size,
                      int crop_s, const SampleCaps& caps, Rng& rng);

// Deterministic variant for evaluation: crop starts at 0, over-cap streams
// are evenly spaced, text windows take the prefix.
SampledClip sample_eval_clip(const FeatureStore& store, std::int64_t clip_id, int crop_s,
                             const SampleCaps& caps);

}  // namespace mmvr
