#include <doctest.h>

#include <array>
#include <cmath>
#include <cstring>
#include <vector>

#include "mmvr/corpus.hpp"
#include "mmvr/errors.hpp"
#include "mmvr/masking.hpp"
#include "mmvr/rng.hpp"

using namespace mmvr;

namespace {

// Every feature vector gets a unique leading value so a moved or kept token
// can be traced back to its original index.
SampledStream tagged_stream(int len, int dim, int tag0) {
  SampledStream s;
  for (int i = 0; i < len; ++i) {
    std::vector<double> f(static_cast<size_t>(dim), 0.0);
    f[0] = static_cast<double>(tag0 + i);
    s.feats.push_back(std::move(f));
    s.pos.push_back(2 * i + 1);  // distinctive, non-contiguous positions
  }
  return s;
}

SampledClip tagged_clip(std::int64_t id, int rgb_len, int aud_len, int asr_len) {
  SampledClip c;
  c.clip_id = id;
  c.rgb = tagged_stream(rgb_len, 4, 100);
  c.audio = tagged_stream(aud_len, 3, 200);
  c.asr = tagged_stream(asr_len, 5, 300);
  for (int i = 0; i < asr_len; ++i) c.asr_tokens.push_back(10 + i);
  c.caption_tokens = {1, 2, 3};
  return c;
}

int index_of(const SampledStream& original, const std::vector<double>& feat) {
  for (size_t i = 0; i < original.feats.size(); ++i)
    if (original.feats[i] == feat) return static_cast<int>(i);
  return -1;
}

// ceil(f * len) clamped to [1, len], the contract for the moved-token count
int expected_moved(double f, int len) {
  const int k = static_cast<int>(std::ceil(f * static_cast<double>(len) - 1e-9));
  return std::max(1, std::min(k, len));
}

}  // namespace

TEST_CASE("objective sampling matches the p / (1-p)/2 split") {
  MaskingConfig cfg;
  cfg.p = 0.8;
  Rng rng(7);
  std::array<std::int64_t, 3> counts{0, 0, 0};
  const int n = 30000;
  for (int i = 0; i < n; ++i) counts[static_cast<size_t>(sample_objective(rng, cfg))]++;

  const std::array<double, 3> expect{0.1 * n, 0.1 * n, 0.8 * n};
  double chi2 = 0.0;
  for (int m = 0; m < 3; ++m) {
    const double d = static_cast<double>(counts[static_cast<size_t>(m)]) - expect[static_cast<size_t>(m)];
    chi2 += d * d / expect[static_cast<size_t>(m)];
  }
  // df = 2; 13.8 is the 0.999 quantile
  CHECK(chi2 < 13.8);
}

TEST_CASE("objective sampling degenerate p values") {
  Rng rng(11);
  MaskingConfig all_asr;
  all_asr.p = 1.0;
  for (int i = 0; i < 200; ++i) CHECK(sample_objective(rng, all_asr) == ModalityId::ASR);

  MaskingConfig never_asr;
  never_asr.p = 0.0;
  std::array<int, 3> counts{0, 0, 0};
  for (int i = 0; i < 2000; ++i) counts[static_cast<size_t>(sample_objective(rng, never_asr))]++;
  CHECK(counts[static_cast<size_t>(ModalityId::ASR)] == 0);
  CHECK(counts[0] > 800);  // ~1000 each
  CHECK(counts[1] > 800);
}

TEST_CASE("masking config validation") {
  MaskingConfig cfg;
  cfg.p = -0.1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.p = 1.1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.p = 0.5;
  cfg.mask_fraction = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.mask_fraction = 1.2;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.mask_fraction = 1.0;
  CHECK_NOTHROW(cfg.validate());

  RawBatch raw;
  raw.clips.push_back(tagged_clip(0, 3, 3, 3));
  Rng rng(1);
  CHECK_THROWS_AS((void)build_masked_batch(raw, ModalityId::RGB, 0.0, rng), ConfigError);
  CHECK_THROWS_AS((void)build_masked_batch(raw, ModalityId::RGB, 1.5, rng), ConfigError);
}

TEST_CASE("masked batch partitions the supervising stream exactly") {
  for (const double f : {0.15, 0.5, 0.85, 1.0}) {
    for (const ModalityId sup : kModalities) {
      RawBatch raw;
      raw.clips.push_back(tagged_clip(0, 5, 4, 7));
      raw.clips.push_back(tagged_clip(1, 9, 6, 13));
      raw.clips.push_back(tagged_clip(2, 1, 1, 1));
      Rng rng(101 + static_cast<int>(sup) + static_cast<int>(f * 100));

      const MaskedBatch batch = build_masked_batch(raw, sup, f, rng);
      REQUIRE(batch.clips.size() == raw.clips.size());
      CHECK(batch.supervising == sup);

      for (size_t ci = 0; ci < raw.clips.size(); ++ci) {
        const SampledClip& orig = raw.clips[ci];
        const VideoInputs whole = VideoInputs::all_of(orig);
        const MaskedClip& mc = batch.clips[ci];
        const auto s = static_cast<size_t>(sup);
        const SampledStream& source = whole.streams[s];
        const int len = static_cast<int>(source.feats.size());
        const int k = expected_moved(f, len);

        CHECK(mc.query.supervising == sup);
        REQUIRE(static_cast<int>(mc.query.feats.feats.size()) == k);
        CHECK(static_cast<int>(mc.video.streams[s].feats.size()) == len - k);

        // moved and kept each map to strictly increasing original indices
        // and together cover the stream exactly once
        std::vector<bool> seen(static_cast<size_t>(len), false);
        int prev = -1;
        for (size_t i = 0; i < mc.query.feats.feats.size(); ++i) {
          const int oi = index_of(source, mc.query.feats.feats[i]);
          REQUIRE(oi >= 0);
          CHECK(oi > prev);
          prev = oi;
          CHECK(!seen[static_cast<size_t>(oi)]);
          seen[static_cast<size_t>(oi)] = true;
          // moved tokens carry their original positions
          CHECK(mc.query.feats.pos[i] == source.pos[static_cast<size_t>(oi)]);
          if (sup == ModalityId::ASR) {
            CHECK(mc.query.tokens[i] == orig.asr_tokens[static_cast<size_t>(oi)]);
            CHECK(mc.query.token_pos[i] == source.pos[static_cast<size_t>(oi)]);
          }
        }
        prev = -1;
        for (size_t i = 0; i < mc.video.streams[s].feats.size(); ++i) {
          const int oi = index_of(source, mc.video.streams[s].feats[i]);
          REQUIRE(oi >= 0);
          CHECK(oi > prev);
          prev = oi;
          CHECK(!seen[static_cast<size_t>(oi)]);
          seen[static_cast<size_t>(oi)] = true;
          CHECK(mc.video.streams[s].pos[i] == source.pos[static_cast<size_t>(oi)]);
        }
        for (bool b : seen) CHECK(b);

        // non-asr objectives leave the token fields empty
        if (sup != ModalityId::ASR) {
          CHECK(mc.query.tokens.empty());
          CHECK(mc.query.token_pos.empty());
        }

        // collaborators pass through untouched
        for (int m = 0; m < kNumModalities; ++m) {
          if (m == static_cast<int>(sup)) continue;
          CHECK(mc.video.streams[static_cast<size_t>(m)].feats ==
                whole.streams[static_cast<size_t>(m)].feats);
          CHECK(mc.video.streams[static_cast<size_t>(m)].pos ==
                whole.streams[static_cast<size_t>(m)].pos);
          CHECK(mc.video.present[static_cast<size_t>(m)]);
        }

        // a fully moved stream leaves the video side absent
        if (k == len) {
          CHECK_FALSE(mc.video.present[s]);
          CHECK(mc.video.streams[s].feats.empty());
        } else {
          CHECK(mc.video.present[s]);
        }
      }
    }
  }
}

TEST_CASE("moved token count is ceil of the fraction, at least one") {
  // (f, len, expected)
  const struct {
    double f;
    int len;
    int k;
  } cases[] = {
      {1.0, 5, 5},  {1.0, 1, 1},   {0.5, 5, 3},  {0.5, 4, 2},   {0.15, 7, 2},
      {0.15, 2, 1}, {0.15, 1, 1},  {0.3, 10, 3}, {0.2, 5, 1},   {0.85, 7, 6},
      {0.85, 20, 17}, {0.01, 9, 1}, {0.99, 3, 3},
  };
  for (const auto& c : cases) {
    CAPTURE(c.f);
    CAPTURE(c.len);
    RawBatch raw;
    raw.clips.push_back(tagged_clip(0, 3, 3, c.len));
    Rng rng(5);
    const MaskedBatch batch = build_masked_batch(raw, ModalityId::ASR, c.f, rng);
    CHECK(static_cast<int>(batch.clips[0].query.feats.feats.size()) == c.k);
  }
}

TEST_CASE("masking is deterministic in the rng and varies across draws") {
  RawBatch raw;
  raw.clips.push_back(tagged_clip(0, 8, 8, 16));
  raw.clips.push_back(tagged_clip(1, 8, 8, 16));

  Rng r1(42), r2(42);
  const MaskedBatch a = build_masked_batch(raw, ModalityId::ASR, 0.5, r1);
  const MaskedBatch b = build_masked_batch(raw, ModalityId::ASR, 0.5, r2);
  REQUIRE(a.clips.size() == b.clips.size());
  for (size_t i = 0; i < a.clips.size(); ++i) {
    CHECK(a.clips[i].query.feats.feats == b.clips[i].query.feats.feats);
    CHECK(a.clips[i].query.tokens == b.clips[i].query.tokens);
  }

  // across many draws the moved subset must vary (16 choose 8 is huge)
  Rng r3(7);
  bool subset_varies = false;
  const MaskedBatch first = build_masked_batch(raw, ModalityId::ASR, 0.5, r3);
  for (int trial = 0; trial < 20 && !subset_varies; ++trial) {
    const MaskedBatch next = build_masked_batch(raw, ModalityId::ASR, 0.5, r3);
    subset_varies = next.clips[0].query.tokens != first.clips[0].query.tokens;
  }
  CHECK(subset_varies);
}

TEST_CASE("empty supervising stream is a data error") {
  RawBatch raw;
  SampledClip c = tagged_clip(3, 4, 4, 2);
  c.asr = SampledStream{};
  c.asr_tokens.clear();
  raw.clips.push_back(std::move(c));
  Rng rng(1);
  CHECK_THROWS_AS((void)build_masked_batch(raw, ModalityId::ASR, 1.0, rng), DataError);
  // the same batch is fine when a non-empty modality supervises
  CHECK_NOTHROW((void)build_masked_batch(raw, ModalityId::RGB, 1.0, rng));
}

TEST_CASE("masked batches from a generated corpus feed both encoders") {
  GeneratorConfig gen;
  gen.n_clips = 12;
  gen.seed = 9;
  const auto [manifest, records] = generate_corpus(gen);
  write_store(manifest, records, "masking_smoke.bin");
  const FeatureStore store = read_store("masking_smoke.bin");

  std::vector<std::int64_t> pool(static_cast<size_t>(store.size()));
  for (size_t i = 0; i < pool.size(); ++i) pool[i] = static_cast<std::int64_t>(i);
  Rng rng(3);
  const RawBatch raw = sample_batch(store, pool, 4, 8, SampleCaps{}, rng);

  for (const ModalityId sup : kModalities) {
    Rng mrng(17);
    const MaskedBatch batch = build_masked_batch(raw, sup, 1.0, mrng);
    for (const MaskedClip& mc : batch.clips) {
      CHECK_FALSE(mc.video.present[static_cast<size_t>(sup)]);
      CHECK((!mc.query.feats.feats.empty() || !mc.query.tokens.empty()));
      if (sup == ModalityId::ASR) {
        REQUIRE(mc.query.tokens.size() == mc.query.token_pos.size());
        // positions stay on the crop clock
        for (int p : mc.query.token_pos) {
          CHECK(p >= 0);
          CHECK(p < 8);
        }
      }
    }
  }
}
