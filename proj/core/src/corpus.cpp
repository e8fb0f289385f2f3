#include "mmvr/corpus.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <ostream>
#include <utility>

#include "mmvr/errors.hpp"
#include "mmvr/serialize.hpp"

namespace mmvr {

namespace {

constexpr char kMagic[8] = {'M', 'M', 'V', 'R', 'F', 'S', 'T', '1'};
constexpr std::uint32_t kVersion = 1;

std::uint32_t crc_of(const std::uint8_t* data, size_t n) {
  return static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(data), static_cast<uInt>(n)));
}

// y = A x for row-major A [rows x cols]
std::vector<double> matvec(const std::vector<double>& a, int rows, int cols,
                           const std::vector<double>& x) {
  std::vector<double> y(rows, 0.0);
  for (int r = 0; r < rows; ++r) {
    double acc = 0.0;
    const double* row = a.data() + static_cast<size_t>(r) * cols;
    for (int c = 0; c < cols; ++c) acc += row[c] * x[c];
    y[r] = acc;
  }
  return y;
}

int nearest_codebook_token(const std::vector<double>& codebook, int vocab, int dim,
                           const std::vector<double>& target) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int k = 0; k < vocab; ++k) {
    const double* row = codebook.data() + static_cast<size_t>(k) * dim;
    double d = 0.0;
    for (int j = 0; j < dim; ++j) {
      const double diff = row[j] - target[j];
      d += diff * diff;
    }
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

void serialize_manifest(ByteWriter& w, const CorpusManifest& m) {
  w.put_u32(m.format_version);
  const GeneratorConfig& g = m.gen;
  w.put_i64(g.n_clips);
  w.put_u32(static_cast<std::uint32_t>(g.z_dim));
  w.put_u32(static_cast<std::uint32_t>(g.d_rgb));
  w.put_u32(static_cast<std::uint32_t>(g.d_aud));
  w.put_u32(static_cast<std::uint32_t>(g.d_asr));
  w.put_u32(static_cast<std::uint32_t>(g.vocab_size));
  w.put_f64(g.noise_rgb);
  w.put_f64(g.noise_aud);
  w.put_f64(g.noise_asr);
  w.put_u32(static_cast<std::uint32_t>(g.caption_min));
  w.put_u32(static_cast<std::uint32_t>(g.caption_max));
  w.put_u32(static_cast<std::uint32_t>(g.duration_min));
  w.put_u32(static_cast<std::uint32_t>(g.duration_max));
  w.put_u32(static_cast<std::uint32_t>(g.words_per_second));
  w.put_u8(g.silence_alignment ? 1 : 0);
  w.put_f64(g.silence_prob);
  w.put_u64(g.seed);
  w.put_i64(m.n_clips);
  w.put_f64_vec(m.a_rgb);
  w.put_f64_vec(m.a_aud);
  w.put_f64_vec(m.a_asr);
  w.put_f64_vec(m.codebook);
  w.put_i64_vec(m.train_ids);
  w.put_i64_vec(m.val_ids);
  w.put_i64_vec(m.test_ids);
  w.put_u64(m.offsets.size());
  for (std::uint64_t off : m.offsets) w.put_u64(off);
}

CorpusManifest deserialize_manifest(ByteReader& r) {
  CorpusManifest m;
  m.format_version = r.get_u32();
  GeneratorConfig& g = m.gen;
  g.n_clips = r.get_i64();
  g.z_dim = static_cast<int>(r.get_u32());
  g.d_rgb = static_cast<int>(r.get_u32());
  g.d_aud = static_cast<int>(r.get_u32());
  g.d_asr = static_cast<int>(r.get_u32());
  g.vocab_size = static_cast<int>(r.get_u32());
  g.noise_rgb = r.get_f64();
  g.noise_aud = r.get_f64();
  g.noise_asr = r.get_f64();
  g.caption_min = static_cast<int>(r.get_u32());
  g.caption_max = static_cast<int>(r.get_u32());
  g.duration_min = static_cast<int>(r.get_u32());
  g.duration_max = static_cast<int>(r.get_u32());
  g.words_per_second = static_cast<int>(r.get_u32());
  g.silence_alignment = r.get_u8() != 0;
  g.silence_prob = r.get_f64();
  g.seed = r.get_u64();
  m.n_clips = r.get_i64();
  m.a_rgb = r.get_f64_vec();
  m.a_aud = r.get_f64_vec();
  m.a_asr = r.get_f64_vec();
  m.codebook = r.get_f64_vec();
  m.train_ids = r.get_i64_vec();
  m.val_ids = r.get_i64_vec();
  m.test_ids = r.get_i64_vec();
  const std::uint64_t n_off = r.get_u64();
  m.offsets.resize(n_off);
  for (auto& off : m.offsets) off = r.get_u64();
  return m;
}

std::vector<std::uint8_t> serialize_record(const ClipRecord& rec) {
  ByteWriter w;
  w.put_i64(rec.clip_id);
  w.put_u32(static_cast<std::uint32_t>(rec.duration_s));
  w.put_u64(rec.rgb.size());
  for (const auto& f : rec.rgb)
    for (double v : f) w.put_f64(v);
  w.put_u64(rec.audio.size());
  for (const auto& f : rec.audio)
    for (double v : f) w.put_f64(v);
  w.put_u64(rec.asr.size());
  for (const auto& f : rec.asr)
    for (double v : f) w.put_f64(v);
  w.put_i32_vec(rec.asr_tokens);
  w.put_i32_vec(rec.asr_times_s);
  w.put_i32_vec(rec.caption_tokens);
  w.put_f64_vec(rec.latent);
  return w.take();
}

ClipRecord deserialize_record(ByteReader& r, const GeneratorConfig& g) {
  ClipRecord rec;
  rec.clip_id = r.get_i64();
  rec.duration_s = static_cast<int>(r.get_u32());
  auto read_stream = [&r](int dim) {
    const std::uint64_t n = r.get_u64();
    std::vector<std::vector<double>> out(n);
    for (auto& f : out) {
      f.resize(dim);
      for (double& v : f) v = r.get_f64();
    }
    return out;
  };
  rec.rgb = read_stream(g.d_rgb);
  rec.audio = read_stream(g.d_aud);
  rec.asr = read_stream(g.d_asr);
  rec.asr_tokens = r.get_i32_vec();
  rec.asr_times_s = r.get_i32_vec();
  rec.caption_tokens = r.get_i32_vec();
  rec.latent = r.get_f64_vec();
  return rec;
}

}  // namespace

void GeneratorConfig::validate() const {
  if (n_clips <= 0) throw ConfigError("generator: zero clips requested");
  if (z_dim < 1 || d_rgb < 1 || d_aud < 1 || d_asr < 1)
    throw ConfigError("generator: all dims must be >= 1");
  if (vocab_size < 1) throw ConfigError("generator: vocab_size must be >= 1");
  if (noise_rgb < 0 || noise_aud < 0 || noise_asr < 0)
    throw ConfigError("generator: noise_sigma must be >= 0");
  if (caption_min < 1 || caption_max < caption_min)
    throw ConfigError("generator: bad caption length range");
  if (duration_min < 1 || duration_max < duration_min)
    throw ConfigError("generator: bad duration range");
  if (words_per_second < 1) throw ConfigError("generator: words_per_second must be >= 1");
  if (silence_prob < 0.0 || silence_prob > 1.0)
    throw ConfigError("generator: silence_prob must be in [0,1]");
}

std::pair<CorpusManifest, std::vector<ClipRecord>> generate_corpus(const GeneratorConfig& cfg) {
  cfg.validate();
  CorpusManifest manifest;
  manifest.gen = cfg;
  manifest.n_clips = cfg.n_clips;

  Rng master(cfg.seed);
  // Per-corpus projections: entries N(0, 1/sqrt(Z)) so feature scale is O(1).
  const double a_scale = 1.0 / std::sqrt(static_cast<double>(cfg.z_dim));
  auto draw_matrix = [&master](size_t n, double scale) {
    std::vector<double> m(n);
    for (double& v : m) v = master.normal() * scale;
    return m;
  };
  manifest.a_rgb = draw_matrix(static_cast<size_t>(cfg.d_rgb) * cfg.z_dim, a_scale);
  manifest.a_aud = draw_matrix(static_cast<size_t>(cfg.d_aud) * cfg.z_dim, a_scale);
  manifest.a_asr = draw_matrix(static_cast<size_t>(cfg.d_asr) * cfg.z_dim, a_scale);
  manifest.codebook = draw_matrix(static_cast<size_t>(cfg.vocab_size) * cfg.d_asr, 1.0);

  std::vector<ClipRecord> records;
  records.reserve(static_cast<size_t>(cfg.n_clips));
  for (std::int64_t id = 0; id < cfg.n_clips; ++id) {
    Rng rng = master.fork(static_cast<std::uint64_t>(id));
    ClipRecord rec;
    rec.clip_id = id;
    rec.latent.resize(cfg.z_dim);
    for (double& v : rec.latent) v = rng.normal();

    rec.duration_s = cfg.duration_min +
                     static_cast<int>(rng.bounded(
                         static_cast<std::uint64_t>(cfg.duration_max - cfg.duration_min + 1)));

    std::vector<bool> silent(rec.duration_s, false);
    if (cfg.silence_alignment) {
      for (int t = 0; t < rec.duration_s; ++t) silent[t] = rng.uniform() < cfg.silence_prob;
      // cap silent runs at 3 s so any window of >= 4 s keeps some speech
      int run = 0;
      for (int t = 0; t < rec.duration_s; ++t) {
        if (silent[t] && run >= 3) silent[t] = false;
        run = silent[t] ? run + 1 : 0;
      }
    }

    const std::vector<double> mean_rgb = matvec(manifest.a_rgb, cfg.d_rgb, cfg.z_dim, rec.latent);
    const std::vector<double> mean_aud = matvec(manifest.a_aud, cfg.d_aud, cfg.z_dim, rec.latent);
    const std::vector<double> mean_asr = matvec(manifest.a_asr, cfg.d_asr, cfg.z_dim, rec.latent);

    rec.rgb.resize(rec.duration_s);
    rec.audio.resize(rec.duration_s);
    for (int t = 0; t < rec.duration_s; ++t) {
      rec.rgb[t].resize(cfg.d_rgb);
      for (int j = 0; j < cfg.d_rgb; ++j) rec.rgb[t][j] = mean_rgb[j] + cfg.noise_rgb * rng.normal();
      rec.audio[t].assign(cfg.d_aud, 0.0);
      // silent seconds keep exactly-zero audio; rng draws are skipped so the
      // stream stays aligned with the asr gap below
      if (!silent[t])
        for (int j = 0; j < cfg.d_aud; ++j)
          rec.audio[t][j] = mean_aud[j] + cfg.noise_aud * rng.normal();
    }

    std::vector<double> target(cfg.d_asr);
    for (int t = 0; t < rec.duration_s; ++t) {
      if (silent[t]) continue;  // no speech during silence
      for (int w = 0; w < cfg.words_per_second; ++w) {
        for (int j = 0; j < cfg.d_asr; ++j) target[j] = mean_asr[j] + cfg.noise_asr * rng.normal();
        const int tok = nearest_codebook_token(manifest.codebook, cfg.vocab_size, cfg.d_asr, target);
        std::vector<double> feat(cfg.d_asr);
        for (int j = 0; j < cfg.d_asr; ++j)
          feat[j] = manifest.codebook[static_cast<size_t>(tok) * cfg.d_asr + j] +
                    cfg.noise_asr * rng.normal();
        rec.asr.push_back(std::move(feat));
        rec.asr_tokens.push_back(tok);
        rec.asr_times_s.push_back(t);
      }
    }

    // captions sample the same codebook neighborhood of z as the speech
    const int cap_len = cfg.caption_min +
                        static_cast<int>(rng.bounded(
                            static_cast<std::uint64_t>(cfg.caption_max - cfg.caption_min + 1)));
    for (int w = 0; w < cap_len; ++w) {
      for (int j = 0; j < cfg.d_asr; ++j) target[j] = mean_asr[j] + cfg.noise_asr * rng.normal();
      rec.caption_tokens.push_back(
          nearest_codebook_token(manifest.codebook, cfg.vocab_size, cfg.d_asr, target));
    }

    records.push_back(std::move(rec));
  }

  // Hash-ranked split with exact quotas: 10% val, 10% test, rest train.
  std::vector<std::int64_t> order(static_cast<size_t>(cfg.n_clips));
  std::iota(order.begin(), order.end(), 0);
  const std::uint64_t salt = mix64(cfg.seed ^ 0x5EEDC0DEULL);
  std::sort(order.begin(), order.end(), [salt](std::int64_t a, std::int64_t b) {
    const std::uint64_t ha = mix64(salt ^ static_cast<std::uint64_t>(a));
    const std::uint64_t hb = mix64(salt ^ static_cast<std::uint64_t>(b));
    return ha != hb ? ha < hb : a < b;
  });
  const std::int64_t n_val = cfg.n_clips / 10;
  const std::int64_t n_test = cfg.n_clips / 10;
  const std::int64_t n_train = cfg.n_clips - n_val - n_test;
  manifest.train_ids.assign(order.begin(), order.begin() + n_train);
  manifest.val_ids.assign(order.begin() + n_train, order.begin() + n_train + n_val);
  manifest.test_ids.assign(order.begin() + n_train + n_val, order.end());
  std::sort(manifest.train_ids.begin(), manifest.train_ids.end());
  std::sort(manifest.val_ids.begin(), manifest.val_ids.end());
  std::sort(manifest.test_ids.begin(), manifest.test_ids.end());

  return {std::move(manifest), std::move(records)};
}

void write_store(const CorpusManifest& manifest, const std::vector<ClipRecord>& records,
                 const std::string& path) {
  if (static_cast<std::int64_t>(records.size()) != manifest.n_clips)
    throw DataError("write_store: manifest counts " + std::to_string(manifest.n_clips) +
                    " clips but " + std::to_string(records.size()) + " were given");

  std::vector<std::vector<std::uint8_t>> payloads;
  payloads.reserve(records.size());
  for (const ClipRecord& rec : records) payloads.push_back(serialize_record(rec));

  // Offsets depend on the manifest length, which depends on the offsets
  // vector only through its (fixed) size, so a sizing pass suffices.
  CorpusManifest sized = manifest;
  sized.offsets.assign(records.size(), 0);
  ByteWriter sizing;
  serialize_manifest(sizing, sized);
  // layout: magic, version, u64 manifest length, manifest, u32 manifest crc
  std::uint64_t cursor = 8 + 4 + 8 + sizing.size() + 4;
  for (size_t i = 0; i < payloads.size(); ++i) {
    sized.offsets[i] = cursor;
    cursor += 8 + payloads[i].size() + 4;  // u64 length, payload, u32 crc
  }

  ByteWriter manifest_bytes;
  serialize_manifest(manifest_bytes, sized);
  if (manifest_bytes.size() != sizing.size())
    throw Error("write_store: manifest sizing pass disagrees");

  ByteWriter out;
  out.put_bytes(kMagic, sizeof(kMagic));
  out.put_u32(kVersion);
  out.put_u64(manifest_bytes.size());
  out.put_bytes(manifest_bytes.bytes().data(), manifest_bytes.size());
  out.put_u32(crc_of(manifest_bytes.bytes().data(), manifest_bytes.size()));
  for (const auto& payload : payloads) {
    out.put_u64(payload.size());
    out.put_bytes(payload.data(), payload.size());
    out.put_u32(crc_of(payload.data(), payload.size()));
  }

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("write_store: cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(out.bytes().data()),
          static_cast<std::streamsize>(out.size()));
  if (!f) throw DataError("write_store: short write to " + path);
}

FeatureStore FeatureStore::open(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MissingInputError("feature store not found: " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());

  ByteReader r(bytes.data(), bytes.size());
  char magic[8];
  if (bytes.size() < 12) throw DataError(path + ": truncated store header");
  for (char& c : magic) c = static_cast<char>(r.get_u8());
  if (std::memcmp(magic, kMagic, 8) != 0) throw DataError(path + ": not a feature store");
  const std::uint32_t version = r.get_u32();
  if (version != kVersion)
    throw DataError(path + ": unsupported store version " + std::to_string(version));
  const std::uint64_t manifest_len = r.get_u64();
  if (manifest_len > r.remaining()) throw DataError(path + ": truncated manifest");
  const size_t manifest_start = r.pos();
  ByteReader mr(bytes.data() + manifest_start, manifest_len);
  CorpusManifest manifest = deserialize_manifest(mr);
  ByteReader tail(bytes.data() + manifest_start + manifest_len, bytes.size() - manifest_start -
                                                                    manifest_len);
  const std::uint32_t stored_crc = tail.get_u32();
  if (stored_crc != crc_of(bytes.data() + manifest_start, manifest_len))
    throw DataError(path + ": manifest checksum mismatch");

  if (static_cast<std::int64_t>(manifest.offsets.size()) != manifest.n_clips)
    throw DataError(path + ": offset table does not match clip count");
  for (size_t i = 1; i < manifest.offsets.size(); ++i)
    if (manifest.offsets[i] <= manifest.offsets[i - 1])
      throw DataError(path + ": offsets not strictly increasing");

  FeatureStore store;
  store.manifest_ = std::move(manifest);
  store.bytes_ = std::move(bytes);
  return store;
}

ClipRecord FeatureStore::record(std::int64_t clip_id) const {
  if (clip_id < 0 || clip_id >= manifest_.n_clips)
    throw DataError("clip_id " + std::to_string(clip_id) + " outside store of " +
                    std::to_string(manifest_.n_clips) + " clips");
  const std::uint64_t off = manifest_.offsets[static_cast<size_t>(clip_id)];
  if (off + 8 > bytes_.size())
    throw DataError("truncated store: record " + std::to_string(clip_id) + " out of bounds");
  ByteReader r(bytes_.data() + off, bytes_.size() - off);
  const std::uint64_t len = r.get_u64();
  if (len + 4 > r.remaining())
    throw DataError("truncated store: record " + std::to_string(clip_id) + " cut short");
  const std::uint8_t* payload = bytes_.data() + off + 8;
  ByteReader tail(payload + len, 4);
  if (tail.get_u32() != crc_of(payload, len))
    throw DataError("checksum mismatch in clip record " + std::to_string(clip_id));
  ByteReader pr(payload, len);
  ClipRecord rec = deserialize_record(pr, manifest_.gen);
  if (rec.clip_id != clip_id)
    throw DataError("store record id " + std::to_string(rec.clip_id) + " found at slot " +
                    std::to_string(clip_id));
  return rec;
}

FeatureStore read_store(const std::string& path) { return FeatureStore::open(path); }

void dump_manifest(const FeatureStore& store, std::ostream& out) {
  for (std::int64_t id = 0; id < store.size(); ++id) {
    const ClipRecord rec = store.record(id);
    out << "{\"clip_id\": " << rec.clip_id << ", \"duration_s\": " << rec.duration_s
        << ", \"rgb\": " << rec.rgb.size() << ", \"audio\": " << rec.audio.size()
        << ", \"asr\": " << rec.asr.size() << ", \"caption\": " << rec.caption_tokens.size()
        << "}\n";
  }
}

namespace {

SampledClip crop_clip(const ClipRecord& rec, int crop_s, const SampleCaps& caps, Rng* rng) {
  SampledClip out;
  out.clip_id = rec.clip_id;
  const int len = std::min(rec.duration_s, crop_s);
  const int t0 =
      rec.duration_s > crop_s && rng
          ? static_cast<int>(rng->bounded(static_cast<std::uint64_t>(rec.duration_s - crop_s + 1)))
          : 0;

  auto take_dense = [&](const std::vector<std::vector<double>>& stream, int cap,
                        SampledStream& dst) {
    std::vector<int> picks;
    if (len <= cap) {
      picks.resize(len);
      std::iota(picks.begin(), picks.end(), 0);
    } else if (rng) {
      picks = sample_indices_sorted(len, cap, *rng);
    } else {
      picks.resize(cap);
      for (int i = 0; i < cap; ++i) picks[i] = static_cast<int>((static_cast<std::int64_t>(i) * len) / cap);
    }
    for (int p : picks) {
      dst.feats.push_back(stream[static_cast<size_t>(t0 + p)]);
      dst.pos.push_back(p);
    }
  };
  take_dense(rec.rgb, caps.rgb, out.rgb);
  take_dense(rec.audio, caps.audio, out.audio);

  // asr words inside the visual crop, then a contiguous window if over cap
  std::vector<int> in_crop;
  for (size_t w = 0; w < rec.asr_times_s.size(); ++w)
    if (rec.asr_times_s[w] >= t0 && rec.asr_times_s[w] < t0 + len)
      in_crop.push_back(static_cast<int>(w));
  int w0 = 0;
  int wn = static_cast<int>(in_crop.size());
  if (wn > caps.asr) {
    w0 = rng ? static_cast<int>(rng->bounded(static_cast<std::uint64_t>(wn - caps.asr + 1))) : 0;
    wn = caps.asr;
  }
  for (int i = 0; i < wn; ++i) {
    const int w = in_crop[static_cast<size_t>(w0 + i)];
    out.asr.feats.push_back(rec.asr[static_cast<size_t>(w)]);
    // words carry the second they were uttered, on the same clock as the
    // dense streams, so temporal embeddings mean time for every modality
    out.asr.pos.push_back(rec.asr_times_s[static_cast<size_t>(w)] - t0);
    out.asr_tokens.push_back(rec.asr_tokens[static_cast<size_t>(w)]);
  }

  int c0 = 0;
  int cn = static_cast<int>(rec.caption_tokens.size());
  if (cn > caps.text) {
    c0 = rng ? static_cast<int>(rng->bounded(static_cast<std::uint64_t>(cn - caps.text + 1))) : 0;
    cn = caps.text;
  }
  out.caption_tokens.assign(rec.caption_tokens.begin() + c0, rec.caption_tokens.begin() + c0 + cn);
  return out;
}

}  // namespace

RawBatch sample_batch(const FeatureStore& store, std::span<const std::int64_t> pool,
                      int batch_size, int crop_s, const SampleCaps& caps, Rng& rng) {
  if (batch_size < 2) throw ConfigError("sample_batch: batch_size must be >= 2");
  if (crop_s < 1) throw ConfigError("sample_batch: crop_s must be >= 1");
  if (caps.rgb < 1 || caps.audio < 1 || caps.asr < 1 || caps.text < 1)
    throw ConfigError("sample_batch: caps must be >= 1");
  if (static_cast<size_t>(batch_size) > pool.size())
    throw DataError("sample_batch: batch of " + std::to_string(batch_size) + " from pool of " +
                    std::to_string(pool.size()));

  std::vector<std::int64_t> ids(pool.begin(), pool.end());
  for (int i = 0; i < batch_size; ++i) {
    const size_t j =
        static_cast<size_t>(i) + rng.bounded(static_cast<std::uint64_t>(ids.size() - i));
    std::swap(ids[static_cast<size_t>(i)], ids[j]);
  }
  ids.resize(static_cast<size_t>(batch_size));

  RawBatch batch;
  batch.clips.reserve(ids.size());
  for (std::int64_t id : ids) {
    const ClipRecord rec = store.record(id);
    batch.clips.push_back(crop_clip(rec, crop_s, caps, &rng));
  }
  return batch;
}

SampledClip sample_eval_clip(const FeatureStore& store, std::int64_t clip_id, int crop_s,
                             const SampleCaps& caps) {
  return crop_clip(store.record(clip_id), crop_s, caps, nullptr);
}

}  // namespace mmvr
