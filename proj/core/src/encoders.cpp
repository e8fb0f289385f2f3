#include "mmvr/encoders.hpp"

#include <atomic>
#include <cmath>
#include <numeric>

#include "mmvr/errors.hpp"

namespace mmvr {

namespace {

std::atomic<std::uint64_t> g_geu_degenerate{0};

const char* kModKeys[3] = {"rgb", "audio", "asr"};

std::string mod_key(ModalityId m) { return kModKeys[static_cast<int>(m)]; }

Tensor stream_tensor(const std::vector<std::vector<double>>& feats, int dim, const char* what) {
  std::vector<double> flat;
  flat.reserve(feats.size() * static_cast<size_t>(dim));
  for (const auto& f : feats) {
    if (static_cast<int>(f.size()) != dim)
      throw ShapeError(std::string(what) + ": feature of dim " + std::to_string(f.size()) +
                       ", expected " + std::to_string(dim));
    flat.insert(flat.end(), f.begin(), f.end());
  }
  return Tensor::from_data({static_cast<int>(feats.size()), dim}, std::move(flat));
}

Tensor maybe_dropout(Tensor x, const ModelConfig& cfg, Rng* rng) {
  if (rng == nullptr || cfg.dropout_p <= 0.0) return x;
  return dropout(x, cfg.dropout_p, *rng, true);
}

// Post-LN residual blocks: x = LN(x + MHA(x)); x = LN(x + FF(x)).
Tensor transformer_stack(Tensor x, const std::string& prefix, const ModelConfig& cfg,
                         const ModelParams& params, Rng* rng) {
  const int d = cfg.d_model;
  const int dh = d / cfg.n_heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int layer = 0; layer < cfg.n_layers; ++layer) {
    const std::string base = prefix + ".layers." + std::to_string(layer);
    const Tensor q = add_rowvec(matmul(x, params.at(base + ".attn.wq")),
                                params.at(base + ".attn.bq"));
    const Tensor k = add_rowvec(matmul(x, params.at(base + ".attn.wk")),
                                params.at(base + ".attn.bk"));
    const Tensor v = add_rowvec(matmul(x, params.at(base + ".attn.wv")),
                                params.at(base + ".attn.bv"));
    std::vector<Tensor> heads;
    heads.reserve(static_cast<size_t>(cfg.n_heads));
    for (int h = 0; h < cfg.n_heads; ++h) {
      const Tensor qh = slice_cols(q, h * dh, dh);
      const Tensor kh = slice_cols(k, h * dh, dh);
      const Tensor vh = slice_cols(v, h * dh, dh);
      const Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt_dh);
      heads.push_back(matmul(softmax(scores, 1), vh));
    }
    Tensor ctx = concat(heads, 1);
    ctx = add_rowvec(matmul(ctx, params.at(base + ".attn.wo")), params.at(base + ".attn.bo"));
    ctx = maybe_dropout(std::move(ctx), cfg, rng);
    x = layer_norm(add(x, ctx), params.at(base + ".ln1.g"), params.at(base + ".ln1.b"),
                   cfg.ln_eps);
    Tensor ff = gelu(add_rowvec(matmul(x, params.at(base + ".ff.w1")), params.at(base + ".ff.b1")));
    ff = add_rowvec(matmul(ff, params.at(base + ".ff.w2")), params.at(base + ".ff.b2"));
    ff = maybe_dropout(std::move(ff), cfg, rng);
    x = layer_norm(add(x, ff), params.at(base + ".ln2.g"), params.at(base + ".ln2.b"), cfg.ln_eps);
  }
  return x;
}

Tensor geu_of(const Tensor& x, const ModelParams& params, const std::string& base) {
  return gated_embedding_unit(x, params.at(base + ".w1"), params.at(base + ".b1"),
                              params.at(base + ".w2"), params.at(base + ".b2"));
}

// modality tokens for one stream: projected features plus modality embedding
// (plus temporal embedding when enabled), and the max-pool aggregated token
struct StreamTokens {
  Tensor agg;    // [1, d]
  Tensor feats;  // [T, d]
};

StreamTokens project_stream(const SampledStream& s, ModalityId m, const std::string& side,
                            bool temporal, const ModelConfig& cfg, const ModelParams& params) {
  const std::string key = mod_key(m);
  if (s.pos.size() != s.feats.size())
    throw ShapeError(side + " " + key + ": " + std::to_string(s.feats.size()) +
                     " features but " + std::to_string(s.pos.size()) + " positions");
  const Tensor x = stream_tensor(s.feats, cfg.feature_dim(m), (side + " " + key).c_str());
  const Tensor p = add_rowvec(matmul(x, params.at(side + ".proj." + key + ".w")),
                              params.at(side + ".proj." + key + ".b"));
  const Tensor modemb = slice_rows(params.at(side + ".modemb"), static_cast<int>(m), 1);
  StreamTokens out;
  out.agg = add(max_over_rows(p), modemb);
  out.feats = add_rowvec(p, modemb);
  if (temporal)
    out.feats = add(out.feats, embedding_lookup(params.at(side + ".temporal." + key), s.pos));
  return out;
}

QueryRepr query_head(const Tensor& summary, const std::string& geu_base,
                     const std::string& whead_base, const ModelParams& params) {
  QueryRepr repr;
  for (ModalityId m : kModalities)
    repr.q[static_cast<size_t>(m)] = geu_of(summary, params, geu_base + "." + mod_key(m));
  repr.weights = softmax(add_rowvec(matmul(summary, params.at(whead_base + ".w")),
                                    params.at(whead_base + ".b")),
                         1);
  return repr;
}

}  // namespace

const char* modality_name(ModalityId m) { return kModKeys[static_cast<int>(m)]; }

ModalityId modality_from_name(const std::string& name) {
  for (ModalityId m : kModalities)
    if (name == kModKeys[static_cast<int>(m)]) return m;
  throw ConfigError("unknown modality: " + name);
}

void ModelConfig::validate() const {
  if (d_model < 1 || n_layers < 1 || n_heads < 1 || d_ff < 1)
    throw ConfigError("model: d_model, n_layers, n_heads, d_ff must be >= 1");
  if (d_model % n_heads != 0) throw ConfigError("model: d_model must be divisible by n_heads");
  if (dropout_p < 0.0 || dropout_p >= 1.0) throw ConfigError("model: dropout_p must be in [0,1)");
  if (d_rgb < 1 || d_aud < 1 || d_asr < 1) throw ConfigError("model: feature dims must be >= 1");
  if (vocab_size < 1) throw ConfigError("model: vocab_size must be >= 1");
  if (cap_rgb < 1 || cap_audio < 1 || cap_asr < 1 || cap_text < 1)
    throw ConfigError("model: caps must be >= 1");
  if (netvlad_clusters < 1) throw ConfigError("model: netvlad_clusters must be >= 1");
  if (ln_eps <= 0.0) throw ConfigError("model: ln_eps must be > 0");
}

int ModelConfig::feature_dim(ModalityId m) const {
  switch (m) {
    case ModalityId::RGB: return d_rgb;
    case ModalityId::AUDIO: return d_aud;
    case ModalityId::ASR: return d_asr;
  }
  throw Error("bad modality");
}

int ModelConfig::cap(ModalityId m) const {
  switch (m) {
    case ModalityId::RGB: return cap_rgb;
    case ModalityId::AUDIO: return cap_audio;
    case ModalityId::ASR: return cap_asr;
  }
  throw Error("bad modality");
}

ModelParams ModelParams::init(const ModelConfig& cfg, Rng& rng,
                              const std::vector<double>* token_codebook) {
  cfg.validate();
  ModelParams p;
  const int d = cfg.d_model;
  // Creation order below is the rng draw order; keep it stable.
  auto w = [&](const std::string& name, Shape shape, double stddev = 0.02) {
    p.tensors.emplace(name, Tensor::randn(std::move(shape), stddev, rng, true));
  };
  auto zeros = [&](const std::string& name, Shape shape) {
    p.tensors.emplace(name, Tensor::zeros(std::move(shape), true));
  };
  auto ones = [&](const std::string& name, Shape shape) {
    p.tensors.emplace(name, Tensor::full(std::move(shape), 1.0, true));
  };

  for (const std::string side : {"psi", "phi"}) {
    const bool temporal = side == "psi" ? cfg.use_temporal_embeddings_psi
                                        : cfg.use_temporal_embeddings_phi;
    for (ModalityId m : kModalities) {
      const std::string key = mod_key(m);
      w(side + ".proj." + key + ".w", {cfg.feature_dim(m), d});
      zeros(side + ".proj." + key + ".b", {1, d});
    }
    w(side + ".modemb", {kNumModalities, d});
    if (temporal) {
      w(side + ".temporal.rgb", {cfg.cap_rgb, d});
      w(side + ".temporal.audio", {cfg.cap_audio, d});
      w(side + ".temporal.asr", {std::max(cfg.cap_asr, cfg.cap_text), d});
    }
    for (int layer = 0; layer < cfg.n_layers; ++layer) {
      const std::string base = side + ".layers." + std::to_string(layer);
      for (const char* mat : {"wq", "wk", "wv", "wo"}) w(base + ".attn." + mat, {d, d});
      for (const char* vec : {"bq", "bk", "bv", "bo"}) zeros(base + ".attn." + vec, {1, d});
      ones(base + ".ln1.g", {1, d});
      zeros(base + ".ln1.b", {1, d});
      w(base + ".ff.w1", {d, cfg.d_ff});
      zeros(base + ".ff.b1", {1, cfg.d_ff});
      w(base + ".ff.w2", {cfg.d_ff, d});
      zeros(base + ".ff.b2", {1, d});
      ones(base + ".ln2.g", {1, d});
      zeros(base + ".ln2.b", {1, d});
    }
    for (ModalityId m : kModalities) {
      const std::string base = side + ".geu." + mod_key(m);
      w(base + ".w1", {d, d});
      zeros(base + ".b1", {1, d});
      w(base + ".w2", {d, d});
      zeros(base + ".b2", {1, d});
    }
  }

  w("phi.cls", {1, d});
  if (token_codebook != nullptr) {
    if (static_cast<std::int64_t>(token_codebook->size()) !=
        static_cast<std::int64_t>(cfg.vocab_size) * cfg.d_asr)
      throw ShapeError("token codebook size does not match vocab_size x d_asr");
    p.tensors.emplace("phi.token_emb",
                      Tensor::from_data({cfg.vocab_size, cfg.d_asr}, *token_codebook, true));
  } else {
    // same scale as corpus codebooks so the asr projection sees familiar inputs
    w("phi.token_emb", {cfg.vocab_size, cfg.d_asr}, 1.0);
  }
  w("phi.whead.w", {d, kNumModalities});
  zeros("phi.whead.b", {1, kNumModalities});

  const int kd = cfg.netvlad_clusters * d;
  w("phi.vlad.assign.w", {d, cfg.netvlad_clusters});
  zeros("phi.vlad.assign.b", {1, cfg.netvlad_clusters});
  w("phi.vlad.centers", {cfg.netvlad_clusters, d});
  for (ModalityId m : kModalities) {
    const std::string base = "phi.vlad.geu." + mod_key(m);
    w(base + ".w1", {kd, d});
    zeros(base + ".b1", {1, d});
    w(base + ".w2", {d, d});
    zeros(base + ".b2", {1, d});
  }
  w("phi.vlad.whead.w", {kd, kNumModalities});
  zeros("phi.vlad.whead.b", {1, kNumModalities});

  return p;
}

Tensor& ModelParams::at(const std::string& name) {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw Error("unknown parameter: " + name);
  return it->second;
}

const Tensor& ModelParams::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw Error("unknown parameter: " + name);
  return it->second;
}

ModelParams ModelParams::clone() const {
  ModelParams out;
  for (const auto& [name, t] : tensors) out.tensors.emplace(name, t.clone(t.requires_grad()));
  return out;
}

void ModelParams::zero_grad() {
  for (auto& [name, t] : tensors) t.zero_grad();
}

void ModelParams::set_requires_grad_prefix(const std::string& prefix, bool value) {
  for (auto& [name, t] : tensors)
    if (name.rfind(prefix, 0) == 0) t.set_requires_grad(value);
}

std::int64_t ModelParams::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& [name, t] : tensors) n += t.size();
  return n;
}

VideoInputs VideoInputs::all_of(const SampledClip& clip) {
  VideoInputs in;
  in.streams = {clip.rgb, clip.audio, clip.asr};
  in.present = {true, true, true};
  return in;
}

VideoInputs VideoInputs::only(const SampledClip& clip, ModalityId m) {
  VideoInputs in;
  in.streams = {clip.rgb, clip.audio, clip.asr};
  in.present[static_cast<size_t>(m)] = true;
  return in;
}

VideoRepr encode_video(const VideoInputs& in, const ModelConfig& cfg, const ModelParams& params,
                       Rng* dropout_rng) {
  // a modality that is present but has an empty stream is treated as absent
  std::vector<int> active;
  for (int m = 0; m < kNumModalities; ++m)
    if (in.present[static_cast<size_t>(m)] && !in.streams[static_cast<size_t>(m)].feats.empty())
      active.push_back(m);
  if (active.empty()) throw DataError("encode_video: no modalities present");

  std::vector<Tensor> aggs;
  std::vector<Tensor> feats;
  for (int m : active) {
    StreamTokens st = project_stream(in.streams[static_cast<size_t>(m)],
                                     static_cast<ModalityId>(m), "psi",
                                     cfg.use_temporal_embeddings_psi, cfg, params);
    aggs.push_back(std::move(st.agg));
    feats.push_back(std::move(st.feats));
  }
  std::vector<Tensor> sequence = aggs;
  sequence.insert(sequence.end(), feats.begin(), feats.end());
  const Tensor out = transformer_stack(concat(sequence, 0), "psi", cfg, params, dropout_rng);

  VideoRepr repr;
  for (int m = 0; m < kNumModalities; ++m)
    repr.v[static_cast<size_t>(m)] = Tensor::zeros({1, cfg.d_model});
  for (size_t i = 0; i < active.size(); ++i) {
    const ModalityId m = static_cast<ModalityId>(active[i]);
    repr.v[static_cast<size_t>(m)] =
        geu_of(slice_rows(out, static_cast<int>(i), 1), params, "psi.geu." + mod_key(m));
  }
  return repr;
}

QueryRepr encode_query_pretrain(const PretrainQueryInput& in, const ModelConfig& cfg,
                                const ModelParams& params, Rng* dropout_rng) {
  Tensor summary;
  if (in.supervising == ModalityId::ASR) {
    if (in.tokens.empty()) throw DataError("encode_query_pretrain: empty supervising stream");
    if (in.token_pos.size() != in.tokens.size())
      throw ShapeError("encode_query_pretrain: token/position count mismatch");
    const Tensor emb = embedding_lookup(params.at("phi.token_emb"), in.tokens);
    Tensor tok = add_rowvec(matmul(emb, params.at("phi.proj.asr.w")),
                            params.at("phi.proj.asr.b"));
    tok = add_rowvec(tok, slice_rows(params.at("phi.modemb"), static_cast<int>(ModalityId::ASR), 1));
    if (cfg.use_temporal_embeddings_phi)
      tok = add(tok, embedding_lookup(params.at("phi.temporal.asr"), in.token_pos));
    const std::array<Tensor, 2> seq{params.at("phi.cls"), tok};
    const Tensor out = transformer_stack(concat(seq, 0), "phi", cfg, params, dropout_rng);
    summary = slice_rows(out, 0, 1);
  } else {
    if (in.feats.feats.empty()) throw DataError("encode_query_pretrain: empty supervising stream");
    StreamTokens st = project_stream(in.feats, in.supervising, "phi",
                                     cfg.use_temporal_embeddings_phi, cfg, params);
    const std::array<Tensor, 2> seq{st.agg, st.feats};
    const Tensor out = transformer_stack(concat(seq, 0), "phi", cfg, params, dropout_rng);
    summary = slice_rows(out, 0, 1);
  }
  return query_head(summary, "phi.geu", "phi.whead", params);
}

QueryRepr encode_query_caption(std::span<const int> tokens, CaptionAggregation aggregation,
                               const ModelConfig& cfg, const ModelParams& params,
                               Rng* dropout_rng) {
  if (tokens.empty()) throw DataError("encode_query_caption: empty caption");
  if (aggregation == CaptionAggregation::kPooled) {
    // captions ride the asr query path: same token table, same encoder
    PretrainQueryInput in;
    in.supervising = ModalityId::ASR;
    in.tokens.assign(tokens.begin(), tokens.end());
    in.token_pos.resize(tokens.size());
    std::iota(in.token_pos.begin(), in.token_pos.end(), 0);
    return encode_query_pretrain(in, cfg, params, dropout_rng);
  }
  const Tensor emb = embedding_lookup(params.at("phi.token_emb"),
                                      std::span<const int>(tokens.data(), tokens.size()));
  const Tensor proj = add_rowvec(matmul(emb, params.at("phi.proj.asr.w")),
                                 params.at("phi.proj.asr.b"));
  const Tensor pooled = netvlad_aggregate(proj, params.at("phi.vlad.assign.w"),
                                          params.at("phi.vlad.assign.b"),
                                          params.at("phi.vlad.centers"));
  return query_head(pooled, "phi.vlad.geu", "phi.vlad.whead", params);
}

Tensor gated_embedding_unit(const Tensor& x, const Tensor& w1, const Tensor& b1, const Tensor& w2,
                            const Tensor& b2) {
  const Tensor h = add_rowvec(matmul(x, w1), b1);
  const Tensor g = sigmoid(add_rowvec(matmul(h, w2), b2));
  const Tensor hg = mul(h, g);
  double sq = 0.0;
  for (std::int64_t i = 0; i < hg.size(); ++i) sq += hg.data()[i] * hg.data()[i];
  if (sq == 0.0) g_geu_degenerate.fetch_add(1, std::memory_order_relaxed);
  return l2_normalize(hg);
}

Tensor netvlad_aggregate(const Tensor& emb, const Tensor& assign_w, const Tensor& assign_b,
                         const Tensor& centers) {
  if (emb.rank() != 2 || emb.rows() < 1) throw ShapeError("netvlad: needs a nonempty [T,d] input");
  const int t = emb.rows();
  const int d = emb.cols();
  const int k = assign_w.cols();
  if (assign_w.rows() != d || centers.rows() != k || centers.cols() != d ||
      assign_b.cols() != k)
    throw ShapeError("netvlad: parameter shapes disagree with input");
  const Tensor assignments = softmax(add_rowvec(matmul(emb, assign_w), assign_b), 1);
  const Tensor ones = Tensor::full({t, 1}, 1.0);
  std::vector<Tensor> blocks;
  blocks.reserve(static_cast<size_t>(k));
  for (int c = 0; c < k; ++c) {
    const Tensor at = transpose(slice_cols(assignments, c, 1));  // [1, T]
    const Tensor weighted = matmul(at, emb);                     // sum_t a_tc x_t
    const Tensor mass = matmul(at, ones);                        // sum_t a_tc
    const Tensor shift = matmul(mass, slice_rows(centers, c, 1));
    blocks.push_back(l2_normalize(add(weighted, scale(shift, -1.0))));
  }
  return l2_normalize(concat(blocks, 1));
}

std::uint64_t geu_degenerate_count() { return g_geu_degenerate.load(std::memory_order_relaxed); }

void reset_geu_degenerate_count() { g_geu_degenerate.store(0, std::memory_order_relaxed); }

}  // namespace mmvr
