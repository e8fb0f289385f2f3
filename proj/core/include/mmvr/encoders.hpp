#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mmvr/corpus.hpp"
#include "mmvr/rng.hpp"
#include "mmvr/tensor.hpp"

namespace mmvr {

// Video encoder Psi: one transformer over the multimodal token sequence
// [aggregated tokens | feature tokens], emitting one embedding per modality.
// Query encoder Phi: single-modality encoder used as the pre-training target
// path and, over caption tokens, as the fine-tuning text encoder.

enum class ModalityId : int { RGB = 0, AUDIO = 1, ASR = 2 };  // fixed layout order

inline constexpr std::array<ModalityId, 3> kModalities{ModalityId::RGB, ModalityId::AUDIO,
                                                       ModalityId::ASR};
inline constexpr int kNumModalities = 3;

const char* modality_name(ModalityId m);
ModalityId modality_from_name(const std::string& name);  // throws ConfigError

struct ModelConfig {
  int d_model = 32;
  int n_layers = 2;
  int n_heads = 2;
  int d_ff = 64;
  double dropout_p = 0.1;
  // expert feature dims; must match the corpus manifest
  int d_rgb = 64;
  int d_aud = 16;
  int d_asr = 32;
  int vocab_size = 256;
  // sequence caps per modality; text covers captions and the query-side asr window
  int cap_rgb = 30;
  int cap_audio = 30;
  int cap_asr = 128;
  int cap_text = 30;
  bool use_temporal_embeddings_psi = true;   // video side keeps temporal order
  bool use_temporal_embeddings_phi = false;  // query side drops it; diagnostic forces it on
  int netvlad_clusters = 4;
  double ln_eps = 1e-5;

  void validate() const;  // throws ConfigError
  int feature_dim(ModalityId m) const;
  int cap(ModalityId m) const;
};

// Named parameter registry. Iteration order is the map's lexicographic order,
// which keeps optimizer traversal and checkpoints deterministic.
struct ModelParams {
  std::map<std::string, Tensor> tensors;

  // token_codebook, when given, seeds phi.token_emb (vocab x d_asr) so token
  // embeddings start aligned with the corpus asr features
  static ModelParams init(const ModelConfig& cfg, Rng& rng,
                          const std::vector<double>* token_codebook = nullptr);

  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool has(const std::string& name) const { return tensors.count(name) != 0; }
  // Tensors share storage when copied; clone() detaches a training-safe copy.
  ModelParams clone() const;
  void zero_grad();
  void set_requires_grad_prefix(const std::string& prefix, bool value);
  std::int64_t parameter_count() const;
};

struct VideoRepr {
  // one [1, d_model] embedding per modality; exactly zero when masked/absent
  std::array<Tensor, 3> v;
};

struct QueryRepr {
  std::array<Tensor, 3> q;  // unit-norm [1, d_model] per modality
  Tensor weights;           // [1, 3] simplex over modalities
};

struct VideoInputs {
  std::array<SampledStream, 3> streams;  // indexed by ModalityId
  std::array<bool, 3> present{false, false, false};

  static VideoInputs all_of(const SampledClip& clip);
  static VideoInputs only(const SampledClip& clip, ModalityId m);
};

// dropout_rng == nullptr disables dropout (evaluation mode)
VideoRepr encode_video(const VideoInputs& in, const ModelConfig& cfg, const ModelParams& params,
                       Rng* dropout_rng = nullptr);

struct PretrainQueryInput {
  ModalityId supervising = ModalityId::RGB;
  SampledStream feats;         // rgb / audio paths
  std::vector<int> tokens;     // asr path: vocabulary ids
  std::vector<int> token_pos;  // asr path: crop-relative second per token
};

QueryRepr encode_query_pretrain(const PretrainQueryInput& in, const ModelConfig& cfg,
                                const ModelParams& params, Rng* dropout_rng = nullptr);

enum class CaptionAggregation { kPooled, kNetvlad };

QueryRepr encode_query_caption(std::span<const int> tokens, CaptionAggregation aggregation,
                               const ModelConfig& cfg, const ModelParams& params,
                               Rng* dropout_rng = nullptr);

// h = W1 x + b1; g = sigmoid(W2 h + b2); out = (h . g) / ||h . g||. A zero
// h . g returns the zero vector and bumps the degenerate counter.
Tensor gated_embedding_unit(const Tensor& x, const Tensor& w1, const Tensor& b1, const Tensor& w2,
                            const Tensor& b2);

// emb [T, d] -> [1, K d]: soft-assign residuals to K centers, intra-normalize
// each block, concatenate, L2-normalize.
Tensor netvlad_aggregate(const Tensor& emb, const Tensor& assign_w, const Tensor& assign_b,
                         const Tensor& centers);

std::uint64_t geu_degenerate_count();
void reset_geu_degenerate_count();

}  // namespace mmvr
