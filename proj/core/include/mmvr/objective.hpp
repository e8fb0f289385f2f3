#pragma once

#include <vector>

#include "mmvr/encoders.hpp"
#include "mmvr/tensor.hpp"

namespace mmvr {

// Scoring and the bi-directional max-margin ranking loss.
//
// s_ij = sum_m w~_im (q_im . v_jm), where w~ renormalizes query i's mixture
// weights over the modalities whose video-side vector is nonzero. One fused
// graph node with a hand-derived backward keeps the batch-quadratic scoring
// off the elementwise tape.

// [Nq, Nv] score matrix; differentiable w.r.t. every q_m, v_m and weights.
// A video whose three vectors are all zero is an error.
Tensor similarity_matrix(const std::vector<QueryRepr>& queries,
                         const std::vector<VideoRepr>& videos);

// Scalar convenience for evaluation paths; no graph is built.
double similarity(const QueryRepr& q, const VideoRepr& v);

// L = (1/B) sum_i sum_{j != i} [max(0, s_ij - s_ii + m) + max(0, s_ji - s_ii + m)]
// Hinge subgradient at exactly zero is zero.
Tensor bidirectional_max_margin_loss(const Tensor& s, double margin);

}  // namespace mmvr
