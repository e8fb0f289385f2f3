#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>

#include "mmvr/corpus.hpp"
#include "mmvr/encoders.hpp"
#include "mmvr/tensor.hpp"

namespace mmvr {

struct RetrievalMetrics {
  std::map<int, double> r_at;  // N -> fraction of queries with rank <= N
  double mdr = 0.0;            // median rank, midpoint average for even counts
  double mnr = 0.0;            // mean rank
  int n_queries = 0;
  int n_candidates = 0;

  double r(int n) const;  // throws Error if N was not computed
};

inline constexpr int kRecallCutoffs[] = {1, 5, 10, 50};

// rank = 1 + #{j : row[j] > row[truth]} + #{j != truth : row[j] == row[truth]}
// Ties count against the truth so reported numbers are conservative.
int rank_of_truth(std::span<const double> row, int truth);

// Ground truth is the diagonal: query i pairs with candidate i.
RetrievalMetrics compute_metrics(const Tensor& s);

// (R@1 * R@5 * R@10)^(1/3); zero whenever any factor is zero
double geometric_mean_selection(const RetrievalMetrics& m);

struct EvalOptions {
  int crop_s = 8;
  SampleCaps caps;
  CaptionAggregation aggregation = CaptionAggregation::kPooled;
  // when set, the video encoder sees only this modality (zero slots elsewhere)
  std::optional<ModalityId> restrict_modality;
};

// caption-to-video scores over a clip set: row i = query of ids[i], column
// j = video of ids[j]; deterministic (eval sampling, no dropout)
Tensor retrieval_scores(const FeatureStore& store, std::span<const std::int64_t> ids,
                        const ModelConfig& cfg, const ModelParams& params, const EvalOptions& opt);

RetrievalMetrics evaluate_retrieval(const FeatureStore& store, std::span<const std::int64_t> ids,
                                    const ModelConfig& cfg, const ModelParams& params,
                                    const EvalOptions& opt);

RetrievalMetrics single_modality_eval(const FeatureStore& store, std::span<const std::int64_t> ids,
                                      const ModelConfig& cfg, const ModelParams& params,
                                      ModalityId modality, EvalOptions opt);

}  // namespace mmvr
