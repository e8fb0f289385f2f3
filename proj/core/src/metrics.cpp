#include "mmvr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "mmvr/errors.hpp"
#include "mmvr/objective.hpp"

namespace mmvr {

double RetrievalMetrics::r(int n) const {
  auto it = r_at.find(n);
  if (it == r_at.end()) throw Error("R@" + std::to_string(n) + " was not computed");
  return it->second;
}

int rank_of_truth(std::span<const double> row, int truth) {
  if (truth < 0 || static_cast<size_t>(truth) >= row.size())
    throw ShapeError("rank_of_truth: truth index out of range");
  const double s_true = row[static_cast<size_t>(truth)];
  int rank = 1;
  for (size_t j = 0; j < row.size(); ++j) {
    if (static_cast<int>(j) == truth) continue;
    if (row[j] >= s_true) ++rank;
  }
  return rank;
}

RetrievalMetrics compute_metrics(const Tensor& s) {
  if (!s.defined() || s.size() == 0) throw ShapeError("compute_metrics: empty matrix");
  if (s.rank() != 2 || s.rows() != s.cols())
    throw ShapeError("compute_metrics: diagonal ground truth needs a square matrix, got " +
                     detail::shape_str(s.shape()));
  const int n = s.rows();
  std::vector<int> ranks(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i)
    ranks[static_cast<size_t>(i)] =
        rank_of_truth(std::span<const double>(s.data() + static_cast<size_t>(i) * n,
                                              static_cast<size_t>(n)),
                      i);

  RetrievalMetrics m;
  m.n_queries = n;
  m.n_candidates = n;
  for (int cutoff : kRecallCutoffs) {
    int hits = 0;
    for (int r : ranks) hits += r <= cutoff ? 1 : 0;
    m.r_at[cutoff] = static_cast<double>(hits) / n;
  }
  std::vector<int> sorted = ranks;
  std::sort(sorted.begin(), sorted.end());
  m.mdr = n % 2 == 1 ? sorted[static_cast<size_t>(n / 2)]
                     : (sorted[static_cast<size_t>(n / 2 - 1)] + sorted[static_cast<size_t>(n / 2)]) / 2.0;
  double sum = 0.0;
  for (int r : ranks) sum += r;
  m.mnr = sum / n;
  return m;
}

double geometric_mean_selection(const RetrievalMetrics& m) {
  return std::cbrt(m.r(1) * m.r(5) * m.r(10));
}

Tensor retrieval_scores(const FeatureStore& store, std::span<const std::int64_t> ids,
                        const ModelConfig& cfg, const ModelParams& params, const EvalOptions& opt) {
  if (ids.empty()) throw ShapeError("retrieval_scores: empty id list");
  NoGradGuard no_grad;
  std::vector<QueryRepr> queries;
  std::vector<VideoRepr> videos;
  queries.reserve(ids.size());
  videos.reserve(ids.size());
  for (std::int64_t id : ids) {
    const SampledClip clip = sample_eval_clip(store, id, opt.crop_s, opt.caps);
    const VideoInputs inputs = opt.restrict_modality
                                   ? VideoInputs::only(clip, *opt.restrict_modality)
                                   : VideoInputs::all_of(clip);
    videos.push_back(encode_video(inputs, cfg, params));
    queries.push_back(encode_query_caption(clip.caption_tokens, opt.aggregation, cfg, params));
  }
  return similarity_matrix(queries, videos);
}

RetrievalMetrics evaluate_retrieval(const FeatureStore& store, std::span<const std::int64_t> ids,
                                    const ModelConfig& cfg, const ModelParams& params,
                                    const EvalOptions& opt) {
  return compute_metrics(retrieval_scores(store, ids, cfg, params, opt));
}

RetrievalMetrics single_modality_eval(const FeatureStore& store,
                                      std::span<const std::int64_t> ids, const ModelConfig& cfg,
                                      const ModelParams& params, ModalityId modality,
                                      EvalOptions opt) {
  opt.restrict_modality = modality;
  return evaluate_retrieval(store, ids, cfg, params, opt);
}

}  // namespace mmvr
