#include "mmvr/objective.hpp"

#include <cmath>
#include <memory>

#include "mmvr/errors.hpp"

namespace mmvr {

namespace {

bool any_nonzero(const Tensor& t) {
  for (std::int64_t i = 0; i < t.size(); ++i)
    if (t.data()[i] != 0.0) return true;
  return false;
}

void check_repr_shapes(const std::vector<QueryRepr>& queries,
                       const std::vector<VideoRepr>& videos, int d) {
  for (const QueryRepr& q : queries) {
    for (const Tensor& qm : q.q)
      if (qm.rank() != 2 || qm.rows() != 1 || qm.cols() != d)
        throw ShapeError("similarity_matrix: query embedding is not [1," + std::to_string(d) + "]");
    if (q.weights.rank() != 2 || q.weights.rows() != 1 || q.weights.cols() != kNumModalities)
      throw ShapeError("similarity_matrix: mixture weights are not [1,3]");
  }
  for (const VideoRepr& v : videos)
    for (const Tensor& vm : v.v)
      if (vm.rank() != 2 || vm.rows() != 1 || vm.cols() != d)
        throw ShapeError("similarity_matrix: video embedding is not [1," + std::to_string(d) + "]");
}

}  // namespace

Tensor similarity_matrix(const std::vector<QueryRepr>& queries,
                         const std::vector<VideoRepr>& videos) {
  if (queries.empty() || videos.empty())
    throw ShapeError("similarity_matrix: empty query or video list");
  const int nq = static_cast<int>(queries.size());
  const int nv = static_cast<int>(videos.size());
  const int d = queries[0].q[0].cols();
  check_repr_shapes(queries, videos, d);

  auto present = std::make_shared<std::vector<std::uint8_t>>(static_cast<size_t>(nv) * 3, 0);
  for (int j = 0; j < nv; ++j) {
    bool any = false;
    for (int m = 0; m < 3; ++m) {
      const bool p = any_nonzero(videos[static_cast<size_t>(j)].v[static_cast<size_t>(m)]);
      (*present)[static_cast<size_t>(j) * 3 + m] = p ? 1 : 0;
      any = any || p;
    }
    if (!any)
      throw DataError("similarity_matrix: video " + std::to_string(j) + " has no modalities");
  }

  auto node = std::make_shared<detail::TensorNode>();
  node->shape = {nq, nv};
  node->data.assign(static_cast<size_t>(nq) * nv, 0.0);
  node->op = "similarity_matrix";

  // coefficients cached for the backward pass:
  //   a_ijm = w_im M_jm / Z_ij,  d_ijm = q_im . v_jm,  Z_ij = sum_m w_im M_jm
  auto a = std::make_shared<std::vector<double>>(static_cast<size_t>(nq) * nv * 3, 0.0);
  auto dots = std::make_shared<std::vector<double>>(static_cast<size_t>(nq) * nv * 3, 0.0);
  auto z = std::make_shared<std::vector<double>>(static_cast<size_t>(nq) * nv, 0.0);

  for (int i = 0; i < nq; ++i) {
    const QueryRepr& q = queries[static_cast<size_t>(i)];
    const double* w = q.weights.data();
    for (int j = 0; j < nv; ++j) {
      const VideoRepr& v = videos[static_cast<size_t>(j)];
      double zij = 0.0;
      for (int m = 0; m < 3; ++m)
        if ((*present)[static_cast<size_t>(j) * 3 + m]) zij += w[m];
      if (zij <= 0.0)
        throw DataError("similarity_matrix: query " + std::to_string(i) +
                        " has zero weight on every modality of video " + std::to_string(j));
      (*z)[static_cast<size_t>(i) * nv + j] = zij;
      double s = 0.0;
      for (int m = 0; m < 3; ++m) {
        const size_t idx = (static_cast<size_t>(i) * nv + j) * 3 + m;
        if (!(*present)[static_cast<size_t>(j) * 3 + m]) continue;
        const double* qm = q.q[static_cast<size_t>(m)].data();
        const double* vm = v.v[static_cast<size_t>(m)].data();
        double dot = 0.0;
        for (int t = 0; t < d; ++t) dot += qm[t] * vm[t];
        (*dots)[idx] = dot;
        (*a)[idx] = w[m] / zij;
        s += (*a)[idx] * dot;
      }
      node->data[static_cast<size_t>(i) * nv + j] = s;
    }
  }

  bool want = grad_enabled();
  if (want) {
    bool any_grad = false;
    for (const QueryRepr& q : queries) {
      for (const Tensor& qm : q.q) any_grad = any_grad || qm.requires_grad();
      any_grad = any_grad || q.weights.requires_grad();
    }
    for (const VideoRepr& v : videos)
      for (const Tensor& vm : v.v) any_grad = any_grad || vm.requires_grad();
    want = any_grad;
  }
  if (want) {
    node->requires_grad = true;
    // parent layout: q_im blocks (i major), then weights_i, then v_jm blocks
    for (const QueryRepr& q : queries)
      for (const Tensor& qm : q.q) node->parents.push_back(qm.node());
    for (const QueryRepr& q : queries) node->parents.push_back(q.weights.node());
    for (const VideoRepr& v : videos)
      for (const Tensor& vm : v.v) node->parents.push_back(vm.node());

    node->backward = [nq, nv, d, a, dots, z, present](detail::TensorNode& self) {
      auto q_node = [&](int i, int m) { return self.parents[static_cast<size_t>(i) * 3 + m].get(); };
      auto w_node = [&](int i) { return self.parents[static_cast<size_t>(nq) * 3 + i].get(); };
      auto v_node = [&](int j, int m) {
        return self.parents[static_cast<size_t>(nq) * 4 + static_cast<size_t>(j) * 3 + m].get();
      };
      for (int i = 0; i < nq; ++i) {
        for (int j = 0; j < nv; ++j) {
          const double g = self.grad[static_cast<size_t>(i) * nv + j];
          if (g == 0.0) continue;
          const double s = self.data[static_cast<size_t>(i) * nv + j];
          const double zij = (*z)[static_cast<size_t>(i) * nv + j];
          for (int m = 0; m < 3; ++m) {
            if (!(*present)[static_cast<size_t>(j) * 3 + m]) continue;
            const size_t idx = (static_cast<size_t>(i) * nv + j) * 3 + m;
            const double aijm = (*a)[idx];
            detail::TensorNode* qn = q_node(i, m);
            detail::TensorNode* vn = v_node(j, m);
            if (qn->requires_grad) {
              qn->ensure_grad();
              const double* vm = vn->data.data();
              for (int t = 0; t < d; ++t) qn->grad[static_cast<size_t>(t)] += g * aijm * vm[t];
            }
            if (vn->requires_grad) {
              vn->ensure_grad();
              const double* qm = qn->data.data();
              for (int t = 0; t < d; ++t) vn->grad[static_cast<size_t>(t)] += g * aijm * qm[t];
            }
            detail::TensorNode* wn = w_node(i);
            if (wn->requires_grad) {
              wn->ensure_grad();
              wn->grad[static_cast<size_t>(m)] += g * ((*dots)[idx] - s) / zij;
            }
          }
        }
      }
    };
  }
  return Tensor(node);
}

double similarity(const QueryRepr& q, const VideoRepr& v) {
  NoGradGuard no_grad;
  return similarity_matrix({q}, {v}).at(0, 0);
}

Tensor bidirectional_max_margin_loss(const Tensor& s, double margin) {
  if (margin < 0.0) throw ConfigError("loss: margin must be >= 0");
  if (s.rank() != 2 || s.rows() != s.cols())
    throw ShapeError("loss: similarity matrix must be square, got " +
                     detail::shape_str(s.shape()));
  const int b = s.rows();
  if (b < 2) throw ShapeError("loss: batch must have at least 2 items");
  for (std::int64_t i = 0; i < s.size(); ++i)
    if (!std::isfinite(s.data()[i])) throw TrainError("loss: non-finite similarity score");

  double acc = 0.0;
  for (int i = 0; i < b; ++i) {
    const double sii = s.at(i, i);
    for (int j = 0; j < b; ++j) {
      if (j == i) continue;
      acc += std::max(0.0, s.at(i, j) - sii + margin);
      acc += std::max(0.0, s.at(j, i) - sii + margin);
    }
  }
  const double inv_b = 1.0 / static_cast<double>(b);

  auto node = std::make_shared<detail::TensorNode>();
  node->shape = {1};
  node->data = {acc * inv_b};
  node->op = "bidirectional_max_margin_loss";
  if (grad_enabled() && s.requires_grad()) {
    node->requires_grad = true;
    node->parents = {s.node()};
    node->backward = [b, margin, inv_b](detail::TensorNode& self) {
      detail::TensorNode& p = *self.parents[0];
      if (!p.requires_grad) return;
      p.ensure_grad();
      const double g = self.grad[0] * inv_b;
      for (int i = 0; i < b; ++i) {
        const double sii = p.data[static_cast<size_t>(i) * b + i];
        for (int j = 0; j < b; ++j) {
          if (j == i) continue;
          // subgradient 0 exactly at the hinge point
          if (p.data[static_cast<size_t>(i) * b + j] - sii + margin > 0.0) {
            p.grad[static_cast<size_t>(i) * b + j] += g;
            p.grad[static_cast<size_t>(i) * b + i] -= g;
          }
          if (p.data[static_cast<size_t>(j) * b + i] - sii + margin > 0.0) {
            p.grad[static_cast<size_t>(j) * b + i] += g;
            p.grad[static_cast<size_t>(i) * b + i] -= g;
          }
        }
      }
    };
  }
  return Tensor(node);
}

}  // namespace mmvr
