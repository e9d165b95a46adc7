// SPDX-License-Identifier: Apache-2.0
//
// Query-based Transformer decoder with iterative coarse-to-fine refinement.
//
//   A      = softmax_rows((P w_q)(Fm w_k)^T)                 affinity
//   P'     = P + A (Fm w_v)                                  query update
//   Z      = g(P F^T), g = sigmoid then threshold            coarse map
//   A_hat  = softmax_rows((P w_q)(Fm w_k)^T + down(Z))       mask-biased affinity
//
// refine() alternates the last three for T iterations, then emits Z_fine.
// Fm is the m-th decoder feature flattened to [DmHmWm x d]; F is the final
// full-resolution feature flattened to [DHW x d].
#pragma once

#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "transunet/layers.hpp"
#include "transunet/vit.hpp"
#include "transunet/volume.hpp"

namespace transunet {

struct QueryDecoderConfig {
  std::size_t num_queries = 20;
  std::size_t dim = 32;      // d: query width = projected feature width
  std::size_t key_dim = 32;  // d_q = d_k
  std::size_t num_classes = 3;
  std::size_t iterations = 2;  // T
  bool scale_attention = false;
  bool tie_projections = false;
  bool bias_from_probabilities = false;
  double bias_gain = 1.0;
  double threshold = 0.5;

  void validate() const {
    if (num_queries <= num_classes)
      throw ConfigError("query decoder: num_queries (" + std::to_string(num_queries) +
                        ") must exceed the class count (" + std::to_string(num_classes) + ")");
    if (dim == 0 || key_dim == 0) throw ConfigError("query decoder: widths must be positive");
    if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("query decoder: threshold must lie in (0, 1)");
  }

  std::size_t stage_count() const { return tie_projections ? std::min<std::size_t>(iterations, 1) : iterations; }
};

template <class T>
struct AttentionProjections {
  Tensor<T> w_q;  // [d x d_k]
  Tensor<T> w_k;  // [d x d_k]
  Tensor<T> w_v;  // [d x d]
};

template <class T>
struct CoarseMap {
  Tensor<T> logits;         // [N_q x DHW] P F^T
  Tensor<T> probabilities;  // sigmoid(logits), carries gradient
  Tensor<T> binary;         // threshold(probabilities), untracked
};

template <class T>
struct RefineResult {
  CoarseMap<T> fine;
  std::vector<CoarseMap<T>> trace;  // Z_coarse at t = 1..T
  std::vector<Tensor<T>> affinities;
  Tensor<T> queries;  // P^(T)
};

namespace qd_detail {
inline std::string stage(std::size_t t) { return "qdec.stage" + std::to_string(t); }
}  // namespace qd_detail

template <class T>
void init_query_decoder(const QueryDecoderConfig& cfg, Parameters<T>& p, std::mt19937_64& rng) {
  cfg.validate();
  p.add("qdec.queries", init::normal<T>(Shape{cfg.num_queries, cfg.dim}, 1.0, rng));
  for (std::size_t t = 0; t < cfg.stage_count(); ++t) {
    init_linear(p, qd_detail::stage(t) + ".q", cfg.dim, cfg.key_dim, false, rng);
    init_linear(p, qd_detail::stage(t) + ".k", cfg.dim, cfg.key_dim, false, rng);
    init_linear(p, qd_detail::stage(t) + ".v", cfg.dim, cfg.dim, false, rng, 0.1 / std::sqrt(double(cfg.dim)));
  }
  init_linear(p, "qdec.cls", cfg.dim, cfg.num_classes + 1, true, rng);
}

// Projections used at refinement iteration t (1-based).
template <class T>
AttentionProjections<T> stage_projections(const QueryDecoderConfig& cfg, const Parameters<T>& p, std::size_t t) {
  const std::size_t s = cfg.tie_projections ? 0 : t - 1;
  return {p[qd_detail::stage(s) + ".q.w"], p[qd_detail::stage(s) + ".k.w"], p[qd_detail::stage(s) + ".v.w"]};
}

template <class T>
Tensor<T> attention_logits(const Tensor<T>& queries, const Tensor<T>& features, const AttentionProjections<T>& proj,
                           bool scaled = false) {
  if (queries.rank() != 2 || features.rank() != 2 || queries.dim(1) != features.dim(1) ||
      proj.w_q.dim(0) != queries.dim(1) || proj.w_k.dim(0) != features.dim(1) || proj.w_q.dim(1) != proj.w_k.dim(1))
    throw DimensionError("attention: queries " + shape_str(queries.shape()) + ", features " +
                         shape_str(features.shape()) + ", w_q " + shape_str(proj.w_q.shape()) + ", w_k " +
                         shape_str(proj.w_k.shape()));
  auto logits = ops::matmul(ops::matmul(queries, proj.w_q), ops::transpose(ops::matmul(features, proj.w_k)));
  if (scaled) logits = ops::scale(logits, T(1) / std::sqrt(static_cast<T>(proj.w_k.dim(1))));
  return logits;
}

template <class T>
Tensor<T> coarse_attention(const Tensor<T>& queries, const Tensor<T>& features, const AttentionProjections<T>& proj,
                           bool scaled = false) {
  return ops::softmax_rows(attention_logits(queries, features, proj, scaled));
}

// `bias` is [N_q x DmHmWm], typically from downsample_mask.
template <class T>
Tensor<T> masked_attention(const Tensor<T>& queries, const Tensor<T>& features, const AttentionProjections<T>& proj,
                           const Tensor<T>& bias, bool scaled = false) {
  auto logits = attention_logits(queries, features, proj, scaled);
  if (bias.shape() != logits.shape())
    throw ContractError("masked_attention: bias " + shape_str(bias.shape()) + " does not match affinity " +
                        shape_str(logits.shape()));
  return ops::softmax_rows(ops::add(logits, bias));
}

// P_hat = P + A (Fm w_v)
template <class T>
Tensor<T> update_queries(const Tensor<T>& queries, const Tensor<T>& affinity, const Tensor<T>& features,
                         const Tensor<T>& w_v) {
  if (affinity.dim(0) != queries.dim(0) || affinity.dim(1) != features.dim(0))
    throw DimensionError("update_queries: affinity " + shape_str(affinity.shape()) + " vs queries " +
                         shape_str(queries.shape()) + " and features " + shape_str(features.shape()));
  return ops::add(queries, ops::matmul(affinity, ops::matmul(features, w_v)));
}

// Z = g(P F^T). Ties at the threshold map to 1.
template <class T>
CoarseMap<T> coarse_predict(const Tensor<T>& queries, const Tensor<T>& features, double threshold = 0.5) {
  if (queries.rank() != 2 || features.rank() != 2 || queries.dim(1) != features.dim(1))
    throw DimensionError("coarse_predict: queries " + shape_str(queries.shape()) + " vs features " +
                         shape_str(features.shape()));
  auto logits = ops::matmul(queries, ops::transpose(features));
  auto probs = ops::sigmoid(logits);
  return {logits, probs, ops::threshold(probs.detach(), static_cast<T>(threshold))};
}

// Block-average pooling of per-query maps [N_q x DHW] from `source` to
// `target` dims, scaled by `gain`: the additive logit bias for masked_attention.
template <class T>
Tensor<T> downsample_mask(const Tensor<T>& maps, const Dims& source, const Dims& target, double gain = 1.0) {
  if (maps.rank() != 2 || maps.dim(1) != source.voxels())
    throw DimensionError("downsample_mask: maps " + shape_str(maps.shape()) + " do not cover " + source.str());
  if (target.d == 0 || target.h == 0 || target.w == 0 || source.d % target.d || source.h % target.h ||
      source.w % target.w)
    throw DimensionError("downsample_mask: target " + target.str() + " does not divide " + source.str());
  const std::size_t n = maps.dim(0);
  auto pooled = ops::avg_pool3d(ops::reshape(maps, Shape{n, source.d, source.h, source.w}), target.d, target.h, target.w);
  auto flat = ops::reshape(pooled, Shape{n, target.voxels()});
  return gain == 1.0 ? flat : ops::scale(flat, static_cast<T>(gain));
}

// Iterative coarse-to-fine refinement:
//   for t = 1..T: Z <- g(P F^T); A <- masked affinity(P, Z); P <- P + A Fm w_v
//   Z_fine <- g(P F^T)
template <class T>
RefineResult<T> refine(const QueryDecoderConfig& cfg, const Parameters<T>& p, const Tensor<T>& queries,
                       const Tensor<T>& full_features, const Dims& full_dims, const Tensor<T>& level_features,
                       const Dims& level_dims, const AttentionObserver<T>* observer = nullptr) {
  if (full_features.dim(0) != full_dims.voxels() || level_features.dim(0) != level_dims.voxels())
    throw DimensionError("refine: feature rows do not match the stated dims");
  RefineResult<T> out;
  Tensor<T> P = queries;
  for (std::size_t t = 1; t <= cfg.iterations; ++t) {
    auto coarse = coarse_predict(P, full_features, cfg.threshold);
    const Tensor<T>& source = cfg.bias_from_probabilities ? coarse.probabilities : coarse.binary;
    auto bias = downsample_mask(source, full_dims, level_dims, cfg.bias_gain);
    if (bias.dim(1) != level_features.dim(0)) throw ContractError("refine: downsampled mask resolution mismatch");
    auto proj = stage_projections(cfg, p, t);
    auto affinity = masked_attention(P, level_features, proj, bias, cfg.scale_attention);
    if (observer && *observer) (*observer)("qdec.affinity" + std::to_string(t), affinity);
    P = update_queries(P, affinity, level_features, proj.w_v);
    out.trace.push_back(std::move(coarse));
    out.affinities.push_back(affinity);
  }
  out.fine = coarse_predict(P, full_features, cfg.threshold);
  out.queries = P;
  return out;
}

// [N_q x (K+1)] logits; the last column is the no-object class.
template <class T>
Tensor<T> classify_queries(const Parameters<T>& p, const Tensor<T>& queries) {
  return linear(p, "qdec.cls", queries);
}

// Per voxel: among queries whose binary mask covers it and whose argmax class
// is a real class, pick the highest class-prob x mask-prob; label = class + 1.
// Voxels covered by no such query are background.
template <class T>
LabelMap assemble_semantic(const CoarseMap<T>& fine, const Tensor<T>& class_logits, const Dims& dims,
                           const Spacing& spacing = {1.0, 1.0, 1.0}) {
  const std::size_t nq = class_logits.dim(0), nc = class_logits.dim(1);
  if (fine.probabilities.dim(0) != nq || fine.probabilities.dim(1) != dims.voxels())
    throw DimensionError("assemble_semantic: masks " + shape_str(fine.probabilities.shape()) + " vs " +
                         std::to_string(nq) + " queries over " + dims.str());
  std::vector<int> cls(nq, -1);
  std::vector<double> conf(nq, 0.0);
  for (std::size_t q = 0; q < nq; ++q) {
    double mx = -INFINITY, s = 0.0;
    std::size_t arg = 0;
    for (std::size_t c = 0; c < nc; ++c)
      if (double(class_logits[q * nc + c]) > mx) mx = class_logits[q * nc + (arg = c)];
    for (std::size_t c = 0; c < nc; ++c) s += std::exp(double(class_logits[q * nc + c]) - mx);
    if (arg + 1 < nc) {
      cls[q] = static_cast<int>(arg);
      conf[q] = 1.0 / s;
    }
  }
  LabelMap out(dims, spacing);
  const std::size_t n = dims.voxels();
  for (std::size_t v = 0; v < n; ++v) {
    double best = -1.0;
    for (std::size_t q = 0; q < nq; ++q) {
      if (cls[q] < 0 || fine.binary[q * n + v] < T(0.5)) continue;
      const double score = conf[q] * double(fine.probabilities[q * n + v]);
      if (score > best) {
        best = score;
        out.labels[v] = static_cast<std::uint8_t>(cls[q] + 1);
      }
    }
  }
  return out;
}

}  // namespace transunet
