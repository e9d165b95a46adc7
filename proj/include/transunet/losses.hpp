// SPDX-License-Identifier: Apache-2.0
//
// Set-prediction losses: Hungarian matching between query masks and
// ground-truth segments, the combined mask/class objective
//
//   L = lambda0 (L_ce + L_dice) + lambda1 L_cls
//
// and deep supervision over decoder levels. The plain per-voxel head has its
// own softmax cross-entropy + soft Dice loss.
#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "transunet/hungarian.hpp"
#include "transunet/ops.hpp"
#include "transunet/volume.hpp"

namespace transunet {

struct LossConfig {
  double lambda_mask = 0.7;  // lambda0
  double lambda_cls = 0.3;   // lambda1
  double dice_smooth = 1.0;
  double no_object_weight = 0.1;

  void validate() const {
    if (!(lambda_mask >= 0.0) || !(lambda_cls >= 0.0)) throw ConfigError("loss weights must be non-negative");
    if (!(dice_smooth > 0.0)) throw ConfigError("dice smoothing must be positive");
    if (!(no_object_weight > 0.0)) throw ConfigError("no-object weight must be positive");
  }
};

constexpr double kProbClamp = 1e-7;

// One binary mask per foreground class present in a label map.
struct GroundTruthSegments {
  Dims dims;
  std::vector<std::vector<float>> masks;
  std::vector<std::size_t> classes;  // 0-based class index; label = class + 1

  std::size_t size() const { return masks.size(); }
};

inline GroundTruthSegments extract_segments(const LabelMap& labels, std::size_t num_classes) {
  GroundTruthSegments out;
  out.dims = labels.dims;
  for (std::size_t c = 0; c < num_classes; ++c) {
    std::vector<float> m(labels.labels.size(), 0.0f);
    bool any = false;
    for (std::size_t v = 0; v < m.size(); ++v)
      if (labels.labels[v] == c + 1) m[v] = 1.0f, any = true;
    if (any) {
      out.masks.push_back(std::move(m));
      out.classes.push_back(c);
    }
  }
  return out;
}

// Nearest-neighbour resampling of a label map (half-pixel centers).
inline LabelMap downsample_nearest(const LabelMap& labels, const Dims& target) {
  if (target == labels.dims) return labels;
  auto src = [](std::size_t i, std::size_t n_in, std::size_t n_out) {
    return std::min(n_in - 1, static_cast<std::size_t>((static_cast<double>(i) + 0.5) * n_in / n_out));
  };
  LabelMap out(target, labels.spacing);
  for (std::size_t z = 0; z < target.d; ++z)
    for (std::size_t y = 0; y < target.h; ++y)
      for (std::size_t x = 0; x < target.w; ++x)
        out.at(z, y, x) = labels.at(src(z, labels.dims.d, target.d), src(y, labels.dims.h, target.h),
                                    src(x, labels.dims.w, target.w));
  for (std::size_t a = 0; a < 3; ++a) {
    const std::size_t n_in = a == 0 ? labels.dims.d : a == 1 ? labels.dims.h : labels.dims.w;
    const std::size_t n_out = a == 0 ? target.d : a == 1 ? target.h : target.w;
    out.spacing[a] = labels.spacing[a] * static_cast<double>(n_in) / static_cast<double>(n_out);
  }
  return out;
}

namespace loss_detail {

template <class T>
Tensor<T> constant_row(const std::vector<float>& m) {
  return Tensor<T>(Shape{1, m.size()}, std::vector<T>(m.begin(), m.end()));
}

template <class T>
Tensor<T> one_minus(const Tensor<T>& x) {
  return ops::add_scalar(ops::scale(x, T(-1)), T(1));
}

}  // namespace loss_detail

// 1 - (2 sum(p g) + eps) / (sum p + sum g + eps)
template <class T>
Tensor<T> dice_loss(const Tensor<T>& prob, const Tensor<T>& gt, double smooth = 1.0) {
  if (prob.size() != gt.size())
    throw DimensionError("dice_loss: " + shape_str(prob.shape()) + " vs " + shape_str(gt.shape()));
  const auto g = gt.with_shape(prob.shape());
  const T e = static_cast<T>(smooth);
  auto inter = ops::add_scalar(ops::scale(ops::sum(ops::mul(prob, g)), T(2)), e);
  auto denom = ops::add_scalar(ops::sum(prob), static_cast<T>(ops::sum(g).item()) + e);
  return loss_detail::one_minus(ops::mul(inter, ops::reciprocal(denom)));
}

// Mean binary cross-entropy over voxels, probabilities clamped to [1e-7, 1-1e-7].
template <class T>
Tensor<T> bce_loss(const Tensor<T>& prob, const Tensor<T>& gt) {
  if (prob.size() != gt.size())
    throw DimensionError("bce_loss: " + shape_str(prob.shape()) + " vs " + shape_str(gt.shape()));
  const auto g = gt.with_shape(prob.shape());
  auto p = ops::clamp(prob, static_cast<T>(kProbClamp), static_cast<T>(1.0 - kProbClamp));
  auto pos = ops::mul(ops::log(p), g);
  auto neg = ops::mul(ops::log(loss_detail::one_minus(p)), loss_detail::one_minus(g));
  return ops::scale(ops::mean(ops::add(pos, neg)), T(-1));
}

// Weighted mean categorical cross-entropy: sum_q w_q CE_q / sum_q w_q.
template <class T>
Tensor<T> cls_loss(const Tensor<T>& logits, const std::vector<std::size_t>& targets,
                   const std::vector<double>& weights) {
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (targets.size() != n || weights.size() != n)
    throw DimensionError("cls_loss: " + std::to_string(targets.size()) + " targets for " + std::to_string(n) + " rows");
  auto idx = std::make_shared<std::vector<std::size_t>>(n);
  double wsum = 0.0;
  for (std::size_t q = 0; q < n; ++q) {
    if (targets[q] >= c) throw DimensionError("cls_loss: target class out of range");
    (*idx)[q] = q * c + targets[q];
    wsum += weights[q];
  }
  if (!(wsum > 0.0)) throw ContractError("cls_loss: weights sum to zero");
  auto picked = ops::gather(ops::log_softmax_rows(logits), std::shared_ptr<const std::vector<std::size_t>>(idx), Shape{n});
  std::vector<T> w(weights.begin(), weights.end());
  auto weighted = ops::mul(picked, Tensor<T>(Shape{n}, std::move(w)));
  return ops::scale(ops::sum(weighted), static_cast<T>(-1.0 / wsum));
}

// Cost of assigning query q to segment g, mirroring the training objective:
// lambda0 (bce + dice) + lambda1 (-log p_q(class_g)). Row-major [G x N_q].
template <class T>
std::vector<double> match_cost(const Tensor<T>& probs, const Tensor<T>& class_logits, const GroundTruthSegments& gts,
                               const LossConfig& cfg) {
  const std::size_t nq = probs.dim(0), nv = probs.dim(1), nc = class_logits.dim(1);
  if (class_logits.dim(0) != nq) throw DimensionError("match_cost: class logits do not match mask rows");
  if (gts.size() && gts.masks.front().size() != nv)
    throw DimensionError("match_cost: segments cover " + std::to_string(gts.masks.front().size()) +
                         " voxels, predictions " + std::to_string(nv));
  std::vector<double> logp(nq * nv), log1mp(nq * nv), psum(nq, 0.0);
  for (std::size_t i = 0; i < nq * nv; ++i) {
    const double p = std::clamp(static_cast<double>(probs[i]), kProbClamp, 1.0 - kProbClamp);
    logp[i] = std::log(p);
    log1mp[i] = std::log(1.0 - p);
    psum[i / nv] += static_cast<double>(probs[i]);
  }
  std::vector<double> cost(gts.size() * nq);
  for (std::size_t g = 0; g < gts.size(); ++g) {
    const auto& m = gts.masks[g];
    double gsum = 0.0;
    for (float v : m) gsum += v;
    for (std::size_t q = 0; q < nq; ++q) {
      double inter = 0.0, bce = 0.0;
      for (std::size_t v = 0; v < nv; ++v) {
        const double gv = m[v];
        inter += static_cast<double>(probs[q * nv + v]) * gv;
        bce -= gv * logp[q * nv + v] + (1.0 - gv) * log1mp[q * nv + v];
      }
      bce /= static_cast<double>(nv);
      const double dice = 1.0 - (2.0 * inter + cfg.dice_smooth) / (psum[q] + gsum + cfg.dice_smooth);
      double mx = -INFINITY, s = 0.0;
      for (std::size_t c = 0; c < nc; ++c) mx = std::max(mx, static_cast<double>(class_logits[q * nc + c]));
      for (std::size_t c = 0; c < nc; ++c) s += std::exp(static_cast<double>(class_logits[q * nc + c]) - mx);
      const double nll = -(static_cast<double>(class_logits[q * nc + gts.classes[g]]) - mx - std::log(s));
      cost[g * nq + q] = cfg.lambda_mask * (bce + dice) + cfg.lambda_cls * nll;
    }
  }
  return cost;
}

template <class T>
MatchAssignment match(const Tensor<T>& probs, const Tensor<T>& class_logits, const GroundTruthSegments& gts,
                      const LossConfig& cfg) {
  return hungarian(match_cost(probs, class_logits, gts, cfg), gts.size(), probs.dim(0));
}

template <class T>
struct LossBreakdown {
  Tensor<T> ce, dice, cls, total;
  double lambda0 = 1.0, lambda1 = 0.0;

  // total = lambda0 (ce + dice) + lambda1 cls
  void check_identity(double tol = 1e-6) const {
    const double expect = lambda0 * (double(ce.item()) + double(dice.item())) + lambda1 * double(cls.item());
    const double got = total.item();
    if (!(std::abs(expect - got) <= tol * std::max(1.0, std::abs(expect))))
      throw NumericError("loss breakdown identity violated: total " + std::to_string(got) + " vs " +
                         std::to_string(expect));
    for (double v : {double(ce.item()), double(dice.item()), double(cls.item())})
      if (!std::isfinite(v) || v < -tol) throw NumericError("loss component is negative or non-finite");
  }
};

// Mask terms are means over matched pairs; the class term covers every query,
// with unmatched queries targeting the no-object class (the last logit).
template <class T>
LossBreakdown<T> query_loss(const Tensor<T>& probs, const Tensor<T>& class_logits, const GroundTruthSegments& gts,
                            const MatchAssignment& assignment, const LossConfig& cfg) {
  const std::size_t nq = probs.dim(0), nc = class_logits.dim(1);
  if (assignment.segment_of_query.size() != nq || assignment.query_of_segment.size() != gts.size())
    throw ContractError("query_loss: assignment does not fit " + std::to_string(gts.size()) + " segments and " +
                        std::to_string(nq) + " queries");
  LossBreakdown<T> out;
  out.lambda0 = cfg.lambda_mask;
  out.lambda1 = cfg.lambda_cls;
  out.ce = Tensor<T>::scalar(T(0));
  out.dice = Tensor<T>::scalar(T(0));
  for (std::size_t g = 0; g < gts.size(); ++g) {
    auto row = ops::slice(probs, 0, assignment.query_of_segment[g], 1);
    auto target = loss_detail::constant_row<T>(gts.masks[g]);
    out.ce = ops::add(out.ce, bce_loss(row, target));
    out.dice = ops::add(out.dice, dice_loss(row, target, cfg.dice_smooth));
  }
  if (gts.size() > 0) {
    out.ce = ops::scale(out.ce, static_cast<T>(1.0 / gts.size()));
    out.dice = ops::scale(out.dice, static_cast<T>(1.0 / gts.size()));
  }
  std::vector<std::size_t> targets(nq, nc - 1);
  std::vector<double> weights(nq, cfg.no_object_weight);
  for (std::size_t g = 0; g < gts.size(); ++g) {
    targets[assignment.query_of_segment[g]] = gts.classes[g];
    weights[assignment.query_of_segment[g]] = 1.0;
  }
  out.cls = cls_loss(class_logits, targets, weights);
  out.total = ops::add(ops::scale(ops::add(out.ce, out.dice), static_cast<T>(cfg.lambda_mask)),
                       ops::scale(out.cls, static_cast<T>(cfg.lambda_cls)));
  return out;
}

// Matching plus loss on one resolution.
template <class T>
LossBreakdown<T> total_loss(const Tensor<T>& probs, const Tensor<T>& class_logits, const GroundTruthSegments& gts,
                            const LossConfig& cfg) {
  return query_loss(probs, class_logits, gts, match(probs, class_logits, gts, cfg), cfg);
}

// Level weights 1, 1/2, 1/4, ... normalized to sum to 1.
inline std::vector<double> deep_supervision_weights(std::size_t levels) {
  std::vector<double> w(levels);
  double s = 0.0;
  for (std::size_t l = 0; l < levels; ++l) s += (w[l] = std::ldexp(1.0, -static_cast<int>(l)));
  for (auto& v : w) v /= s;
  return w;
}

template <class T>
LossBreakdown<T> weighted_sum(const std::vector<LossBreakdown<T>>& parts, const std::vector<double>& weights) {
  if (parts.empty() || parts.size() != weights.size())
    throw DimensionError("deep supervision: " + std::to_string(parts.size()) + " levels, " +
                         std::to_string(weights.size()) + " weights");
  LossBreakdown<T> out;
  out.lambda0 = parts.front().lambda0;
  out.lambda1 = parts.front().lambda1;
  for (std::size_t l = 0; l < parts.size(); ++l) {
    const T w = static_cast<T>(weights[l]);
    auto acc = [&](Tensor<T>& dst, const Tensor<T>& src) {
      dst = l == 0 ? ops::scale(src, w) : ops::add(dst, ops::scale(src, w));
    };
    acc(out.ce, parts[l].ce);
    acc(out.dice, parts[l].dice);
    acc(out.cls, parts[l].cls);
    acc(out.total, parts[l].total);
  }
  return out;
}

// Softmax cross-entropy plus mean soft Dice over foreground classes for a
// [K+1 x D x H x W] logit map. Reported as ce/dice with lambda0 = 1, no cls.
template <class T>
LossBreakdown<T> plain_seg_loss(const Tensor<T>& logits, const LabelMap& gt, double smooth = 1.0) {
  const std::size_t nc = logits.dim(0), nv = logits.size() / nc;
  if (nv != gt.dims.voxels())
    throw DimensionError("plain_seg_loss: logits " + shape_str(logits.shape()) + " vs labels " + gt.dims.str());
  auto flat = ops::transpose(ops::reshape(logits, Shape{nc, nv}));  // [V x C]
  auto idx = std::make_shared<std::vector<std::size_t>>(nv);
  for (std::size_t v = 0; v < nv; ++v) {
    if (gt.labels[v] >= nc) throw InputError("plain_seg_loss: label exceeds class count");
    (*idx)[v] = v * nc + gt.labels[v];
  }
  LossBreakdown<T> out;
  out.ce = ops::scale(ops::mean(ops::gather(ops::log_softmax_rows(flat),
                                            std::shared_ptr<const std::vector<std::size_t>>(idx), Shape{nv})),
                      T(-1));
  auto probs = ops::transpose(ops::softmax_rows(flat));  // [C x V]
  for (std::size_t c = 1; c < nc; ++c) {
    std::vector<T> m(nv);
    for (std::size_t v = 0; v < nv; ++v) m[v] = gt.labels[v] == c ? T(1) : T(0);
    auto d = dice_loss(ops::slice(probs, 0, c, 1), Tensor<T>(Shape{1, nv}, std::move(m)), smooth);
    out.dice = c == 1 ? d : ops::add(out.dice, d);
  }
  if (nc > 2) out.dice = ops::scale(out.dice, static_cast<T>(1.0 / (nc - 1)));
  if (nc < 2) out.dice = Tensor<T>::scalar(T(0));
  out.cls = Tensor<T>::scalar(T(0));
  out.total = ops::add(out.ce, out.dice);
  return out;
}

}  // namespace transunet
