// SPDX-License-Identifier: Apache-2.0
//
// Segmentation metrics over spacing-aware 3D masks: volumetric Dice,
// lesion-wise Dice over connected components, and the 95th-percentile
// Hausdorff distance.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "transunet/errors.hpp"
#include "transunet/volume.hpp"

namespace transunet {

using Mask = std::vector<std::uint8_t>;  // 0 / nonzero per voxel

struct LesionSet {
  Dims dims;
  Spacing spacing{1.0, 1.0, 1.0};
  int connectivity = 26;
  std::vector<std::vector<std::size_t>> lesions;  // voxel indices, ascending
  std::vector<int> component;                      // per voxel: lesion index or -1

  std::size_t size() const { return lesions.size(); }
};

struct MetricConfig {
  int connectivity = 26;
  double empty_dice = 1.0;        // both masks empty
  double hd95_sentinel = 373.13;  // exactly one mask empty
  bool penalize_fp = false;       // count unmatched predicted lesions as score-0 entries

  void validate() const {
    if (connectivity != 6 && connectivity != 18 && connectivity != 26)
      throw ConfigError("connectivity must be 6, 18 or 26, got " + std::to_string(connectivity));
  }
};

namespace metric_detail {

struct Offset {
  int dz, dy, dx;
};

inline std::vector<Offset> neighbourhood(int connectivity) {
  std::vector<Offset> out;
  for (int dz = -1; dz <= 1; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const int n = std::abs(dz) + std::abs(dy) + std::abs(dx);
        if (n == 0) continue;
        if (connectivity == 6 && n > 1) continue;
        if (connectivity == 18 && n > 2) continue;
        out.push_back({dz, dy, dx});
      }
  return out;
}

inline void require_dims(const Mask& a, const Mask& b, const Dims& d, const char* what) {
  if (a.size() != d.voxels() || b.size() != d.voxels())
    throw InputError(std::string(what) + ": masks of " + std::to_string(a.size()) + " and " +
                     std::to_string(b.size()) + " voxels for dims " + d.str());
}

// 1D squared distance transform (lower envelope of parabolas) with sample
// positions i * step. f holds squared distances, +inf for "no site".
inline void edt_1d(std::vector<double>& f, double step, std::vector<double>& z, std::vector<std::size_t>& v,
                   std::vector<double>& out) {
  const std::size_t n = f.size();
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::size_t k = 0;
  bool any = false;
  for (std::size_t q = 0; q < n; ++q) {
    if (f[q] == inf) continue;
    const double pq = q * step;
    if (!any) {
      v[0] = q;
      z[0] = -inf;
      z[1] = inf;
      any = true;
      continue;
    }
    double s;
    while (true) {
      const double pv = v[k] * step;
      s = ((f[q] + pq * pq) - (f[v[k]] + pv * pv)) / (2.0 * (pq - pv));
      if (s <= z[k] && k > 0) {
        --k;
        continue;
      }
      break;
    }
    if (s <= z[k]) {  // k == 0: new parabola dominates everywhere
      v[0] = q;
      z[0] = -inf;
      z[1] = inf;
      continue;
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }
  if (!any) return;
  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    const double pq = q * step;
    while (z[k + 1] < pq) ++k;
    const double d = pq - v[k] * step;
    out[q] = d * d + f[v[k]];
  }
  for (std::size_t q = 0; q < n; ++q) f[q] = out[q];
}

}  // namespace metric_detail

inline Mask binary_of(const LabelMap& l, int label) {
  Mask m(l.labels.size());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = l.labels[i] == label;
  return m;
}

// Voxels whose label is in [lo, hi].
inline Mask binary_range(const LabelMap& l, int lo, int hi) {
  Mask m(l.labels.size());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = l.labels[i] >= lo && l.labels[i] <= hi;
  return m;
}

// Flood-fill labelling. Lesions are ordered by descending voxel count, ties by
// the smallest (lexicographically first) voxel.
inline LesionSet connected_components(const Mask& mask, const Dims& dims, int connectivity = 26,
                                      const Spacing& spacing = {1.0, 1.0, 1.0}) {
  if (connectivity != 6 && connectivity != 18 && connectivity != 26)
    throw ConfigError("connectivity must be 6, 18 or 26, got " + std::to_string(connectivity));
  if (mask.size() != dims.voxels()) throw InputError("connected_components: mask does not match " + dims.str());
  const auto nb = metric_detail::neighbourhood(connectivity);
  LesionSet out;
  out.dims = dims;
  out.spacing = spacing;
  out.connectivity = connectivity;
  std::vector<int> comp(mask.size(), -1);
  std::vector<std::vector<std::size_t>> found;
  std::vector<std::size_t> stack;
  for (std::size_t seed = 0; seed < mask.size(); ++seed) {
    if (!mask[seed] || comp[seed] >= 0) continue;
    const int id = static_cast<int>(found.size());
    std::vector<std::size_t> members;
    comp[seed] = id;
    stack.push_back(seed);
    while (!stack.empty()) {
      const std::size_t v = stack.back();
      stack.pop_back();
      members.push_back(v);
      const long z = static_cast<long>(v / (dims.h * dims.w)), y = static_cast<long>((v / dims.w) % dims.h),
                 x = static_cast<long>(v % dims.w);
      for (const auto& o : nb) {
        const long nz = z + o.dz, ny = y + o.dy, nx = x + o.dx;
        if (nz < 0 || ny < 0 || nx < 0 || nz >= long(dims.d) || ny >= long(dims.h) || nx >= long(dims.w)) continue;
        const std::size_t u = dims.index(nz, ny, nx);
        if (mask[u] && comp[u] < 0) {
          comp[u] = id;
          stack.push_back(u);
        }
      }
    }
    std::sort(members.begin(), members.end());
    found.push_back(std::move(members));
  }
  // Seeds are visited in index order, so a stable sort by size keeps the
  // smallest-seed tie rule.
  std::vector<std::size_t> order(found.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return found[a].size() > found[b].size(); });
  out.component.assign(mask.size(), -1);
  for (std::size_t r = 0; r < order.size(); ++r) {
    for (auto v : found[order[r]]) out.component[v] = static_cast<int>(r);
    out.lesions.push_back(std::move(found[order[r]]));
  }
  return out;
}

// 2|A n B| / (|A| + |B|); `empty_value` when both are empty.
inline double dice(const Mask& a, const Mask& b, double empty_value = 1.0) {
  if (a.size() != b.size())
    throw InputError("dice: masks of " + std::to_string(a.size()) + " and " + std::to_string(b.size()) + " voxels");
  std::size_t na = 0, nb = 0, both = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a[i] != 0, y = b[i] != 0;
    na += x;
    nb += y;
    both += x && y;
  }
  if (na + nb == 0) return empty_value;
  return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

struct LesionWiseResult {
  std::vector<double> scores;  // one per ground-truth lesion, in lesion order
  std::size_t false_positives = 0;
  std::optional<double> mean;  // empty when there is nothing to average ("no-lesion")
};

// For each ground-truth lesion B_i, A_i is the union of predicted components
// that intersect it; score = 2|A_i n B_i| / (|A_i| + |B_i|), 0 if A_i is
// empty. Predicted components touching no B_i are false positives; they
// enter the mean as zeros only when penalize_fp is set.
inline LesionWiseResult lesion_wise_dice(const Mask& pred, const Mask& gt, const Dims& dims, int connectivity = 26,
                                         bool penalize_fp = false) {
  metric_detail::require_dims(pred, gt, dims, "lesion_wise_dice");
  const auto gl = connected_components(gt, dims, connectivity);
  const auto pl = connected_components(pred, dims, connectivity);
  LesionWiseResult out;
  std::vector<char> pred_hit(pl.size(), 0);
  for (const auto& lesion : gl.lesions) {
    std::vector<int> touching;
    std::size_t inter = 0;
    for (auto v : lesion) {
      const int c = pl.component[v];
      if (c < 0) continue;
      ++inter;
      if (!pred_hit[c]) {
        pred_hit[c] = 1;
        touching.push_back(c);
      } else if (std::find(touching.begin(), touching.end(), c) == touching.end()) {
        touching.push_back(c);
      }
    }
    std::size_t a = 0;
    for (int c : touching) a += pl.lesions[c].size();
    out.scores.push_back(a == 0 ? 0.0 : 2.0 * inter / static_cast<double>(a + lesion.size()));
  }
  for (char h : pred_hit) out.false_positives += h == 0;
  std::size_t n = out.scores.size();
  double s = std::accumulate(out.scores.begin(), out.scores.end(), 0.0);
  if (penalize_fp) n += out.false_positives;
  if (n > 0) out.mean = s / static_cast<double>(n);
  return out;
}

// Foreground voxels with at least one 6-neighbour outside the mask (voxels
// outside the grid count as background).
inline std::vector<std::size_t> surface_voxels(const Mask& m, const Dims& d) {
  std::vector<std::size_t> out;
  for (std::size_t z = 0; z < d.d; ++z)
    for (std::size_t y = 0; y < d.h; ++y)
      for (std::size_t x = 0; x < d.w; ++x) {
        const std::size_t v = d.index(z, y, x);
        if (!m[v]) continue;
        const bool border = z == 0 || y == 0 || x == 0 || z + 1 == d.d || y + 1 == d.h || x + 1 == d.w;
        if (border || !m[v - d.h * d.w] || !m[v + d.h * d.w] || !m[v - d.w] || !m[v + d.w] || !m[v - 1] ||
            !m[v + 1])
          out.push_back(v);
      }
  return out;
}

// Exact spacing-weighted Euclidean distance (mm) from every voxel to the
// nearest nonzero voxel of `sites`; +inf everywhere if `sites` is empty.
inline std::vector<double> distance_to(const Mask& sites, const Dims& d, const Spacing& spacing) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> g(d.voxels());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = sites[i] ? 0.0 : inf;
  const std::size_t longest = std::max({d.d, d.h, d.w});
  std::vector<double> f(longest), z(longest + 1), out(longest);
  std::vector<std::size_t> v(longest);
  auto pass = [&](std::size_t n, std::size_t stride, std::size_t count, auto base_of, double step) {
    f.resize(n);
    out.resize(n);
    for (std::size_t line = 0; line < count; ++line) {
      const std::size_t b = base_of(line);
      for (std::size_t i = 0; i < n; ++i) f[i] = g[b + i * stride];
      metric_detail::edt_1d(f, step, z, v, out);
      for (std::size_t i = 0; i < n; ++i) g[b + i * stride] = f[i];
    }
  };
  pass(d.w, 1, d.d * d.h, [&](std::size_t l) { return l * d.w; }, spacing[2]);
  pass(d.h, d.w, d.d * d.w, [&](std::size_t l) { return (l / d.w) * d.h * d.w + l % d.w; }, spacing[1]);
  pass(d.d, d.h * d.w, d.h * d.w, [&](std::size_t l) { return l; }, spacing[0]);
  for (auto& x : g) x = std::sqrt(x);
  return g;
}

// Linear interpolation between order statistics at rank p/100 * (n-1).
inline double percentile(std::vector<double> values, double p) {
  if (values.empty()) throw InputError("percentile of an empty sample");
  std::sort(values.begin(), values.end());
  const double rank = p / 100.0 * static_cast<double>(values.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(rank));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (rank - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

// Distances from each surface voxel of `a` to the nearest voxel of `b`.
inline std::vector<double> directed_surface_distances(const Mask& a, const Mask& b, const Dims& d,
                                                      const Spacing& spacing) {
  const auto dist = distance_to(b, d, spacing);
  std::vector<double> out;
  for (auto v : surface_voxels(a, d)) out.push_back(dist[v]);
  return out;
}

// max(P95 d(surface a -> b), P95 d(surface b -> a)) in mm.
inline double hd95(const Mask& a, const Mask& b, const Dims& d, const Spacing& spacing = {1.0, 1.0, 1.0},
                   double sentinel = 373.13) {
  metric_detail::require_dims(a, b, d, "hd95");
  const bool ea = std::none_of(a.begin(), a.end(), [](auto x) { return x != 0; });
  const bool eb = std::none_of(b.begin(), b.end(), [](auto x) { return x != 0; });
  if (ea && eb) return 0.0;
  if (ea || eb) return sentinel;
  return std::max(percentile(directed_surface_distances(a, b, d, spacing), 95.0),
                  percentile(directed_surface_distances(b, a, d, spacing), 95.0));
}

// Nested evaluation regions: region r (1-based) covers labels 1..r.
inline Mask region_mask(const LabelMap& l, std::size_t region) { return binary_range(l, 1, static_cast<int>(region)); }

struct RegionMetrics {
  std::size_t region = 0;
  std::optional<double> lesion_dice;
  std::vector<double> lesion_scores;
  std::size_t false_positives = 0;
  double dice = 0.0;
  double hd95 = 0.0;
};

struct CaseMetrics {
  std::string name;
  std::string error;  // empty when evaluated
  std::vector<RegionMetrics> regions;
  std::vector<double> class_dice;  // per label 1..K

  bool ok() const { return error.empty(); }
};

inline CaseMetrics evaluate_case(const std::string& name, const LabelMap& pred, const LabelMap& gt,
                                 std::size_t num_classes, const MetricConfig& cfg = {}) {
  cfg.validate();
  CaseMetrics out;
  out.name = name;
  if (pred.dims != gt.dims) {
    out.error = "geometry mismatch: prediction " + pred.dims.str() + " vs ground truth " + gt.dims.str();
    return out;
  }
  for (std::size_t r = 1; r <= num_classes; ++r) {
    const auto pm = region_mask(pred, r), gm = region_mask(gt, r);
    RegionMetrics m;
    m.region = r;
    auto lw = lesion_wise_dice(pm, gm, gt.dims, cfg.connectivity, cfg.penalize_fp);
    m.lesion_dice = lw.mean;
    m.lesion_scores = std::move(lw.scores);
    m.false_positives = lw.false_positives;
    m.dice = dice(pm, gm, cfg.empty_dice);
    m.hd95 = hd95(pm, gm, gt.dims, gt.spacing, cfg.hd95_sentinel);
    out.regions.push_back(std::move(m));
  }
  for (std::size_t c = 1; c <= num_classes; ++c)
    out.class_dice.push_back(dice(binary_of(pred, int(c)), binary_of(gt, int(c)), cfg.empty_dice));
  return out;
}

struct RegionSummary {
  std::size_t region = 0;
  std::optional<double> lesion_dice;  // mean over cases with lesions
  std::size_t lesion_cases = 0;
  double dice = 0.0;
  double hd95 = 0.0;
};

struct CohortReport {
  std::vector<CaseMetrics> cases;
  std::vector<RegionSummary> regions;
  std::vector<double> class_dice;
  std::size_t evaluated = 0;
  std::size_t errors = 0;
};

// Arithmetic means over successfully evaluated cases; "no-lesion" cases are
// excluded from the lesion-wise mean.
inline CohortReport summarize(std::vector<CaseMetrics> cases, std::size_t num_classes) {
  CohortReport rep;
  rep.regions.resize(num_classes);
  rep.class_dice.assign(num_classes, 0.0);
  std::vector<double> lsum(num_classes, 0.0);
  for (const auto& c : cases) {
    if (!c.ok()) {
      ++rep.errors;
      continue;
    }
    ++rep.evaluated;
    for (std::size_t r = 0; r < num_classes; ++r) {
      const auto& m = c.regions[r];
      rep.regions[r].dice += m.dice;
      rep.regions[r].hd95 += m.hd95;
      if (m.lesion_dice) {
        lsum[r] += *m.lesion_dice;
        ++rep.regions[r].lesion_cases;
      }
      rep.class_dice[r] += c.class_dice[r];
    }
  }
  for (std::size_t r = 0; r < num_classes; ++r) {
    auto& s = rep.regions[r];
    s.region = r + 1;
    if (rep.evaluated) {
      s.dice /= rep.evaluated;
      s.hd95 /= rep.evaluated;
      rep.class_dice[r] /= rep.evaluated;
    }
    if (s.lesion_cases) s.lesion_dice = lsum[r] / s.lesion_cases;
  }
  rep.cases = std::move(cases);
  return rep;
}

}  // namespace transunet
