// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference checks for every differentiable primitive and for the
// composed blocks (encoder layer, query decoder through the probability
// branch, set loss with frozen matching, U-Net path, plain head loss).
#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "transunet/grad_check.hpp"
#include "transunet/losses.hpp"
#include "transunet/query_decoder.hpp"
#include "transunet/unet.hpp"
#include "transunet/vit.hpp"

namespace transunet {

// A scalar function usable in both precisions.
struct DualFn {
  std::function<Tensor<double>(const std::vector<Tensor<double>>&)> f64;
  std::function<Tensor<float>(const std::vector<Tensor<float>>&)> f32;

  Tensor<double> operator()(const std::vector<Tensor<double>>& x) const { return f64(x); }
  Tensor<float> operator()(const std::vector<Tensor<float>>& x) const { return f32(x); }
};

template <class G>
DualFn dual(G g) {
  return {[g](const std::vector<Tensor<double>>& x) { return g(x); },
          [g](const std::vector<Tensor<float>>& x) { return g(x); }};
}

struct GradCase {
  std::string name;
  bool composite = false;
  std::function<std::vector<Tensor<double>>(std::uint64_t seed)> inputs;
  // Built per seed: composites may freeze seed-dependent data (e.g. matching).
  std::function<DualFn(std::uint64_t seed)> fn;
};

struct GradRow {
  std::string name;
  bool composite = false;
  double err64 = 0.0;
  double err32 = -1.0;  // -1: not run (composites are checked in 64-bit)
  double tol64 = 0.0, tol32 = 0.0;
  std::size_t seeds = 0;

  bool passed() const { return err64 < tol64 && (err32 < 0.0 || err32 < tol32); }
};

namespace gc_detail {

inline Tensor<double> uniform(Shape s, double lo, double hi, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(numel(s));
  for (auto& x : v) x = u(rng);
  return Tensor<double>(std::move(s), std::move(v));
}

// Values in [lo, hi] kept at least `gap` away from each point in `avoid`.
inline Tensor<double> uniform_avoiding(Shape s, double lo, double hi, std::vector<double> avoid, double gap,
                                       std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(numel(s));
  for (auto& x : v) {
    bool ok;
    do {
      x = u(rng);
      ok = true;
      for (double a : avoid) ok = ok && std::abs(x - a) > gap;
    } while (!ok);
  }
  return Tensor<double>(std::move(s), std::move(v));
}

inline std::mt19937_64 rng_for(std::uint64_t seed, const std::string& name) {
  std::seed_seq seq(name.begin(), name.end());
  std::vector<std::uint32_t> k(2);
  seq.generate(k.begin(), k.end());
  return std::mt19937_64(seed * 0x9e3779b97f4a7c15ull ^ (std::uint64_t(k[0]) << 32 | k[1]));
}

// Contract an arbitrary output with fixed pseudo-random weights so that every
// output element contributes a distinct gradient.
template <class T>
Tensor<T> project(const Tensor<T>& y) {
  std::vector<T> w(y.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<T>(std::sin(0.7 * static_cast<double>(i) + 0.3));
  return ops::sum(ops::mul(y, Tensor<T>(y.shape(), std::move(w))));
}

template <class T>
Parameters<T> bind_params(const std::vector<std::string>& names, const std::vector<Tensor<T>>& x, std::size_t first = 0) {
  Parameters<T> p;
  for (std::size_t i = 0; i < names.size(); ++i) p.add(names[i], x[first + i]);
  return p;
}

// Flattens a parameter set into (names, tensors).
inline std::pair<std::vector<std::string>, std::vector<Tensor<double>>> unbind(const Parameters<double>& p) {
  std::pair<std::vector<std::string>, std::vector<Tensor<double>>> out;
  for (const auto& [n, t] : p.map()) {
    out.first.push_back(n);
    out.second.push_back(t);
  }
  return out;
}

}  // namespace gc_detail

inline std::vector<GradCase> gradient_cases() {
  using namespace gc_detail;
  std::vector<GradCase> cases;
  auto prim = [&](std::string name, std::function<std::vector<Tensor<double>>(std::mt19937_64&)> gen, DualFn f) {
    const std::string key = name;
    cases.push_back({std::move(name), false, [gen, key](std::uint64_t s) {
                       auto rng = rng_for(s, key);
                       return gen(rng);
                     },
                     [f](std::uint64_t) { return f; }});
  };
  auto u = [](Shape s, double lo = -1.0, double hi = 1.0) {
    return [s, lo, hi](std::mt19937_64& r) { return std::vector<Tensor<double>>{uniform(s, lo, hi, r)}; };
  };
  auto u2 = [](Shape a, Shape b) {
    return [a, b](std::mt19937_64& r) {
      return std::vector<Tensor<double>>{uniform(a, -1, 1, r), uniform(b, -1, 1, r)};
    };
  };

  prim("add", u2({3, 4}, {3, 4}), dual([](const auto& x) { return project(ops::add(x[0], x[1])); }));
  prim("sub", u2({3, 4}, {3, 4}), dual([](const auto& x) { return project(ops::sub(x[0], x[1])); }));
  prim("mul", u2({3, 4}, {3, 4}), dual([](const auto& x) { return project(ops::mul(x[0], x[1])); }));
  prim("scale", u({3, 4}), dual([](const auto& x) {
         using T = typename std::decay_t<decltype(x[0])>::value_type;
         return project(ops::scale(x[0], T(-1.7)));
       }));
  prim("add_scalar", u({3, 4}), dual([](const auto& x) {
         using T = typename std::decay_t<decltype(x[0])>::value_type;
         return project(ops::add_scalar(x[0], T(0.4)));
       }));
  prim("sigmoid", u({3, 4}, -3, 3), dual([](const auto& x) { return project(ops::sigmoid(x[0])); }));
  prim("relu",
       [](std::mt19937_64& r) { return std::vector<Tensor<double>>{uniform_avoiding({3, 4}, -1, 1, {0.0}, 0.05, r)}; },
       dual([](const auto& x) { return project(ops::relu(x[0])); }));
  prim("gelu", u({3, 4}, -3, 3), dual([](const auto& x) { return project(ops::gelu(x[0])); }));
  prim("log", u({3, 4}, 0.2, 2.0), dual([](const auto& x) { return project(ops::log(x[0])); }));
  prim("exp", u({3, 4}, -1.5, 1.5), dual([](const auto& x) { return project(ops::exp(x[0])); }));
  prim("reciprocal", u({3, 4}, 0.5, 2.0), dual([](const auto& x) { return project(ops::reciprocal(x[0])); }));
  prim("square", u({3, 4}), dual([](const auto& x) { return project(ops::square(x[0])); }));
  prim("clamp",
       [](std::mt19937_64& r) {
         return std::vector<Tensor<double>>{uniform_avoiding({3, 4}, -1, 1, {-0.5, 0.5}, 0.05, r)};
       },
       dual([](const auto& x) {
         using T = typename std::decay_t<decltype(x[0])>::value_type;
         return project(ops::clamp(x[0], T(-0.5), T(0.5)));
       }));
  prim("sum", u({5}), dual([](const auto& x) { return ops::sum(ops::square(x[0])); }));
  prim("mean", u({5}), dual([](const auto& x) { return ops::mean(ops::square(x[0])); }));
  prim("reshape", u({2, 6}), dual([](const auto& x) { return project(ops::reshape(x[0], Shape{3, 4})); }));
  prim("transpose", u({2, 5}), dual([](const auto& x) { return project(ops::transpose(x[0])); }));
  prim("gather", u({6}), dual([](const auto& x) {
         auto idx = std::make_shared<const std::vector<std::size_t>>(std::vector<std::size_t>{5, 0, 0, 3, 2, 5, 1});
         return project(ops::gather(x[0], idx, Shape{7}));
       }));
  prim("slice", u({3, 5, 2}), dual([](const auto& x) { return project(ops::slice(x[0], 1, 1, 3)); }));
  prim("concat", u2({2, 3}, {2, 2}), dual([](const auto& x) {
         using T = typename std::decay_t<decltype(x[0])>::value_type;
         return project(ops::concat(std::vector<Tensor<T>>{x[0], x[1]}, 1));
       }));
  prim("add_row_vector", u2({3, 4}, {4}), dual([](const auto& x) { return project(ops::add_row_vector(x[0], x[1])); }));
  prim("mul_row_vector", u2({3, 4}, {4}), dual([](const auto& x) { return project(ops::mul_row_vector(x[0], x[1])); }));
  prim("add_col_vector", u2({3, 2, 2}, {3}),
       dual([](const auto& x) { return project(ops::add_col_vector(x[0], x[1])); }));
  prim("mul_col_vector", u2({3, 2, 2}, {3}),
       dual([](const auto& x) { return project(ops::mul_col_vector(x[0], x[1])); }));
  prim("matmul", u2({3, 4}, {4, 2}), dual([](const auto& x) { return project(ops::matmul(x[0], x[1])); }));
  prim("softmax_rows", u({3, 5}, -2, 2), dual([](const auto& x) { return project(ops::softmax_rows(x[0])); }));
  prim("log_softmax_rows", u({3, 5}, -2, 2),
       dual([](const auto& x) { return project(ops::log_softmax_rows(x[0])); }));
  prim("layer_norm",
       [](std::mt19937_64& r) {
         return std::vector<Tensor<double>>{uniform({3, 5}, -2, 2, r), uniform({5}, 0.5, 1.5, r),
                                            uniform({5}, -0.5, 0.5, r)};
       },
       dual([](const auto& x) { return project(ops::layer_norm(x[0], x[1], x[2])); }));
  prim("instance_norm",
       [](std::mt19937_64& r) {
         return std::vector<Tensor<double>>{uniform({2, 2, 2, 3}, -2, 2, r), uniform({2}, 0.5, 1.5, r),
                                            uniform({2}, -0.5, 0.5, r)};
       },
       dual([](const auto& x) { return project(ops::instance_norm(x[0], x[1], x[2])); }));
  prim("unfold3d", u({2, 3, 3, 4}), dual([](const auto& x) { return project(ops::unfold3d(x[0], 3, 1, 1)); }));
  prim("conv3d", u2({2, 4, 4, 4}, {2, 2, 3, 3, 3}),
       dual([](const auto& x) { return project(ops::conv3d(x[0], x[1], 1, 1)); }));
  prim("conv3d_stride2", u2({2, 4, 4, 4}, {3, 2, 3, 3, 3}),
       dual([](const auto& x) { return project(ops::conv3d(x[0], x[1], 2, 1)); }));
  prim("resize3d_linear", u({2, 2, 3, 2}),
       dual([](const auto& x) { return project(ops::resize3d(x[0], 4, 5, 3)); }));
  prim("resize3d_nearest", u({2, 2, 3, 2}),
       dual([](const auto& x) { return project(ops::resize3d(x[0], 4, 6, 4, ops::ResizeMode::kNearest)); }));
  prim("avg_pool3d", u({2, 4, 4, 2}), dual([](const auto& x) { return project(ops::avg_pool3d(x[0], 2, 2, 1)); }));

  // ---- composites ----
  auto composite = [&](std::string name, std::function<std::vector<Tensor<double>>(std::uint64_t)> inputs,
                       std::function<DualFn(std::uint64_t)> fn) {
    cases.push_back({std::move(name), true, std::move(inputs), std::move(fn)});
  };

  {  // pre-norm MSA + MLP encoder layer
    VitConfig vc;
    vc.dim = 4;
    vc.heads = 2;
    vc.layers = 1;
    vc.mlp_hidden = 6;
    vc.in_channels = 2;
    vc.grid = {2, 2, 1};
    auto make = [vc](std::uint64_t s) {
      std::mt19937_64 rng = rng_for(s, "encoder_layer");
      Parameters<double> p;
      init_vit(vc, p, rng);
      auto [names, ts] = unbind(p);
      std::vector<Tensor<double>> x{uniform({4, 4}, -1, 1, rng)};
      for (auto& t : ts) {
        std::vector<double> v = t.vec();
        std::uniform_real_distribution<double> jitter(-0.3, 0.3);
        for (auto& e : v) e += jitter(rng);
        x.push_back(Tensor<double>(t.shape(), std::move(v)));
      }
      return std::make_pair(names, x);
    };
    composite(
        "encoder_layer", [make](std::uint64_t s) { return make(s).second; },
        [make, vc](std::uint64_t s) {
          auto names = make(s).first;
          return dual([names, vc](const auto& x) {
            auto p = bind_params(names, x, 1);
            return project(encoder_layer(vc, p, 0, x[0]));
          });
        });
  }

  {  // query decoder: affinity, residual updates, masked attention through probabilities
    QueryDecoderConfig qc;
    qc.num_queries = 3;
    qc.dim = 2;
    qc.key_dim = 2;
    qc.num_classes = 2;
    qc.iterations = 2;
    qc.bias_from_probabilities = true;
    auto make = [qc](std::uint64_t s) {
      std::mt19937_64 rng = rng_for(s, "query_decoder");
      Parameters<double> p;
      init_query_decoder(qc, p, rng);
      auto [names, ts] = unbind(p);
      std::vector<Tensor<double>> x{uniform({64, 2}, -1, 1, rng), uniform({8, 2}, -1, 1, rng)};
      for (auto& t : ts) x.push_back(uniform(t.shape(), -0.8, 0.8, rng));
      return std::make_pair(names, x);
    };
    composite(
        "query_decoder", [make](std::uint64_t s) { return make(s).second; },
        [make, qc](std::uint64_t s) {
          auto names = make(s).first;
          return dual([names, qc](const auto& x) {
            auto p = bind_params(names, x, 2);
            auto r = refine(qc, p, p["qdec.queries"], x[0], Dims{4, 4, 4}, x[1], Dims{2, 2, 2});
            return ops::add(project(r.fine.probabilities), project(classify_queries(p, r.queries)));
          });
        });
  }

  {  // set loss with the matching frozen at the initial point
    auto make_inputs = [](std::uint64_t s) {
      std::mt19937_64 rng = rng_for(s, "set_loss");
      return std::vector<Tensor<double>>{uniform({4, 27}, -2, 2, rng), uniform({4, 3}, -1, 1, rng)};
    };
    auto make_gts = [](std::uint64_t s) {
      std::mt19937_64 rng = rng_for(s, "set_loss.labels");
      LabelMap lm(Dims{3, 3, 3});
      std::uniform_int_distribution<int> lab(0, 2);
      for (auto& l : lm.labels) l = static_cast<std::uint8_t>(lab(rng));
      return extract_segments(lm, 2);
    };
    composite("set_loss", make_inputs, [make_inputs, make_gts](std::uint64_t s) {
      const auto gts = make_gts(s);
      const auto x0 = make_inputs(s);
      const LossConfig lc;
      const auto frozen = match(ops::sigmoid(x0[0]), x0[1], gts, lc);
      return dual([gts, frozen, lc](const auto& x) {
        return query_loss(ops::sigmoid(x[0]), x[1], gts, frozen, lc).total;
      });
    });
  }

  {  // U-Net encoder/decoder path
    UNetConfig uc;
    uc.widths = {2, 3};
    uc.in_channels = 1;
    auto make = [uc](std::uint64_t s) {
      std::mt19937_64 rng = rng_for(s, "unet");
      Parameters<double> p;
      init_unet(uc, p, rng);
      auto [names, ts] = unbind(p);
      std::vector<Tensor<double>> x{uniform({1, 4, 4, 4}, -1, 1, rng)};
      for (auto& t : ts) {
        std::vector<double> v = t.vec();
        std::uniform_real_distribution<double> jitter(-0.2, 0.2);
        for (auto& e : v) e += jitter(rng);
        x.push_back(Tensor<double>(t.shape(), std::move(v)));
      }
      return std::make_pair(names, x);
    };
    composite(
        "unet", [make](std::uint64_t s) { return make(s).second; },
        [make, uc](std::uint64_t s) {
          auto names = make(s).first;
          return dual([names, uc](const auto& x) {
            auto p = bind_params(names, x, 1);
            auto pyr = encode(uc, p, x[0]);
            return project(decode(uc, p, pyr, pyr.levels.back()).full());
          });
        });
  }

  {  // plain head loss: softmax cross-entropy + soft Dice
    auto make_inputs = [](std::uint64_t s) {
      std::mt19937_64 rng = rng_for(s, "plain_loss");
      return std::vector<Tensor<double>>{uniform({3, 3, 3, 2}, -2, 2, rng)};
    };
    composite("plain_loss", make_inputs, [](std::uint64_t s) {
      std::mt19937_64 rng = rng_for(s, "plain_loss.labels");
      LabelMap lm(Dims{3, 3, 2});
      std::uniform_int_distribution<int> lab(0, 2);
      for (auto& l : lm.labels) l = static_cast<std::uint8_t>(lab(rng));
      return dual([lm](const auto& x) { return plain_seg_loss(x[0], lm).total; });
    });
  }
  return cases;
}

// Max relative error over `seeds` random instances, 64-bit and (primitives
// only) 32-bit analytic gradients.
inline GradRow run_grad_case(const GradCase& c, std::size_t seeds, double prim_tol64 = 1e-6,
                             double prim_tol32 = 1e-4, double composite_tol = 1e-3) {
  GradRow row;
  row.name = c.name;
  row.composite = c.composite;
  row.seeds = seeds;
  row.tol64 = c.composite ? composite_tol : prim_tol64;
  row.tol32 = prim_tol32;
  if (!c.composite) row.err32 = 0.0;
  for (std::size_t s = 0; s < seeds; ++s) {
    const auto inputs = c.inputs(s);
    const auto fn = c.fn(s);
    row.err64 = std::max(row.err64, grad_check(fn, inputs).max_rel_error);
    if (!c.composite) row.err32 = std::max(row.err32, grad_check_as<float>(fn, inputs, 1e-4).max_rel_error);
  }
  return row;
}

}  // namespace transunet
