// SPDX-License-Identifier: Apache-2.0
//
// Transformer encoder over a CNN feature map: patch sequentialization, linear
// patch embedding plus learned positions, and pre-norm MSA / MLP layers.
#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "transunet/layers.hpp"
#include "transunet/volume.hpp"

namespace transunet {

// Receives every attention / affinity matrix produced in a forward pass.
template <class T>
using AttentionObserver = std::function<void(std::string_view tag, const Tensor<T>& weights)>;

struct VitConfig {
  std::size_t in_channels = 128;  // channels of the feature map being tokenized
  Dims grid{4, 4, 4};             // spatial dims of that feature map
  std::size_t patch = 1;
  std::size_t dim = 96;
  std::size_t heads = 4;
  std::size_t layers = 4;
  std::size_t mlp_hidden = 192;
  Activation activation = Activation::kGelu;

  std::size_t tokens() const { return grid.voxels() / (patch * patch * patch); }
  std::size_t token_length() const { return patch * patch * patch * in_channels; }
  Dims token_grid() const { return {grid.d / patch, grid.h / patch, grid.w / patch}; }

  void validate() const {
    if (patch == 0 || grid.d % patch || grid.h % patch || grid.w % patch)
      throw ConfigError("vit: feature dims " + grid.str() + " not divisible by patch size " + std::to_string(patch));
    if (heads == 0 || dim % heads) throw ConfigError("vit: d_enc " + std::to_string(dim) + " not divisible by " +
                                                    std::to_string(heads) + " heads");
    if (mlp_hidden == 0 || in_channels == 0) throw ConfigError("vit: empty layer widths");
  }
};

template <class T>
struct PatchSequence {
  Tensor<T> tokens;  // [N x P^3*C]
  std::size_t patch;
  std::size_t channels;
  Dims source;
};

namespace vit_detail {

// Gather map from a [C x D x H x W] map to [N x P^3*C] tokens. Patches are in
// lexicographic (d, h, w) order; each token is the row-major flatten of its
// [C x P x P x P] block.
inline std::vector<std::size_t> patch_index(std::size_t c, const Dims& d, std::size_t p) {
  std::vector<std::size_t> idx;
  idx.reserve(c * d.voxels());
  for (std::size_t pz = 0; pz < d.d / p; ++pz)
    for (std::size_t py = 0; py < d.h / p; ++py)
      for (std::size_t px = 0; px < d.w / p; ++px)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t a = 0; a < p; ++a)
            for (std::size_t b = 0; b < p; ++b)
              for (std::size_t e = 0; e < p; ++e)
                idx.push_back(ch * d.voxels() + d.index(pz * p + a, py * p + b, px * p + e));
  return idx;
}

inline std::string layer(std::size_t l, const char* part) { return "vit.layer" + std::to_string(l) + "." + part; }

}  // namespace vit_detail

template <class T>
PatchSequence<T> sequentialize(const Tensor<T>& feat, std::size_t patch) {
  if (feat.rank() != 4) throw DimensionError("sequentialize: expected [C x D x H x W], got " + shape_str(feat.shape()));
  const Dims d{feat.dim(1), feat.dim(2), feat.dim(3)};
  if (patch == 0 || d.d % patch || d.h % patch || d.w % patch)
    throw ConfigError("sequentialize: dims " + d.str() + " not divisible by patch size " + std::to_string(patch));
  const std::size_t c = feat.dim(0), n = d.voxels() / (patch * patch * patch);
  auto idx = std::make_shared<const std::vector<std::size_t>>(vit_detail::patch_index(c, d, patch));
  return {ops::gather(feat, idx, Shape{n, feat.size() / n}), patch, c, d};
}

// Inverse of sequentialize.
template <class T>
Tensor<T> unsequentialize(const Tensor<T>& tokens, std::size_t channels, const Dims& source, std::size_t patch) {
  auto fwd = vit_detail::patch_index(channels, source, patch);
  if (fwd.size() != tokens.size())
    throw DimensionError("unsequentialize: " + shape_str(tokens.shape()) + " does not match " +
                         std::to_string(channels) + " x " + source.str());
  auto inv = std::make_shared<std::vector<std::size_t>>(fwd.size());
  for (std::size_t i = 0; i < fwd.size(); ++i) (*inv)[fwd[i]] = i;
  return ops::gather(tokens, std::shared_ptr<const std::vector<std::size_t>>(inv),
                     Shape{channels, source.d, source.h, source.w});
}

template <class T>
void init_vit(const VitConfig& cfg, Parameters<T>& p, std::mt19937_64& rng) {
  cfg.validate();
  p.add("vit.embed", init::normal<T>(Shape{cfg.token_length(), cfg.dim}, std::sqrt(1.0 / cfg.token_length()), rng));
  p.add("vit.pos", init::truncated_normal<T>(Shape{cfg.tokens(), cfg.dim}, 0.02, rng));
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    init_norm(p, vit_detail::layer(l, "ln1"), cfg.dim);
    init_linear(p, vit_detail::layer(l, "q"), cfg.dim, cfg.dim, false, rng);
    init_linear(p, vit_detail::layer(l, "k"), cfg.dim, cfg.dim, false, rng);
    init_linear(p, vit_detail::layer(l, "v"), cfg.dim, cfg.dim, false, rng);
    init_linear(p, vit_detail::layer(l, "out"), cfg.dim, cfg.dim, true, rng);
    init_norm(p, vit_detail::layer(l, "ln2"), cfg.dim);
    init_linear(p, vit_detail::layer(l, "fc1"), cfg.dim, cfg.mlp_hidden, true, rng);
    init_linear(p, vit_detail::layer(l, "fc2"), cfg.mlp_hidden, cfg.dim, true, rng);
  }
}

// z0 = [x_1 E; ...; x_N E] + E_pos
template <class T>
Tensor<T> embed(const PatchSequence<T>& seq, const Tensor<T>& projection, const Tensor<T>& positions) {
  const std::size_t n = seq.tokens.dim(0);
  if (projection.rank() != 2 || projection.dim(0) != seq.tokens.dim(1))
    throw DimensionError("embed: projection " + shape_str(projection.shape()) + " for tokens " +
                         shape_str(seq.tokens.shape()));
  if (positions.rank() != 2 || positions.dim(0) != n || positions.dim(1) != projection.dim(1))
    throw DimensionError("embed: position table " + shape_str(positions.shape()) + " does not match " +
                         std::to_string(n) + " tokens of width " + std::to_string(projection.dim(1)) +
                         " (volume size must match the configured token grid)");
  return ops::add(ops::matmul(seq.tokens, projection), positions);
}

// Scaled dot-product multi-head self-attention on pre-normalized tokens.
template <class T>
Tensor<T> multi_head_attention(const Parameters<T>& p, std::size_t l, const Tensor<T>& x, std::size_t heads,
                               const AttentionObserver<T>* observer = nullptr) {
  const std::size_t d = x.dim(1), dh = d / heads;
  auto q = linear(p, vit_detail::layer(l, "q"), x);
  auto k = linear(p, vit_detail::layer(l, "k"), x);
  auto v = linear(p, vit_detail::layer(l, "v"), x);
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<Tensor<T>> outs;
  for (std::size_t h = 0; h < heads; ++h) {
    auto qh = ops::slice(q, 1, h * dh, dh), kh = ops::slice(k, 1, h * dh, dh), vh = ops::slice(v, 1, h * dh, dh);
    auto attn = ops::softmax_rows(ops::scale(ops::matmul(qh, ops::transpose(kh)), scale));
    if (observer && *observer)
      (*observer)("vit.layer" + std::to_string(l) + ".head" + std::to_string(h), attn);
    outs.push_back(ops::matmul(attn, vh));
  }
  auto cat = heads == 1 ? outs.front() : ops::concat(outs, 1);
  return linear(p, vit_detail::layer(l, "out"), cat);
}

// z'_l = MSA(LN(z_{l-1})) + z_{l-1};  z_l = MLP(LN(z'_l)) + z'_l
template <class T>
Tensor<T> encoder_layer(const VitConfig& cfg, const Parameters<T>& p, std::size_t l, const Tensor<T>& z,
                        const AttentionObserver<T>* observer = nullptr) {
  if (cfg.heads == 0 || z.dim(1) % cfg.heads)
    throw ConfigError("encoder_layer: width " + std::to_string(z.dim(1)) + " not divisible by " +
                      std::to_string(cfg.heads) + " heads");
  auto n1 = ops::layer_norm(z, p[vit_detail::layer(l, "ln1.g")], p[vit_detail::layer(l, "ln1.b")]);
  auto z1 = ops::add(multi_head_attention(p, l, n1, cfg.heads, observer), z);
  auto n2 = ops::layer_norm(z1, p[vit_detail::layer(l, "ln2.g")], p[vit_detail::layer(l, "ln2.b")]);
  auto hidden = activate(linear(p, vit_detail::layer(l, "fc1"), n2), cfg.activation);
  return ops::add(linear(p, vit_detail::layer(l, "fc2"), hidden), z1);
}

template <class T>
struct EncodedTokens {
  Tensor<T> tokens;  // z_L [N x d_enc]
  Tensor<T> grid;    // [d_enc x D/P x H/P x W/P]
};

template <class T>
EncodedTokens<T> encode_stack(const VitConfig& cfg, const Parameters<T>& p, const Tensor<T>& z0,
                              const AttentionObserver<T>* observer = nullptr) {
  Tensor<T> z = z0;
  for (std::size_t l = 0; l < cfg.layers; ++l) z = encoder_layer(cfg, p, l, z, observer);
  const Dims g = cfg.token_grid();
  if (z.dim(0) != g.voxels())
    throw DimensionError("encode_stack: " + std::to_string(z.dim(0)) + " tokens for a " + g.str() + " grid");
  auto grid = ops::reshape(ops::transpose(z), Shape{z.dim(1), g.d, g.h, g.w});
  return {z, grid};
}

// Full Transformer-encoder path: feature map -> tokens -> z_L grid.
template <class T>
EncodedTokens<T> vit_forward(const VitConfig& cfg, const Parameters<T>& p, const Tensor<T>& feature,
                             const AttentionObserver<T>* observer = nullptr) {
  auto seq = sequentialize(feature, cfg.patch);
  auto z0 = embed(seq, p["vit.embed"], p["vit.pos"]);
  return encode_stack(cfg, p, z0, observer);
}

}  // namespace transunet
