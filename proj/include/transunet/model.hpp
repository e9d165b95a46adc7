// SPDX-License-Identifier: Apache-2.0
//
// Full network: CNN encoder, optional Transformer encoder on the bottleneck,
// U-Net decoder, and either a plain per-voxel head or the query decoder.
//
//   enc  : Transformer encoder + plain head
//   dec  : CNN encoder + query decoder
//   both : Transformer encoder + query decoder
#pragma once

#include <random>
#include <string>
#include <vector>

#include "transunet/losses.hpp"
#include "transunet/query_decoder.hpp"
#include "transunet/unet.hpp"
#include "transunet/vit.hpp"

namespace transunet {

enum class Variant { kEnc, kDec, kBoth };

inline std::string variant_name(Variant v) {
  switch (v) {
    case Variant::kEnc: return "enc";
    case Variant::kDec: return "dec";
    case Variant::kBoth: return "both";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "enc") return Variant::kEnc;
  if (s == "dec") return Variant::kDec;
  if (s == "both") return Variant::kBoth;
  throw ConfigError("unknown variant '" + s + "' (expected enc, dec or both)");
}

struct ModelConfig {
  Variant variant = Variant::kDec;
  std::size_t num_classes = 2;  // K foreground classes
  Dims input{32, 32, 32};
  UNetConfig unet;
  VitConfig vit;                // in_channels / grid are derived
  QueryDecoderConfig qdec;      // num_classes is derived
  std::size_t feature_level = 1;  // decoder level whose features the queries attend to

  bool uses_vit() const { return variant != Variant::kDec; }
  bool uses_queries() const { return variant != Variant::kEnc; }
  std::size_t decoder_levels() const { return unet.levels(); }
  Dims level_dims(std::size_t l) const { return unet.level_dims(input, l); }

  // Fills derived fields from the backbone and input geometry.
  void finalize() {
    vit.in_channels = unet.widths.back();
    vit.grid = level_dims(unet.levels());
    qdec.num_classes = num_classes;
  }

  void validate() const {
    unet.validate();
    unet.check_input(input);
    if (num_classes == 0 || num_classes > 254) throw ConfigError("num_classes must be in [1, 254]");
    if (uses_vit()) vit.validate();
    if (uses_queries()) {
      qdec.validate();
      if (feature_level >= decoder_levels())
        throw ConfigError("feature_level " + std::to_string(feature_level) + " must be below the decoder depth " +
                          std::to_string(decoder_levels()));
    }
  }
};

template <class T>
struct ForwardOutput {
  std::vector<Dims> dims;                 // per decoder level
  std::vector<Tensor<T>> level_logits;    // plain head: [K+1 x D_l x H_l x W_l]
  std::vector<Tensor<T>> mask_probs;      // query head: [N_q x V_l]
  Tensor<T> class_logits;                 // query head: [N_q x K+1]
  RefineResult<T> refined;                // query head, level-0 maps and trace
};

template <class T>
Parameters<T> init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  Parameters<T> p;
  init_unet(cfg.unet, p, rng);
  if (cfg.uses_vit()) {
    init_vit(cfg.vit, p, rng);
    init_conv(p, "vit.out", cfg.vit.dim, cfg.unet.widths.back(), 1, rng);
  }
  if (cfg.uses_queries()) {
    init_query_decoder(cfg.qdec, p, rng);
    for (std::size_t l = 0; l < cfg.decoder_levels(); ++l)
      init_conv(p, "qdec.proj" + std::to_string(l), cfg.unet.widths[l], cfg.qdec.dim, 1, rng);
  } else {
    for (std::size_t l = 0; l < cfg.decoder_levels(); ++l)
      init_plain_head(p, "head.l" + std::to_string(l), cfg.unet.widths[l], cfg.num_classes, rng);
  }
  return p;
}

// Per-channel zero-mean / unit-variance normalization.
template <class T>
Tensor<T> model_input(const Volume& v) {
  std::vector<T> buf(v.data.size());
  const std::size_t n = v.dims.voxels();
  for (std::size_t c = 0; c < v.channels; ++c) {
    double mean = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += v.data[c * n + i];
    mean /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) sq += (v.data[c * n + i] - mean) * (v.data[c * n + i] - mean);
    const double sd = std::sqrt(sq / static_cast<double>(n)) + 1e-8;
    for (std::size_t i = 0; i < n; ++i) buf[c * n + i] = static_cast<T>((v.data[c * n + i] - mean) / sd);
  }
  return Tensor<T>(Shape{v.channels, v.dims.d, v.dims.h, v.dims.w}, std::move(buf));
}

template <class T>
ForwardOutput<T> forward(const ModelConfig& cfg, const Parameters<T>& p, const Tensor<T>& x,
                         const AttentionObserver<T>* observer = nullptr) {
  const Dims in{x.dim(1), x.dim(2), x.dim(3)};
  if (!(in == cfg.input))
    throw ConfigError("input volume " + in.str() + " does not match the configured geometry " + cfg.input.str());
  auto pyr = encode(cfg.unet, p, x);
  Tensor<T> bottleneck = pyr.levels.back();
  if (cfg.uses_vit()) {
    auto enc = vit_forward(cfg.vit, p, bottleneck, observer);
    bottleneck = conv(p, "vit.out", enc.grid);
  }
  auto dec = decode(cfg.unet, p, pyr, bottleneck);
  ForwardOutput<T> out;
  for (std::size_t l = 0; l < cfg.decoder_levels(); ++l) out.dims.push_back(cfg.level_dims(l));
  if (!cfg.uses_queries()) {
    for (std::size_t l = 0; l < cfg.decoder_levels(); ++l)
      out.level_logits.push_back(plain_seg_head(p, "head.l" + std::to_string(l), dec.levels[l]));
    return out;
  }
  std::vector<Tensor<T>> feats;
  for (std::size_t l = 0; l < cfg.decoder_levels(); ++l)
    feats.push_back(flatten_spatial(conv(p, "qdec.proj" + std::to_string(l), dec.levels[l])));
  out.refined = refine(cfg.qdec, p, p["qdec.queries"], feats[0], out.dims[0], feats[cfg.feature_level],
                       out.dims[cfg.feature_level], observer);
  out.class_logits = classify_queries(p, out.refined.queries);
  out.mask_probs.push_back(out.refined.fine.probabilities);
  for (std::size_t l = 1; l < cfg.decoder_levels(); ++l)
    out.mask_probs.push_back(ops::sigmoid(ops::matmul(out.refined.queries, ops::transpose(feats[l]))));
  return out;
}

// Segments of `labels` for a fixed class list (masks may be empty at coarse
// levels where a small structure vanishes).
inline GroundTruthSegments segments_for_classes(const LabelMap& labels, const std::vector<std::size_t>& classes) {
  GroundTruthSegments out;
  out.dims = labels.dims;
  out.classes = classes;
  for (auto c : classes) {
    std::vector<float> m(labels.labels.size());
    for (std::size_t v = 0; v < m.size(); ++v) m[v] = labels.labels[v] == c + 1 ? 1.0f : 0.0f;
    out.masks.push_back(std::move(m));
  }
  return out;
}

// Deep-supervised training loss. For the query head the matching is computed
// once on the full-resolution predictions and reused at every level.
template <class T>
LossBreakdown<T> model_loss(const ModelConfig& cfg, const ForwardOutput<T>& out, const LabelMap& gt,
                            const LossConfig& lc, MatchAssignment* assignment_out = nullptr) {
  const auto weights = deep_supervision_weights(cfg.decoder_levels());
  std::vector<LossBreakdown<T>> parts;
  if (!cfg.uses_queries()) {
    for (std::size_t l = 0; l < cfg.decoder_levels(); ++l)
      parts.push_back(plain_seg_loss(out.level_logits[l], downsample_nearest(gt, out.dims[l]), lc.dice_smooth));
    return weighted_sum(parts, weights);
  }
  const auto gts0 = extract_segments(gt, cfg.num_classes);
  const auto assignment = match(out.mask_probs[0], out.class_logits, gts0, lc);
  if (assignment_out) *assignment_out = assignment;
  for (std::size_t l = 0; l < cfg.decoder_levels(); ++l) {
    const auto gts = l == 0 ? gts0 : segments_for_classes(downsample_nearest(gt, out.dims[l]), gts0.classes);
    parts.push_back(query_loss(out.mask_probs[l], out.class_logits, gts, assignment, lc));
  }
  return weighted_sum(parts, weights);
}

// Label map from a forward pass: argmax of the plain head, or the query
// masks assembled by class.
template <class T>
LabelMap to_label_map(const ModelConfig& cfg, const ForwardOutput<T>& out, const Spacing& spacing) {
  const Dims d = out.dims[0];
  if (cfg.uses_queries()) return assemble_semantic(out.refined.fine, out.class_logits, d, spacing);
  const auto& lg = out.level_logits[0];
  const std::size_t nc = lg.dim(0), n = d.voxels();
  LabelMap lm(d, spacing);
  for (std::size_t v = 0; v < n; ++v) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < nc; ++c)
      if (lg[c * n + v] > lg[best * n + v]) best = c;
    lm.labels[v] = static_cast<std::uint8_t>(best);
  }
  return lm;
}

template <class T>
LabelMap predict(const ModelConfig& cfg, const Parameters<T>& p, const Volume& image) {
  auto out = forward(cfg, p, model_input<T>(image));
  return to_label_map(cfg, out, image.spacing);
}

}  // namespace transunet
