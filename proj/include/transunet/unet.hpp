// SPDX-License-Identifier: Apache-2.0
//
// Convolutional U-Net backbone: a multi-scale encoder and the pixel decoder
// whose per-level features feed both segmentation heads.
#pragma once

#include <random>
#include <string>
#include <vector>

#include "transunet/layers.hpp"
#include "transunet/volume.hpp"

namespace transunet {

enum class Upsample { kResizeConv, kTransposed };

struct UNetConfig {
  std::size_t in_channels = 1;
  std::vector<std::size_t> widths{16, 32, 64, 128};  // one per level, level 0 = full resolution
  std::size_t kernel = 3;
  Norm norm = Norm::kInstance;
  Activation activation = Activation::kGelu;
  Upsample upsample = Upsample::kResizeConv;

  std::size_t levels() const { return widths.size() - 1; }

  void validate() const {
    if (widths.size() < 2) throw ConfigError("unet: need at least two levels of widths");
    if (in_channels == 0) throw ConfigError("unet: in_channels must be positive");
    for (std::size_t i = 0; i < widths.size(); ++i) {
      if (widths[i] == 0) throw ConfigError("unet: widths must be positive");
      if (i > 0 && widths[i] < widths[i - 1]) throw ConfigError("unet: widths must be non-decreasing with depth");
    }
    if (kernel % 2 == 0) throw ConfigError("unet: kernel size must be odd");
  }

  void check_input(const Dims& d) const {
    const std::size_t f = std::size_t{1} << levels();
    if (d.d % f || d.h % f || d.w % f)
      throw ConfigError("unet: input dims " + d.str() + " not divisible by 2^" + std::to_string(levels()));
  }

  Dims level_dims(const Dims& d, std::size_t level) const { return {d.d >> level, d.h >> level, d.w >> level}; }
};

template <class T>
struct FeaturePyramid {
  std::vector<Tensor<T>> levels;  // [C_l x D/2^l x H/2^l x W/2^l]
};

template <class T>
struct DecoderFeatures {
  std::vector<Tensor<T>> levels;  // index 0 is full resolution (F); every level feeds deep supervision
  const Tensor<T>& full() const { return levels.front(); }
};

namespace unet_detail {

inline std::string enc(std::size_t l, const char* b) { return "unet.enc" + std::to_string(l) + "." + b; }
inline std::string down(std::size_t l) { return "unet.down" + std::to_string(l); }
inline std::string up(std::size_t l) { return "unet.up" + std::to_string(l); }
inline std::string dec(std::size_t l, const char* b) { return "unet.dec" + std::to_string(l) + "." + b; }

// 2x transposed convolution (kernel 2, stride 2) as matmul + pixel shuffle.
template <class T>
Tensor<T> transposed_up(const Parameters<T>& p, const std::string& name, const Tensor<T>& x) {
  const auto& w = p[name + ".w"];  // [C_out*8 x C_in]
  const std::size_t cin = x.dim(0), d = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t cout = w.dim(0) / 8, s = d * h * wd;
  auto y = ops::matmul(w, ops::reshape(x, Shape{cin, s}));  // [cout*8 x S]
  auto index = std::make_shared<std::vector<std::size_t>>(cout * 8 * s);
  std::size_t o = 0;
  for (std::size_t c = 0; c < cout; ++c)
    for (std::size_t z = 0; z < 2 * d; ++z)
      for (std::size_t yy = 0; yy < 2 * h; ++yy)
        for (std::size_t xx = 0; xx < 2 * wd; ++xx) {
          const std::size_t row = c * 8 + (z % 2) * 4 + (yy % 2) * 2 + (xx % 2);
          const std::size_t col = ((z / 2) * h + yy / 2) * wd + xx / 2;
          (*index)[o++] = row * s + col;
        }
  auto shuffled = ops::gather(y, std::shared_ptr<const std::vector<std::size_t>>(index), Shape{cout, 2 * d, 2 * h, 2 * wd});
  return ops::add_col_vector(shuffled, p[name + ".b"]);
}

}  // namespace unet_detail

template <class T>
void init_unet(const UNetConfig& cfg, Parameters<T>& p, std::mt19937_64& rng) {
  cfg.validate();
  const auto& w = cfg.widths;
  const std::size_t L = cfg.levels();
  for (std::size_t l = 0; l <= L; ++l) {
    init_conv_block(p, unet_detail::enc(l, "b0"), l == 0 ? cfg.in_channels : w[l], w[l], cfg.kernel, cfg.norm, rng);
    init_conv_block(p, unet_detail::enc(l, "b1"), w[l], w[l], cfg.kernel, cfg.norm, rng);
    if (l < L) init_conv_block(p, unet_detail::down(l), w[l], w[l + 1], cfg.kernel, cfg.norm, rng);
  }
  for (std::size_t l = 0; l < L; ++l) {
    if (cfg.upsample == Upsample::kResizeConv) {
      init_conv(p, unet_detail::up(l), w[l + 1], w[l], 1, rng);
    } else {
      p.add(unet_detail::up(l) + ".w", init::kaiming<T>(Shape{w[l] * 8, w[l + 1]}, w[l + 1], rng));
      p.add(unet_detail::up(l) + ".b", Tensor<T>::zeros(Shape{w[l]}));
    }
    init_conv_block(p, unet_detail::dec(l, "b0"), 2 * w[l], w[l], cfg.kernel, cfg.norm, rng);
    init_conv_block(p, unet_detail::dec(l, "b1"), w[l], w[l], cfg.kernel, cfg.norm, rng);
  }
}

// Per level: two conv blocks; between levels a stride-2 conv block halves
// the spatial extent.
template <class T>
FeaturePyramid<T> encode(const UNetConfig& cfg, const Parameters<T>& p, const Tensor<T>& x) {
  if (x.rank() != 4 || x.dim(0) != cfg.in_channels)
    throw DimensionError("unet: expected [" + std::to_string(cfg.in_channels) + " x D x H x W] input, got " +
                         shape_str(x.shape()));
  cfg.check_input(Dims{x.dim(1), x.dim(2), x.dim(3)});
  FeaturePyramid<T> pyr;
  Tensor<T> h = x;
  for (std::size_t l = 0; l <= cfg.levels(); ++l) {
    h = conv_block(p, unet_detail::enc(l, "b0"), h, cfg.norm, cfg.activation);
    h = conv_block(p, unet_detail::enc(l, "b1"), h, cfg.norm, cfg.activation);
    pyr.levels.push_back(h);
    if (l < cfg.levels()) h = conv_block(p, unet_detail::down(l), h, cfg.norm, cfg.activation, 2);
  }
  return pyr;
}

// Upsample, concatenate the skip feature, two conv blocks; repeated up to
// full resolution.
template <class T>
DecoderFeatures<T> decode(const UNetConfig& cfg, const Parameters<T>& p, const FeaturePyramid<T>& pyr,
                          const Tensor<T>& bottleneck) {
  const std::size_t L = cfg.levels();
  if (pyr.levels.size() != L + 1) throw DimensionError("unet decode: pyramid has the wrong number of levels");
  const auto& deepest = pyr.levels[L];
  if (bottleneck.rank() != 4 || bottleneck.dim(0) != cfg.widths[L] || bottleneck.dim(1) != deepest.dim(1) ||
      bottleneck.dim(2) != deepest.dim(2) || bottleneck.dim(3) != deepest.dim(3))
    throw DimensionError("unet decode: bottleneck " + shape_str(bottleneck.shape()) + " does not match level " +
                         std::to_string(L) + " feature " + shape_str(deepest.shape()));
  DecoderFeatures<T> out;
  out.levels.resize(L);
  Tensor<T> h = bottleneck;
  for (std::size_t l = L; l-- > 0;) {
    const auto& skip = pyr.levels[l];
    if (skip.rank() != 4 || skip.dim(0) != cfg.widths[l] || skip.dim(1) != 2 * h.dim(1) ||
        skip.dim(2) != 2 * h.dim(2) || skip.dim(3) != 2 * h.dim(3))
      throw DimensionError("unet decode: skip feature at level " + std::to_string(l) + " has shape " +
                           shape_str(skip.shape()) + ", expected [" + std::to_string(cfg.widths[l]) + " x 2x" +
                           shape_str({h.dim(1), h.dim(2), h.dim(3)}) + "]");
    Tensor<T> up;
    if (cfg.upsample == Upsample::kResizeConv) {
      up = conv(p, unet_detail::up(l), ops::resize3d(h, skip.dim(1), skip.dim(2), skip.dim(3)));
    } else {
      up = unet_detail::transposed_up(p, unet_detail::up(l), h);
    }
    h = ops::concat<T>({up, skip}, 0);
    h = conv_block(p, unet_detail::dec(l, "b0"), h, cfg.norm, cfg.activation);
    h = conv_block(p, unet_detail::dec(l, "b1"), h, cfg.norm, cfg.activation);
    out.levels[l] = h;
  }
  return out;
}

// 1x1x1 convolution of F to K+1 class logits (background + K classes).
template <class T>
void init_plain_head(Parameters<T>& p, const std::string& name, std::size_t channels, std::size_t num_classes,
                     std::mt19937_64& rng) {
  init_conv(p, name, channels, num_classes + 1, 1, rng);
}

template <class T>
Tensor<T> plain_seg_head(const Parameters<T>& p, const std::string& name, const Tensor<T>& feature) {
  return conv(p, name, feature);
}

}  // namespace transunet
