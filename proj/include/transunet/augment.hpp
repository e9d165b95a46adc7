// SPDX-License-Identifier: Apache-2.0
//
// Training-time augmentations. Geometric transforms act on image and label
// together; intensity transforms touch the image only. Every transform fires
// independently with its configured probability.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <random>
#include <string>

#include "transunet/errors.hpp"
#include "transunet/volume.hpp"

namespace transunet {

struct AugmentConfig {
  double p_flip = 0.5;       // per axis
  double p_rot90 = 0.5;      // per plane, only planes with equal extents
  double p_rotate = 0.0;     // small-angle trilinear rotation in the H-W plane
  double max_angle = 0.26;   // radians
  double p_scale = 0.2;
  double scale_min = 0.85, scale_max = 1.25;
  double p_noise = 0.15;
  double noise_sigma_max = 0.1;
  double p_blur = 0.2;
  double blur_sigma_min = 0.5, blur_sigma_max = 1.0;
  double p_jitter = 0.15;  // brightness / contrast
  double brightness_min = 0.75, brightness_max = 1.25;
  double contrast_min = 0.75, contrast_max = 1.25;
  double p_lowres = 0.25;
  double lowres_min = 0.5, lowres_max = 1.0;
  double p_gamma = 0.3;
  double gamma_min = 0.7, gamma_max = 1.5;

  static AugmentConfig none() {
    AugmentConfig c;
    c.p_flip = c.p_rot90 = c.p_rotate = c.p_scale = c.p_noise = c.p_blur = c.p_jitter = c.p_lowres = c.p_gamma = 0.0;
    return c;
  }

  void validate() const {
    for (double p : {p_flip, p_rot90, p_rotate, p_scale, p_noise, p_blur, p_jitter, p_lowres, p_gamma})
      if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("augment: probabilities must lie in [0, 1]");
  }
};

namespace aug {

inline void flip(Volume& v, LabelMap& l, int axis) {
  const Dims d = v.dims;
  auto mirror = [&](std::size_t z, std::size_t y, std::size_t x) {
    if (axis == 0) return d.index(d.d - 1 - z, y, x);
    if (axis == 1) return d.index(z, d.h - 1 - y, x);
    return d.index(z, y, d.w - 1 - x);
  };
  Volume vo = v;
  LabelMap lo = l;
  for (std::size_t z = 0; z < d.d; ++z)
    for (std::size_t y = 0; y < d.h; ++y)
      for (std::size_t x = 0; x < d.w; ++x) {
        const auto dst = d.index(z, y, x), src = mirror(z, y, x);
        for (std::size_t c = 0; c < v.channels; ++c) vo.data[c * d.voxels() + dst] = v.data[c * d.voxels() + src];
        lo.labels[dst] = l.labels[src];
      }
  v = std::move(vo);
  l = std::move(lo);
}

// Quarter turn in the plane spanned by axes (a, b); extents must be equal.
inline void rot90(Volume& v, LabelMap& l, int a, int b) {
  const Dims d = v.dims;
  const std::array<std::size_t, 3> ext{d.d, d.h, d.w};
  if (ext[a] != ext[b]) throw DimensionError("rot90 requires equal extents in the rotation plane");
  Volume vo = v;
  LabelMap lo = l;
  for (std::size_t z = 0; z < d.d; ++z)
    for (std::size_t y = 0; y < d.h; ++y)
      for (std::size_t x = 0; x < d.w; ++x) {
        std::array<std::size_t, 3> p{z, y, x}, q = p;
        // (p_a, p_b) -> (p_b, n - 1 - p_a)
        q[a] = p[b];
        q[b] = ext[a] - 1 - p[a];
        const auto src = d.index(p[0], p[1], p[2]), dst = d.index(q[0], q[1], q[2]);
        for (std::size_t c = 0; c < v.channels; ++c) vo.data[c * d.voxels() + dst] = v.data[c * d.voxels() + src];
        lo.labels[dst] = l.labels[src];
      }
  v = std::move(vo);
  l = std::move(lo);
}

// Resamples about the volume center with an inverse map from output to input
// coordinates. Image: trilinear, label: nearest; both clamp at the border so
// labels only take values already present.
template <class InvMap>
void resample(Volume& v, LabelMap& l, InvMap&& inv) {
  const Dims d = v.dims;
  Volume vo = v;
  LabelMap lo = l;
  auto clampi = [](double p, std::size_t n) { return std::clamp(p, 0.0, static_cast<double>(n - 1)); };
  for (std::size_t z = 0; z < d.d; ++z)
    for (std::size_t y = 0; y < d.h; ++y)
      for (std::size_t x = 0; x < d.w; ++x) {
        auto src = inv(static_cast<double>(z), static_cast<double>(y), static_cast<double>(x));
        const double sz = clampi(src[0], d.d), sy = clampi(src[1], d.h), sx = clampi(src[2], d.w);
        const auto dst = d.index(z, y, x);
        lo.labels[dst] = l.at(static_cast<std::size_t>(std::lround(sz)), static_cast<std::size_t>(std::lround(sy)),
                              static_cast<std::size_t>(std::lround(sx)));
        const std::size_t z0 = static_cast<std::size_t>(sz), y0 = static_cast<std::size_t>(sy),
                          x0 = static_cast<std::size_t>(sx);
        const std::size_t z1 = std::min(z0 + 1, d.d - 1), y1 = std::min(y0 + 1, d.h - 1),
                          x1 = std::min(x0 + 1, d.w - 1);
        const double fz = sz - z0, fy = sy - y0, fx = sx - x0;
        for (std::size_t c = 0; c < v.channels; ++c) {
          auto at = [&](std::size_t a, std::size_t b, std::size_t e) { return static_cast<double>(v.at(c, a, b, e)); };
          const double c00 = at(z0, y0, x0) * (1 - fx) + at(z0, y0, x1) * fx;
          const double c01 = at(z0, y1, x0) * (1 - fx) + at(z0, y1, x1) * fx;
          const double c10 = at(z1, y0, x0) * (1 - fx) + at(z1, y0, x1) * fx;
          const double c11 = at(z1, y1, x0) * (1 - fx) + at(z1, y1, x1) * fx;
          const double c0 = c00 * (1 - fy) + c01 * fy, c1 = c10 * (1 - fy) + c11 * fy;
          vo.data[c * d.voxels() + dst] = static_cast<float>(c0 * (1 - fz) + c1 * fz);
        }
      }
  v = std::move(vo);
  l = std::move(lo);
}

inline void scale(Volume& v, LabelMap& l, double s) {
  s = std::clamp(s, 0.7, 1.4);
  const double cz = (v.dims.d - 1) / 2.0, cy = (v.dims.h - 1) / 2.0, cx = (v.dims.w - 1) / 2.0;
  resample(v, l, [&](double z, double y, double x) {
    return std::array<double, 3>{cz + (z - cz) / s, cy + (y - cy) / s, cx + (x - cx) / s};
  });
}

inline void rotate_hw(Volume& v, LabelMap& l, double angle) {
  const double cy = (v.dims.h - 1) / 2.0, cx = (v.dims.w - 1) / 2.0;
  const double c = std::cos(angle), s = std::sin(angle);
  resample(v, l, [&](double z, double y, double x) {
    const double dy = y - cy, dx = x - cx;
    return std::array<double, 3>{z, cy + c * dy + s * dx, cx - s * dy + c * dx};
  });
}

inline void add_noise(Volume& v, double sigma, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, sigma);
  for (auto& f : v.data) f = static_cast<float>(f + n(rng));
}

inline void blur_axis(std::vector<double>& buf, const Dims& d, int axis, const std::vector<double>& k) {
  const long r = static_cast<long>(k.size() / 2);
  std::vector<double> out(buf.size());
  const std::array<std::size_t, 3> ext{d.d, d.h, d.w};
  for (std::size_t z = 0; z < d.d; ++z)
    for (std::size_t y = 0; y < d.h; ++y)
      for (std::size_t x = 0; x < d.w; ++x) {
        std::array<std::size_t, 3> p{z, y, x};
        double acc = 0.0;
        for (long t = -r; t <= r; ++t) {
          auto q = p;
          q[axis] = static_cast<std::size_t>(std::clamp<long>(static_cast<long>(p[axis]) + t, 0, ext[axis] - 1));
          acc += k[t + r] * buf[d.index(q[0], q[1], q[2])];
        }
        out[d.index(z, y, x)] = acc;
      }
  buf = std::move(out);
}

inline void gaussian_blur(Volume& v, double sigma) {
  const long r = std::max(1L, static_cast<long>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * r + 1);
  double s = 0.0;
  for (long t = -r; t <= r; ++t) s += (k[t + r] = std::exp(-0.5 * t * t / (sigma * sigma)));
  for (auto& e : k) e /= s;
  const std::size_t n = v.dims.voxels();
  for (std::size_t c = 0; c < v.channels; ++c) {
    std::vector<double> buf(v.data.begin() + c * n, v.data.begin() + (c + 1) * n);
    for (int a = 0; a < 3; ++a) blur_axis(buf, v.dims, a, k);
    for (std::size_t i = 0; i < n; ++i) v.data[c * n + i] = static_cast<float>(buf[i]);
  }
}

// Grayscale stand-in for color jitter: multiplicative brightness, then
// contrast about the channel mean.
inline void jitter(Volume& v, double brightness, double contrast) {
  const std::size_t n = v.dims.voxels();
  for (std::size_t c = 0; c < v.channels; ++c) {
    double mu = 0.0;
    for (std::size_t i = 0; i < n; ++i) mu += v.data[c * n + i] * brightness;
    mu /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double b = v.data[c * n + i] * brightness;
      v.data[c * n + i] = static_cast<float>((b - mu) * contrast + mu);
    }
  }
}

// Nearest-neighbour downsample by `zoom`, trilinear upsample back.
inline void low_resolution(Volume& v, double zoom) {
  const Dims d = v.dims;
  auto shrink = [&](std::size_t n) { return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(n * zoom))); };
  const Dims s{shrink(d.d), shrink(d.h), shrink(d.w)};
  if (s == d) return;
  Volume small(v.channels, s, v.spacing);
  for (std::size_t c = 0; c < v.channels; ++c)
    for (std::size_t z = 0; z < s.d; ++z)
      for (std::size_t y = 0; y < s.h; ++y)
        for (std::size_t x = 0; x < s.w; ++x)
          small.at(c, z, y, x) = v.at(c, std::min(d.d - 1, z * d.d / s.d), std::min(d.h - 1, y * d.h / s.h),
                                      std::min(d.w - 1, x * d.w / s.w));
  auto src = [](double o, std::size_t n_in, std::size_t n_out) {
    return std::clamp((o + 0.5) * static_cast<double>(n_in) / static_cast<double>(n_out) - 0.5, 0.0,
                      static_cast<double>(n_in - 1));
  };
  for (std::size_t c = 0; c < v.channels; ++c)
    for (std::size_t z = 0; z < d.d; ++z)
      for (std::size_t y = 0; y < d.h; ++y)
        for (std::size_t x = 0; x < d.w; ++x) {
          const double sz = src(z, s.d, d.d), sy = src(y, s.h, d.h), sx = src(x, s.w, d.w);
          const std::size_t z0 = static_cast<std::size_t>(sz), y0 = static_cast<std::size_t>(sy),
                            x0 = static_cast<std::size_t>(sx);
          const std::size_t z1 = std::min(z0 + 1, s.d - 1), y1 = std::min(y0 + 1, s.h - 1),
                            x1 = std::min(x0 + 1, s.w - 1);
          const double fz = sz - z0, fy = sy - y0, fx = sx - x0;
          auto at = [&](std::size_t a, std::size_t b, std::size_t e) { return double(small.at(c, a, b, e)); };
          const double c0 = (at(z0, y0, x0) * (1 - fx) + at(z0, y0, x1) * fx) * (1 - fy) +
                            (at(z0, y1, x0) * (1 - fx) + at(z0, y1, x1) * fx) * fy;
          const double c1 = (at(z1, y0, x0) * (1 - fx) + at(z1, y0, x1) * fx) * (1 - fy) +
                            (at(z1, y1, x0) * (1 - fx) + at(z1, y1, x1) * fx) * fy;
          v.at(c, z, y, x) = static_cast<float>(c0 * (1 - fz) + c1 * fz);
        }
}

// Gamma on per-channel min-max normalized intensities, mapped back to the
// original range.
inline void gamma(Volume& v, double g) {
  const std::size_t n = v.dims.voxels();
  for (std::size_t c = 0; c < v.channels; ++c) {
    auto first = v.data.begin() + c * n, last = first + n;
    const double lo = *std::min_element(first, last), hi = *std::max_element(first, last);
    const double range = hi - lo;
    if (!(range > 0.0)) continue;
    for (auto it = first; it != last; ++it) {
      const double u = (static_cast<double>(*it) - lo) / range;
      *it = static_cast<float>(std::pow(u, g) * range + lo);
    }
  }
}

}  // namespace aug

inline std::pair<Volume, LabelMap> augment(Volume v, LabelMap l, const AugmentConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  if (!same_geometry(v, l)) throw DimensionError("augment: image " + v.dims.str() + " vs label " + l.dims.str());
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto fires = [&](double p) { return p > 0.0 && unit(rng) < p; };
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  for (int axis = 0; axis < 3; ++axis)
    if (fires(cfg.p_flip)) aug::flip(v, l, axis);
  const std::array<std::size_t, 3> ext{v.dims.d, v.dims.h, v.dims.w};
  const std::array<std::array<int, 2>, 3> planes{{{1, 2}, {0, 2}, {0, 1}}};
  for (auto [a, b] : planes)
    if (ext[a] == ext[b] && fires(cfg.p_rot90)) {
      const int turns = 1 + static_cast<int>(unit(rng) * 3.0) % 3;
      for (int t = 0; t < turns; ++t) aug::rot90(v, l, a, b);
    }
  if (fires(cfg.p_rotate)) aug::rotate_hw(v, l, uniform(-cfg.max_angle, cfg.max_angle));
  if (fires(cfg.p_scale)) aug::scale(v, l, uniform(cfg.scale_min, cfg.scale_max));
  if (fires(cfg.p_noise)) aug::add_noise(v, uniform(0.0, cfg.noise_sigma_max), rng);
  if (fires(cfg.p_blur)) aug::gaussian_blur(v, uniform(cfg.blur_sigma_min, cfg.blur_sigma_max));
  if (fires(cfg.p_jitter))
    aug::jitter(v, uniform(cfg.brightness_min, cfg.brightness_max), uniform(cfg.contrast_min, cfg.contrast_max));
  if (fires(cfg.p_lowres)) aug::low_resolution(v, uniform(cfg.lowres_min, cfg.lowres_max));
  if (fires(cfg.p_gamma)) aug::gamma(v, uniform(cfg.gamma_min, cfg.gamma_max));
  return {std::move(v), std::move(l)};
}

}  // namespace transunet
