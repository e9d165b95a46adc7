// SPDX-License-Identifier: Apache-2.0
//
// Synthetic nested-blob volumes. Each blob is an ellipsoid whose outer shell
// is labeled 2 and whose concentric inner core (scaled by `inner_ratio`) is
// labeled 1. Intensities: smooth background + per-label offsets + noise.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

#include "transunet/errors.hpp"
#include "transunet/volume.hpp"

namespace transunet {

struct SynthSpec {
  std::uint64_t seed = 0;
  Dims dims{32, 32, 32};
  std::size_t channels = 1;
  Spacing spacing{1.0, 1.0, 1.0};
  std::size_t min_blobs = 1, max_blobs = 2;
  double min_radius = 5.0, max_radius = 9.0;  // voxels, per semi-axis
  double inner_ratio = 0.5;
  double noise_sigma = 0.1;
  double background_amplitude = 0.2;
  double shell_offset = 1.0;  // label 2
  double core_offset = 2.0;   // label 1

  void validate() const {
    if (min_blobs > max_blobs) throw ConfigError("synth: min_blobs exceeds max_blobs");
    if (!(min_radius > 0.0) || min_radius > max_radius) throw ConfigError("synth: invalid radius range");
    if (!(inner_ratio > 0.0 && inner_ratio < 1.0)) throw ConfigError("synth: inner_ratio must lie in (0, 1)");
    if (noise_sigma < 0.0) throw ConfigError("synth: noise_sigma must be non-negative");
    if (channels == 0 || dims.voxels() == 0) throw ConfigError("synth: empty geometry");
    const double extent = 2.0 * std::ceil(max_radius) + 1.0;
    if (max_blobs > 0 && (extent > static_cast<double>(dims.d) || extent > static_cast<double>(dims.h) ||
                          extent > static_cast<double>(dims.w)))
      throw ConfigError("synth: blob radius " + std::to_string(max_radius) + " does not fit inside " + dims.str());
  }
};

struct Blob {
  std::array<double, 3> center;  // z, y, x (voxel units)
  std::array<double, 3> radii;   // semi-axes of the outer shell
};

struct SynthCase {
  Volume image;
  LabelMap label;
  std::vector<Blob> blobs;
};

inline bool inside_ellipsoid(const Blob& b, double scale, double z, double y, double x) {
  const double dz = (z - b.center[0]) / (b.radii[0] * scale);
  const double dy = (y - b.center[1]) / (b.radii[1] * scale);
  const double dx = (x - b.center[2]) / (b.radii[2] * scale);
  return dz * dz + dy * dy + dx * dx <= 1.0;
}

// Deterministic in (spec.seed, index).
inline SynthCase generate_case(const SynthSpec& spec, std::size_t index) {
  spec.validate();
  std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                    static_cast<std::uint32_t>(index), 0x7u};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  SynthCase out{Volume(spec.channels, spec.dims, spec.spacing), LabelMap(spec.dims, spec.spacing), {}};
  const std::size_t n_blobs = std::uniform_int_distribution<std::size_t>(spec.min_blobs, spec.max_blobs)(rng);
  const std::array<double, 3> ext{double(spec.dims.d), double(spec.dims.h), double(spec.dims.w)};
  for (std::size_t b = 0; b < n_blobs; ++b) {
    Blob blob{};
    for (int a = 0; a < 3; ++a) {
      blob.radii[a] = spec.min_radius + unit(rng) * (spec.max_radius - spec.min_radius);
      const double lo = blob.radii[a], hi = ext[a] - 1.0 - blob.radii[a];
      blob.center[a] = lo + unit(rng) * std::max(0.0, hi - lo);
    }
    out.blobs.push_back(blob);
  }

  const Dims& d = spec.dims;
  for (std::size_t z = 0; z < d.d; ++z)
    for (std::size_t y = 0; y < d.h; ++y)
      for (std::size_t x = 0; x < d.w; ++x) {
        std::uint8_t l = 0;
        for (const auto& blob : out.blobs) {
          if (inside_ellipsoid(blob, spec.inner_ratio, double(z), double(y), double(x))) {
            l = 1;
            break;
          }
          if (inside_ellipsoid(blob, 1.0, double(z), double(y), double(x))) l = 2;
        }
        out.label.at(z, y, x) = l;
      }

  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t c = 0; c < spec.channels; ++c) {
    std::array<double, 3> phase{unit(rng), unit(rng), unit(rng)};
    const double gain = 1.0 + 0.25 * static_cast<double>(c);
    for (std::size_t z = 0; z < d.d; ++z)
      for (std::size_t y = 0; y < d.h; ++y)
        for (std::size_t x = 0; x < d.w; ++x) {
          const double bg = spec.background_amplitude *
                            (std::sin(2.0 * std::numbers::pi * (double(z) / ext[0] + phase[0])) +
                             std::sin(2.0 * std::numbers::pi * (double(y) / ext[1] + phase[1])) +
                             std::sin(2.0 * std::numbers::pi * (double(x) / ext[2] + phase[2]))) /
                            3.0;
          const auto l = out.label.at(z, y, x);
          const double offset = l == 1 ? spec.core_offset : l == 2 ? spec.shell_offset : 0.0;
          out.image.at(c, z, y, x) = static_cast<float>(bg + gain * offset + spec.noise_sigma * noise(rng));
        }
  }
  return out;
}

inline std::vector<SynthCase> generate_synthetic(const SynthSpec& spec, std::size_t n) {
  if (n == 0) throw ConfigError("synth: case count must be at least 1");
  std::vector<SynthCase> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(generate_case(spec, i));
  return out;
}

inline void write_synthetic_dataset(const std::filesystem::path& root, const SynthSpec& spec, std::size_t n) {
  auto cases = generate_synthetic(spec, n);
  for (std::size_t i = 0; i < cases.size(); ++i) save_case(root / case_name(i), cases[i].image, cases[i].label);
}

}  // namespace transunet
