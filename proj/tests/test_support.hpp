// SPDX-License-Identifier: Apache-2.0
//
// Shared fixtures for the test suites.
#pragma once

#include <unistd.h>

#include <filesystem>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "transunet.hpp"
#include "transunet/cli.hpp"

namespace transunet::testing {

inline Tensor<double> random_tensor(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(numel(s));
  for (auto& x : v) x = u(rng);
  return Tensor<double>(std::move(s), std::move(v));
}

inline Mask random_mask(const Dims& d, double density, std::mt19937_64& rng) {
  std::bernoulli_distribution b(density);
  Mask m(d.voxels());
  for (auto& x : m) x = b(rng);
  return m;
}

// Blobby mask: random boxes, so components have nontrivial extent.
inline Mask random_boxes(const Dims& d, std::size_t boxes, std::mt19937_64& rng) {
  Mask m(d.voxels(), 0);
  std::uniform_int_distribution<std::size_t> zd(0, d.d - 1), yd(0, d.h - 1), xd(0, d.w - 1), ext(0, 3);
  for (std::size_t b = 0; b < boxes; ++b) {
    const std::size_t z0 = zd(rng), y0 = yd(rng), x0 = xd(rng), ez = ext(rng), ey = ext(rng), ex = ext(rng);
    for (std::size_t z = z0; z < std::min(d.d, z0 + ez + 1); ++z)
      for (std::size_t y = y0; y < std::min(d.h, y0 + ey + 1); ++y)
        for (std::size_t x = x0; x < std::min(d.w, x0 + ex + 1); ++x) m[d.index(z, y, x)] = 1;
  }
  return m;
}

// Fresh directory under the system temp path, removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    static std::size_t counter = 0;
    path = std::filesystem::temp_directory_path() /
           ("transunet_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

// Small run configuration that trains in well under a second per step.
inline RunConfig tiny_run_config(Variant v = Variant::kDec) {
  RunConfig cfg;
  cfg.model.variant = v;
  cfg.model.input = {8, 8, 8};
  cfg.model.unet.widths = {2, 4, 4};
  cfg.model.vit.dim = 8;
  cfg.model.vit.heads = 2;
  cfg.model.vit.layers = 1;
  cfg.model.vit.mlp_hidden = 8;
  cfg.model.qdec.num_queries = 4;
  cfg.model.qdec.dim = 4;
  cfg.model.qdec.key_dim = 4;
  cfg.model.finalize();
  cfg.max_iters = 6;
  cfg.log_every = 0;
  cfg.augment = false;
  return cfg;
}

inline std::vector<Case> tiny_cases(std::size_t n, const Dims& d = {8, 8, 8}, std::uint64_t seed = 7) {
  SynthSpec spec;
  spec.seed = seed;
  spec.dims = d;
  spec.min_radius = 1.5;
  spec.max_radius = 3.0;
  std::vector<Case> out;
  for (std::size_t i = 0; i < n; ++i) {
    auto s = generate_case(spec, i);
    out.push_back({case_name(i), s.image, s.label});
  }
  return out;
}

// Seeded synth -> train -> infer -> eval through the command line, inside
// `dir`. Returns the record file of the evaluation report.
inline std::string cli_pipeline(const std::filesystem::path& dir, Variant v, std::uint64_t seed) {
  namespace fs = std::filesystem;
  auto cfg = tiny_run_config(v);
  cfg.seed = seed;
  cfg.augment = true;
  io_detail::write_file(dir / "run.cfg", to_text(cfg));
  const auto d = (dir / "data").string(), run = (dir / "run").string(), pred = (dir / "pred").string();
  const auto cfg_path = (dir / "run.cfg").string(), s = std::to_string(seed);
  std::ostringstream sink;
  auto run_cmd = [&](std::vector<std::string> args) {
    args.insert(args.begin(), "transunet");
    if (int rc = run_cli(args, sink, sink); rc != 0)
      throw std::runtime_error("command failed with exit " + std::to_string(rc) + ": " + sink.str());
  };
  run_cmd({"synth", "--out", d, "--count", "2", "--config", cfg_path, "--seed", s});
  run_cmd({"train", "--config", cfg_path, "--data", d, "--out", run, "--quiet"});
  run_cmd({"infer", "--checkpoint", run + "/checkpoint.tuc", "--input", d, "--out", pred});
  run_cmd({"eval", "--pred", pred, "--gt", d, "--out", (dir / "report").string()});
  return io_detail::read_file(dir / "report.jsonl");
}

}  // namespace transunet::testing
