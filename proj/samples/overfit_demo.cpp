// SPDX-License-Identifier: Apache-2.0
//
// Trains a small query-decoder model on two synthetic 16^3 cases and scores
// its predictions on the training data.
//
//   overfit_demo [iterations] [variant]
#include <cstdio>
#include <cstdlib>
#include <string>

#include "transunet.hpp"

int main(int argc, char** argv) {
  using namespace transunet;
  RunConfig cfg;
  cfg.max_iters = argc > 1 ? std::strtoul(argv[1], nullptr, 10) : 150;
  cfg.model.variant = parse_variant(argc > 2 ? argv[2] : "dec");
  cfg.model.input = {16, 16, 16};
  cfg.model.unet.widths = {4, 8, 16};
  cfg.model.vit.dim = 16;
  cfg.model.vit.heads = 2;
  cfg.model.vit.layers = 1;
  cfg.model.vit.mlp_hidden = 32;
  cfg.model.finalize();
  cfg.augment = false;
  cfg.log_every = 25;
  cfg.out_dir = "overfit_demo_run";

  SynthSpec spec;
  spec.dims = cfg.model.input;
  spec.min_radius = 3.0;
  spec.max_radius = 5.0;
  std::vector<Case> cases;
  for (std::size_t i = 0; i < 2; ++i) {
    auto s = generate_case(spec, i);
    cases.push_back({case_name(i), s.image, s.label});
  }

  train(cfg, cases);
  const auto model = load_model(std::filesystem::path(cfg.out_dir) / "checkpoint.tuc");
  std::vector<CaseMetrics> rows;
  for (const auto& c : cases)
    rows.push_back(evaluate_case(c.name, predict(model.config.model, model.weights, c.image), c.label,
                                 cfg.model.num_classes));
  std::fputs(to_table(summarize(rows, cfg.model.num_classes)).c_str(), stdout);
  return 0;
}
