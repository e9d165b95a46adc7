// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. Subcommands:
//
//   synth       write a synthetic dataset
//   train       train from a config file and a dataset directory
//   infer       predict label maps with a checkpoint
//   eval        score predicted label maps against ground truth
//   gradcheck   finite-difference gradient table
//   dump-trace  write the per-iteration coarse masks of the query decoder
//
// Exit codes: 0 success, 1 usage, 2 data/config/format error, 3 numeric failure.
#pragma once

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "transunet/config.hpp"
#include "transunet/gradcheck_suite.hpp"
#include "transunet/report.hpp"
#include "transunet/synth.hpp"
#include "transunet/trainer.hpp"

namespace transunet {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitNumeric = 3 };

// Linear resampling of every channel to `target`; spacing scales with extent.
inline Volume resample_volume(const Volume& v, const Dims& target) {
  Tensor<float> t(Shape{v.channels, v.dims.d, v.dims.h, v.dims.w}, v.data);
  auto r = ops::resize3d(t, target.d, target.h, target.w);
  Volume out(v.channels, target,
             {v.spacing[0] * double(v.dims.d) / double(target.d), v.spacing[1] * double(v.dims.h) / double(target.h),
              v.spacing[2] * double(v.dims.w) / double(target.w)});
  out.data.assign(r.data().begin(), r.data().end());
  return out;
}

// Images to run inference on: a dataset root, a single case directory, or an
// image file.
inline std::vector<std::pair<std::string, Volume>> inference_inputs(const std::filesystem::path& path) {
  namespace fs = std::filesystem;
  std::vector<std::pair<std::string, Volume>> out;
  if (fs::is_regular_file(path)) {
    out.emplace_back(path.stem().string(), load_volume(path));
  } else if (fs::is_regular_file(path / "image.vol")) {
    out.emplace_back(path.filename().string(), load_volume(path / "image.vol"));
  } else {
    for (const auto& c : list_cases(path)) out.emplace_back(c.filename().string(), load_volume(c / "image.vol"));
    if (out.empty()) throw FormatError(path.string() + " contains no cases");
  }
  return out;
}

namespace cli_detail {

struct Options {
  std::string config_file, data_dir, out, resume, decoder, checkpoint, input, pred, gt, trace_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> refine_iters, max_iters;
  std::size_t count = 4, size = 32, num_classes = 2, seeds = 20;
  int connectivity = 26;
  bool penalize_fp = false, resample = false, all = false, quiet = false;
};

inline RunConfig run_config(const Options& o) {
  RunConfig cfg = o.config_file.empty() ? RunConfig{} : load_config(o.config_file);
  apply_env_overrides(cfg);
  if (!o.data_dir.empty()) cfg.data_dir = o.data_dir;
  if (!o.out.empty()) cfg.out_dir = o.out;
  if (o.seed) cfg.seed = *o.seed;
  if (o.refine_iters) set_config_value(cfg, "refine_iters", std::to_string(*o.refine_iters));
  if (o.max_iters) cfg.max_iters = *o.max_iters;
  if (o.decoder == "plain") {
    cfg.model.variant = Variant::kEnc;
  } else if (o.decoder == "query" && cfg.model.variant == Variant::kEnc) {
    cfg.model.variant = Variant::kDec;
  }
  cfg.model.finalize();
  cfg.validate();
  return cfg;
}

// Forward pass on one image, resampling to the model geometry when allowed.
inline std::pair<LabelMap, ForwardOutput<float>> run_model(const LoadedModel& m, const Volume& image, bool resample,
                                                           const std::string& name) {
  const auto& mc = m.config.model;
  if (image.channels != mc.unet.in_channels)
    throw InputError(name + ": image has " + std::to_string(image.channels) + " channels, model expects " +
                     std::to_string(mc.unet.in_channels));
  const bool fits = image.dims == mc.input;
  if (!fits && !resample)
    throw InputError(name + ": image " + image.dims.str() + " does not match the model geometry " + mc.input.str() +
                     " (pass --resample to resample)");
  const Volume x = fits ? image : resample_volume(image, mc.input);
  auto out = forward(mc, m.weights, model_input<float>(x));
  LabelMap labels = to_label_map(mc, out, x.spacing);
  if (!fits) {
    labels = downsample_nearest(labels, image.dims);
    labels.spacing = image.spacing;
  }
  return {std::move(labels), std::move(out)};
}

// <dir>/iter{t}.vol per refinement iteration plus fine.vol; one channel per query.
inline void write_trace(const std::filesystem::path& dir, const RefineResult<float>& r, const Dims& dims,
                        const Spacing& spacing) {
  std::filesystem::create_directories(dir);
  auto dump = [&](const std::filesystem::path& p, const CoarseMap<float>& z) {
    Volume v(z.probabilities.dim(0), dims, spacing);
    v.data.assign(z.probabilities.data().begin(), z.probabilities.data().end());
    save_volume(p, v);
  };
  for (std::size_t t = 0; t < r.trace.size(); ++t) dump(dir / ("iter" + std::to_string(t + 1) + ".vol"), r.trace[t]);
  dump(dir / "fine.vol", r.fine);
}

inline int cmd_synth(const Options& o, std::ostream& out) {
  SynthSpec spec;
  if (!o.config_file.empty()) {
    const auto cfg = load_config(o.config_file);
    spec.dims = cfg.model.input;
    spec.channels = cfg.model.unet.in_channels;
  } else {
    spec.dims = {o.size, o.size, o.size};
  }
  if (o.seed) spec.seed = *o.seed;
  // Blob radii are tuned for 32^3; scale them with the smallest extent.
  const double scale = static_cast<double>(std::min({spec.dims.d, spec.dims.h, spec.dims.w})) / 32.0;
  spec.min_radius *= scale;
  spec.max_radius *= scale;
  spec.validate();
  write_synthetic_dataset(o.out, spec, o.count);
  out << "wrote " << o.count << " cases (" << spec.dims.str() << ") to " << o.out << "\n";
  return kExitOk;
}

inline int cmd_train(const Options& o, std::ostream& out) {
  const auto cfg = run_config(o);
  auto cases = load_dataset(cfg.data_dir);
  TrainOptions opts;
  opts.resume = o.resume;
  opts.quiet = o.quiet;
  const auto records = train(cfg, std::move(cases), opts);
  if (!records.empty())
    out << "trained " << variant_name(cfg.model.variant) << " to iteration " << records.back().iteration + 1
        << ", final loss " << records.back().total << "\n";
  out << "checkpoint: " << (std::filesystem::path(cfg.out_dir) / "checkpoint.tuc").string() << "\n";
  return kExitOk;
}

inline int cmd_infer(const Options& o, std::ostream& out) {
  const auto model = load_model(o.checkpoint);
  if (!o.trace_dir.empty() && !model.config.model.uses_queries())
    throw ConfigError("--dump-trace needs a query-decoder model (variant dec or both)");
  std::filesystem::create_directories(o.out);
  for (const auto& [name, image] : inference_inputs(o.input)) {
    auto [labels, fwd] = run_model(model, image, o.resample, name);
    save_labels(std::filesystem::path(o.out) / (name + ".seg"), labels);
    if (!o.trace_dir.empty())
      write_trace(std::filesystem::path(o.trace_dir) / name, fwd.refined, fwd.dims[0], image.spacing);
    out << name << " -> " << (std::filesystem::path(o.out) / (name + ".seg")).string() << "\n";
  }
  return kExitOk;
}

inline int cmd_dump_trace(const Options& o, std::ostream& out) {
  const auto model = load_model(o.checkpoint);
  if (!model.config.model.uses_queries())
    throw ConfigError("dump-trace needs a query-decoder model (variant dec or both)");
  for (const auto& [name, image] : inference_inputs(o.input)) {
    auto [labels, fwd] = run_model(model, image, o.resample, name);
    write_trace(std::filesystem::path(o.out) / name, fwd.refined, fwd.dims[0], image.spacing);
    out << name << ": " << fwd.refined.trace.size() << " iterations -> " << (std::filesystem::path(o.out) / name).string()
        << "\n";
  }
  return kExitOk;
}

inline int cmd_eval(const Options& o, std::ostream& out) {
  MetricConfig mc;
  mc.connectivity = o.connectivity;
  mc.penalize_fp = o.penalize_fp;
  const auto rep = evaluate_cohort(o.pred, o.gt, o.num_classes, mc);
  if (!o.out.empty()) {
    const std::filesystem::path stem(o.out);
    if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());
    write_report(stem, rep);
  }
  out << to_table(rep);
  return rep.errors == 0 ? kExitOk : kExitData;
}

inline int cmd_gradcheck(const Options& o, std::ostream& out) {
  bool ok = true;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-20s %-9s %12s %12s  %s\n", "case", "kind", "err(f64)", "err(f32)", "status");
  out << buf;
  for (const auto& c : gradient_cases()) {
    if (c.composite && !o.all) continue;
    const auto r = run_grad_case(c, o.seeds);
    ok = ok && r.passed();
    char f32[32];
    if (r.err32 < 0) std::snprintf(f32, sizeof f32, "%12s", "-");
    else std::snprintf(f32, sizeof f32, "%12.3e", r.err32);
    std::snprintf(buf, sizeof buf, "%-20s %-9s %12.3e %s  %s\n", r.name.c_str(),
                  r.composite ? "composite" : "primitive", r.err64, f32, r.passed() ? "ok" : "FAIL");
    out << buf;
  }
  out << (ok ? "all gradients within tolerance\n" : "gradient check FAILED\n");
  return ok ? kExitOk : kExitNumeric;
}

}  // namespace cli_detail

// Runs the command line `args` (args[0] is the program name).
inline int run_cli(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  using namespace cli_detail;
  CLI::App app{"Volumetric segmentation toolkit", args.empty() ? "transunet" : args[0]};
  app.require_subcommand(1);
  Options o;

  auto add_seed = [&](CLI::App* s) { s->add_option("--seed", o.seed, "random seed"); };

  auto* synth = app.add_subcommand("synth", "write a synthetic dataset (case_####/{image.vol,label.seg})");
  synth->add_option("--out", o.out, "output dataset directory")->required();
  synth->add_option("--count", o.count, "number of cases")->check(CLI::PositiveNumber);
  synth->add_option("--size", o.size, "cube edge length in voxels")->check(CLI::PositiveNumber);
  synth->add_option("--config", o.config_file, "take dims and channels from a run config")->check(CLI::ExistingFile);
  add_seed(synth);

  auto* trn = app.add_subcommand("train", "train a model");
  trn->add_option("--config", o.config_file, "run config file (key: value)")->check(CLI::ExistingFile);
  trn->add_option("--data", o.data_dir, "dataset directory");
  trn->add_option("--out", o.out, "run directory (log and checkpoint)");
  trn->add_option("--decoder", o.decoder, "segmentation head")->check(CLI::IsMember({"plain", "query"}));
  trn->add_option("--refine-iters", o.refine_iters, "query refinement iterations T");
  trn->add_option("--max-iters", o.max_iters, "training iterations");
  trn->add_option("--resume", o.resume, "checkpoint to resume from")->check(CLI::ExistingFile);
  trn->add_flag("--quiet", o.quiet, "no progress output");
  add_seed(trn);

  auto* inf = app.add_subcommand("infer", "predict label maps");
  inf->add_option("--checkpoint", o.checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
  inf->add_option("--input", o.input, "dataset directory, case directory or image file")->required();
  inf->add_option("--out", o.out, "output directory for <case>.seg")->required();
  inf->add_option("--dump-trace", o.trace_dir, "also write per-iteration query masks here");
  inf->add_flag("--resample", o.resample, "resample inputs whose dims differ from the model");

  auto* ev = app.add_subcommand("eval", "score predictions against ground truth");
  ev->add_option("--pred", o.pred, "predicted label directory")->required();
  ev->add_option("--gt", o.gt, "ground-truth label directory")->required();
  ev->add_option("--connectivity", o.connectivity, "lesion connectivity")->check(CLI::IsMember({6, 18, 26}));
  ev->add_option("--num-classes", o.num_classes, "foreground classes K")->check(CLI::Range(1, 254));
  ev->add_option("--out", o.out, "report stem (writes <stem>.jsonl and <stem>.txt)");
  ev->add_flag("--penalize-fp", o.penalize_fp, "count unmatched predicted lesions as zero scores");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient check");
  gc->add_flag("--all", o.all, "include composite blocks");
  gc->add_option("--seeds", o.seeds, "random instances per case")->check(CLI::PositiveNumber);

  auto* dt = app.add_subcommand("dump-trace", "write per-iteration query masks");
  dt->add_option("--checkpoint", o.checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
  dt->add_option("--input", o.input, "dataset directory, case directory or image file")->required();
  dt->add_option("--out", o.out, "output directory")->required();
  dt->add_flag("--resample", o.resample, "resample inputs whose dims differ from the model");

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    if (!rev.empty()) rev.pop_back();
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    if (code != 0) err << app.help();
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (synth->parsed()) return cmd_synth(o, out);
    if (trn->parsed()) return cmd_train(o, out);
    if (inf->parsed()) return cmd_infer(o, out);
    if (ev->parsed()) return cmd_eval(o, out);
    if (gc->parsed()) return cmd_gradcheck(o, out);
    if (dt->parsed()) return cmd_dump_trace(o, out);
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}

}  // namespace transunet
