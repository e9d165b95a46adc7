// SPDX-License-Identifier: Apache-2.0
//
// Training loop: deterministic batch stream, deep-supervised loss, SGD with
// Nesterov momentum under a polynomial learning-rate decay, global-norm
// gradient clipping, and periodic checkpoints.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "transunet/augment.hpp"
#include "transunet/checkpoint.hpp"
#include "transunet/config.hpp"
#include "transunet/model.hpp"

namespace transunet {

// base * (1 - t/T)^power; t beyond T clamps to 0.
inline double poly_lr(std::size_t t, std::size_t t_max, double base, double power = 0.9) {
  if (t_max == 0 || t >= t_max) return 0.0;
  return base * std::pow(1.0 - static_cast<double>(t) / static_cast<double>(t_max), power);
}

struct TrainRecord {
  std::size_t iteration = 0;
  double lr = 0.0;
  double total = 0.0, ce = 0.0, dice = 0.0, cls = 0.0;
  double grad_norm = 0.0;
};

inline std::string format_record(const TrainRecord& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu\t%.17g\t%.9g\t%.9g\t%.9g\t%.9g\t%.9g", r.iteration, r.lr, r.total, r.ce, r.dice,
                r.cls, r.grad_norm);
  return buf;
}

inline constexpr const char* kTrainLogHeader = "iteration\tlr\ttotal\tce\tdice\tcls\tgrad_norm";

// SGD with Nesterov momentum (v <- mu v + g; w <- w - lr (g + mu v)) and L2
// weight decay folded into g.
struct Sgd {
  double momentum = 0.99;
  double weight_decay = 0.0;
  Parameters<float> velocity;

  void init(const Parameters<float>& params) {
    velocity = Parameters<float>();
    for (const auto& [name, t] : params.map()) velocity.add(name, Tensor<float>::zeros(t.shape()));
  }

  void step(Parameters<float>& params, const std::map<std::string, std::vector<float>>& grads, double lr) {
    for (const auto& [name, t] : params.map()) {
      const auto& g = grads.at(name);
      const auto& v = velocity[name];
      std::vector<float> nv(t.size()), nw(t.size());
      for (std::size_t i = 0; i < t.size(); ++i) {
        const double gi = static_cast<double>(g[i]) + weight_decay * static_cast<double>(t[i]);
        const double vi = momentum * static_cast<double>(v[i]) + gi;
        nv[i] = static_cast<float>(vi);
        nw[i] = static_cast<float>(static_cast<double>(t[i]) - lr * (gi + momentum * vi));
      }
      velocity.set(name, Tensor<float>(t.shape(), std::move(nv)));
      params.set(name, Tensor<float>(t.shape(), std::move(nw)));
    }
  }
};

// Scales gradients in place so their global L2 norm is at most `max_norm`.
// Returns the norm before clipping.
inline double clip_global_norm(std::map<std::string, std::vector<float>>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [_, g] : grads)
    for (float x : g) sq += static_cast<double>(x) * x;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& [_, g] : grads)
      for (auto& x : g) x = static_cast<float>(x * s);
  }
  return norm;
}

// Case index of the k-th sample of the stream: epochs are independent seeded
// permutations of the dataset.
inline std::size_t stream_case(std::uint64_t seed, std::size_t k, std::size_t n_cases) {
  const std::size_t epoch = k / n_cases;
  std::vector<std::size_t> perm(n_cases);
  std::iota(perm.begin(), perm.end(), 0);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), 0x5eedu};
  std::mt19937_64 rng(seq);
  std::shuffle(perm.begin(), perm.end(), rng);
  return perm[k % n_cases];
}

inline std::mt19937_64 sample_rng(std::uint64_t seed, std::size_t k) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(k), static_cast<std::uint32_t>(k >> 32), 0xa06u};
  return std::mt19937_64(seq);
}

struct StepResult {
  TrainRecord record;
  std::vector<MatchAssignment> assignments;
};

class Trainer {
 public:
  using Observer = AttentionObserver<float>;

  Trainer(RunConfig cfg, std::vector<Case> cases) : cfg_(std::move(cfg)), cases_(std::move(cases)) {
    cfg_.validate();
    if (cases_.empty()) throw ConfigError("training dataset is empty");
    for (const auto& c : cases_) {
      if (!(c.image.dims == cfg_.model.input))
        throw ConfigError("case " + c.name + " has dims " + c.image.dims.str() + ", config expects " +
                          cfg_.model.input.str());
      if (c.image.channels != cfg_.model.unet.in_channels)
        throw ConfigError("case " + c.name + " has " + std::to_string(c.image.channels) + " channels, config expects " +
                          std::to_string(cfg_.model.unet.in_channels));
      c.label.validate(static_cast<int>(cfg_.model.num_classes));
    }
    params_ = init_model<float>(cfg_.model, cfg_.seed);
    opt_.momentum = cfg_.momentum;
    opt_.weight_decay = cfg_.weight_decay;
    opt_.init(params_);
  }

  const RunConfig& config() const { return cfg_; }
  const Parameters<float>& params() const { return params_; }
  std::size_t iteration() const { return iteration_; }
  bool done() const { return iteration_ >= cfg_.max_iters; }
  void set_observer(Observer obs) { observer_ = std::move(obs); }

  // One optimizer step on the next batch of the stream.
  StepResult step() {
    if (done()) throw ContractError("training already reached max_iters");
    const std::size_t t = iteration_;
    StepResult res;
    res.record.iteration = t;
    res.record.lr = poly_lr(t, cfg_.max_iters, cfg_.base_lr, cfg_.poly_power);
    std::map<std::string, std::vector<float>> grads;
    for (const auto& [name, p] : params_.map()) grads[name].assign(p.size(), 0.0f);
    const double inv_b = 1.0 / static_cast<double>(cfg_.batch_size);
    for (std::size_t b = 0; b < cfg_.batch_size; ++b) {
      const std::size_t k = t * cfg_.batch_size + b;
      const Case& c = cases_[stream_case(cfg_.seed, k, cases_.size())];
      Volume image = c.image;
      LabelMap label = c.label;
      if (cfg_.augment) {
        auto rng = sample_rng(cfg_.seed, k);
        std::tie(image, label) = transunet::augment(image, label, AugmentConfig{}, rng);
      }
      Tape<float> tape;
      auto watched = params_.watch(tape);
      auto out = forward(cfg_.model, watched, model_input<float>(image), observer_ ? &observer_ : nullptr);
      MatchAssignment assignment;
      auto loss = model_loss(cfg_.model, out, label, cfg_.loss, &assignment);
      loss.check_identity(1e-5);
      const double total = loss.total.item();
      if (!std::isfinite(total))
        throw NumericError("non-finite loss at iteration " + std::to_string(t) + " (case " + c.name + ")");
      tape.backward(loss.total);
      for (const auto& [name, w] : watched.map()) {
        auto g = tape.grad(w);
        auto& acc = grads[name];
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += static_cast<float>(g[i] * inv_b);
      }
      res.record.total += total * inv_b;
      res.record.ce += static_cast<double>(loss.ce.item()) * inv_b;
      res.record.dice += static_cast<double>(loss.dice.item()) * inv_b;
      res.record.cls += static_cast<double>(loss.cls.item()) * inv_b;
      if (cfg_.model.uses_queries()) res.assignments.push_back(std::move(assignment));
    }
    for (const auto& [_, g] : grads)
      for (float x : g)
        if (!std::isfinite(x)) throw NumericError("non-finite gradient at iteration " + std::to_string(t));
    res.record.grad_norm = clip_global_norm(grads, cfg_.grad_clip);
    opt_.step(params_, grads, res.record.lr);
    ++iteration_;
    return res;
  }

  Checkpoint checkpoint() const {
    Checkpoint ck;
    ck.iteration = iteration_;
    ck.fingerprint = fingerprint(cfg_);
    ck.config = config_entries(cfg_);
    ck.weights = params_;
    ck.optimizer = opt_.velocity;
    return ck;
  }

  // Resumes from a checkpoint written under the same training identity.
  void restore(const Checkpoint& ck) {
    const auto saved = ck.run_config();
    if (ck.fingerprint != fingerprint(cfg_)) {
      std::string msg = "checkpoint was written under a different configuration (fingerprint " + ck.fingerprint +
                        " vs " + fingerprint(cfg_) + ")";
      for (const auto& d : fingerprint_diff(saved, cfg_)) msg += "\n  " + d;
      throw ConfigError(msg);
    }
    if (ck.iteration > cfg_.max_iters) throw ConfigError("checkpoint iteration exceeds max_iters");
    restore_weights(params_, ck.weights);
    restore_weights(opt_.velocity, ck.optimizer);
    iteration_ = ck.iteration;
  }

 private:
  RunConfig cfg_;
  std::vector<Case> cases_;
  Parameters<float> params_;
  Sgd opt_;
  std::size_t iteration_ = 0;
  Observer observer_;
};

struct TrainOptions {
  std::filesystem::path resume;                         // empty: fresh start
  std::function<void(const TrainRecord&)> on_record;    // called every iteration
  bool quiet = false;
};

// Runs to max_iters, writing <out_dir>/train_log.tsv and
// <out_dir>/checkpoint.tuc. On a numeric failure the last good state is
// saved before the error propagates.
inline std::vector<TrainRecord> train(const RunConfig& cfg, std::vector<Case> cases, const TrainOptions& opts = {}) {
  namespace fs = std::filesystem;
  Trainer trainer(cfg, std::move(cases));
  finite_checks().store(cfg.finite_checks);
  std::vector<std::string> log_lines;
  const fs::path out = cfg.out_dir;
  fs::create_directories(out);
  const auto log_path = out / "train_log.tsv";
  const auto ckpt_path = out / "checkpoint.tuc";
  if (!opts.resume.empty()) {
    trainer.restore(load_checkpoint(opts.resume));
    std::ifstream in(log_path);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      const auto iter = std::stoull(line.substr(0, line.find('\t')));
      if (iter < trainer.iteration()) log_lines.push_back(line);
    }
  }
  auto flush_log = [&] {
    std::ofstream f(log_path, std::ios::trunc);
    f << kTrainLogHeader << "\n";
    for (const auto& l : log_lines) f << l << "\n";
  };
  std::vector<TrainRecord> records;
  while (!trainer.done()) {
    StepResult r;
    try {
      r = trainer.step();
    } catch (const NumericError&) {
      save_checkpoint(ckpt_path, trainer.checkpoint());
      flush_log();
      throw;
    }
    records.push_back(r.record);
    log_lines.push_back(format_record(r.record));
    if (opts.on_record) opts.on_record(r.record);
    const std::size_t done = trainer.iteration();
    if (!opts.quiet && cfg.log_every && (done % cfg.log_every == 0 || done == 1))
      std::fprintf(stderr, "iter %zu  lr %.6g  loss %.6f (ce %.4f dice %.4f cls %.4f)  |g| %.3f\n", r.record.iteration,
                   r.record.lr, r.record.total, r.record.ce, r.record.dice, r.record.cls, r.record.grad_norm);
    if (cfg.checkpoint_every && done % cfg.checkpoint_every == 0 && !trainer.done()) {
      save_checkpoint(ckpt_path, trainer.checkpoint());
      flush_log();
    }
  }
  save_checkpoint(ckpt_path, trainer.checkpoint());
  flush_log();
  return records;
}

// Model configuration and weights from a checkpoint, ready for inference.
struct LoadedModel {
  RunConfig config;
  Parameters<float> weights;
};

inline LoadedModel load_model(const std::filesystem::path& path) {
  auto ck = load_checkpoint(path);
  LoadedModel m{ck.run_config(), Parameters<float>()};
  m.config.validate();
  m.weights = init_model<float>(m.config.model, m.config.seed);
  restore_weights(m.weights, ck.weights);
  return m;
}

}  // namespace transunet
