#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "clca/model.hpp"

namespace clca {

struct GradCheckOptions {
  double tolerance = 1e-3;
  double h = 1e-4;
  std::uint64_t seed = 0;
  std::size_t batch = 2;
  double init_noise = 0.1;                 // added to every parameter so no path is zeroed out
  std::size_t max_entries_per_param = 0;   // 0: every entry
  std::vector<std::string> only;           // parameter-name prefixes; empty: all
  double error_floor = 1e-6;               // denominator floor for near-zero gradients
  // Applied to the logits before the loss; used to inject faulty ops in tests.
  std::function<Var<double>(Var<double>)> logits_hook;
};

struct GradCheckEntry {
  std::string name;
  std::size_t numel = 0;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  double max_abs_grad = 0.0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  bool passed = true;
  double worst = 0.0;
  std::size_t checked = 0;
  double seconds = 0.0;
};

inline double gradcheck_relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

inline nlohmann::json to_json(const GradCheckReport& r, double tolerance) {
  nlohmann::json params = nlohmann::json::array();
  for (const auto& e : r.entries) {
    params.push_back({{"name", e.name},
                      {"numel", e.numel},
                      {"checked", e.checked},
                      {"max_rel_error", e.max_rel_error},
                      {"max_abs_grad", e.max_abs_grad},
                      {"passed", e.passed}});
  }
  return {{"result", r.passed ? "PASS" : "FAIL"}, {"tolerance", tolerance}, {"worst_rel_error", r.worst},
          {"entries_checked", r.checked},         {"seconds", r.seconds},   {"parameters", params}};
}

// Central-difference check of every parameter gradient of a 64-bit model on
// a random batch. Token selections are recorded once and then held fixed, so
// the loss is smooth in the parameters. Batch norm runs in eval mode with
// randomised running statistics.
inline GradCheckReport grad_check(const ModelConfig& cfg, const GradCheckOptions& opt = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  VitClca<double> model(cfg, opt.seed);
  std::mt19937_64 rng(opt.seed ^ 0x5eedull);
  std::normal_distribution<double> noise(0.0, opt.init_noise);
  for (auto& p : model.params())
    for (auto& v : p.value.storage()) v += noise(rng);
  for (auto& [name, t] : model.buffers()) {
    const bool var = name.find("running_var") != std::string::npos;
    std::uniform_real_distribution<double> u(0.5, 1.5);
    for (auto& v : t->storage()) v = var ? u(rng) : noise(rng);
  }
  const Tensor<double> images =
      Tensor<double>::randn({opt.batch, cfg.in_channels, cfg.image_side, cfg.image_side}, rng);
  std::vector<std::uint32_t> labels(opt.batch);
  for (auto& l : labels) l = static_cast<std::uint32_t>(rng() % cfg.num_classes);

  std::map<std::size_t, KeptIndices> plan;
  {
    Tape<double> probe(false);
    plan = model.forward(probe, images, ops::NormMode::eval).trace.selection();
  }
  auto loss_on = [&](Tape<double>& tape) {
    Var<double> logits = model.forward(tape, images, ops::NormMode::eval, plan).logits;
    if (opt.logits_hook) logits = opt.logits_hook(logits);
    return ops::cross_entropy(logits, labels);
  };
  // Unperturbed passes stopped before each block: a perturbation inside
  // block l only needs blocks l..depth and the head recomputed.
  using Pass = typename VitClca<double>::Pass;
  Tape<double> prefix(false);
  std::vector<Pass> resume;
  {
    ForwardOptions fo;
    fo.fixed_selection = &plan;
    Pass pass = model.begin(prefix, images);
    resume.push_back(pass);
    while (pass.next_block <= cfg.depth) {
      model.step(prefix, pass, fo);
      resume.push_back(pass);
    }
  }
  const std::size_t base = prefix.size();
  auto loss_from = [&](std::size_t first_block) {
    ForwardOptions fo;
    fo.fixed_selection = &plan;
    Pass pass = resume.at(first_block - 1);
    while (pass.next_block <= cfg.depth) model.step(prefix, pass, fo);
    Var<double> logits = model.finish(prefix, std::move(pass), ops::NormMode::eval).logits;
    if (opt.logits_hook) logits = opt.logits_hook(logits);
    const double loss = ops::cross_entropy(logits, labels).value()[0];
    prefix.truncate(base);
    return loss;
  };
  auto loss_value = [&](const std::string& name) {
    if (name.rfind("blocks.", 0) == 0) return loss_from(std::stoul(name.substr(7)) + 1);
    if (name.rfind("norm.", 0) == 0 || name.rfind("head.", 0) == 0 || name.rfind("cla.", 0) == 0)
      return loss_from(cfg.depth + 1);
    Tape<double> tape(false);
    return loss_on(tape).value()[0];
  };

  model.params().zero_grad();
  {
    Tape<double> tape;
    tape.backward(loss_on(tape));
  }

  GradCheckReport report;
  for (auto& p : model.params()) {
    if (!opt.only.empty() && std::none_of(opt.only.begin(), opt.only.end(), [&](const std::string& pre) {
          return p.name.rfind(pre, 0) == 0;
        }))
      continue;
    GradCheckEntry e;
    e.name = p.name;
    e.numel = p.value.numel();
    std::vector<std::size_t> idx(e.numel);
    std::iota(idx.begin(), idx.end(), 0);
    if (opt.max_entries_per_param && idx.size() > opt.max_entries_per_param) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(opt.max_entries_per_param);
      std::sort(idx.begin(), idx.end());
    }
    const Tensor<double> analytic = p.grad;
    e.max_abs_grad = analytic.max_abs();
    for (std::size_t j : idx) {
      const double orig = p.value[j];
      p.value[j] = orig + opt.h;
      const double up = loss_value(p.name);
      p.value[j] = orig - opt.h;
      const double down = loss_value(p.name);
      p.value[j] = orig;
      const double numeric = (up - down) / (2 * opt.h);
      e.max_rel_error = std::max(e.max_rel_error, gradcheck_relative_error(analytic[j], numeric, opt.error_floor));
    }
    e.checked = idx.size();
    e.passed = e.max_rel_error < opt.tolerance;
    report.passed = report.passed && e.passed;
    report.worst = std::max(report.worst, e.max_rel_error);
    report.checked += e.checked;
    report.entries.push_back(std::move(e));
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

// Configuration used by the acceptance check: four blocks, one reduction.
inline ModelConfig gradcheck_tiny_config() {
  ModelConfig c;
  c.image_side = 32;
  c.patch_size = 8;
  c.width = 32;
  c.depth = 4;
  c.heads = 2;
  c.reduction_layers = {2};
  c.recovery_layers = {2, 3};
  c.keep_rate = 0.5;
  c.dwg = 2;
  c.num_classes = 4;
  return c;
}

}  // namespace clca
