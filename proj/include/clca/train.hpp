#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "clca/checkpoint.hpp"
#include "clca/config.hpp"
#include "clca/dataset.hpp"
#include "clca/flops.hpp"
#include "clca/model.hpp"
#include "clca/optim.hpp"

namespace clca {

struct TrainConfig {
  std::size_t epochs = 50;
  double weight_decay = 0.05;
  std::size_t batch_size = 32;
  double base_lr = 5e-4;
  double min_lr = 1e-6;
  std::size_t warmup_epochs = 5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 0;          // model initialisation
  std::uint64_t shuffle_seed = 0;  // batch order
  double label_smoothing = 0.0;
  std::size_t eval_batch_size = 64;

  void validate(const ModelConfig& model) const {
    auto fail = [](const std::string& m) { throw ConfigError("invalid train config: " + m); };
    if (epochs < 1) fail("epochs must be at least 1");
    if (batch_size < 1 || eval_batch_size < 1) fail("batch sizes must be positive");
    if (model.clca_enabled && batch_size < 2) fail("batch_size must be at least 2 when training the CLA head");
    if (!(base_lr >= 0) || !(min_lr >= 0)) fail("learning rates must be non-negative");
    if (!(label_smoothing >= 0 && label_smoothing < 1)) fail("label_smoothing must be in [0, 1)");
  }

  bool operator==(const TrainConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},
                     {"weight_decay", c.weight_decay},
                     {"batch_size", c.batch_size},
                     {"base_lr", c.base_lr},
                     {"min_lr", c.min_lr},
                     {"warmup_epochs", c.warmup_epochs},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"eps", c.eps},
                     {"seed", c.seed},
                     {"shuffle_seed", c.shuffle_seed},
                     {"label_smoothing", c.label_smoothing},
                     {"eval_batch_size", c.eval_batch_size}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  detail::reject_unknown(j,
                         {"epochs", "weight_decay", "batch_size", "base_lr", "min_lr", "warmup_epochs", "beta1",
                          "beta2", "eps", "seed", "shuffle_seed", "label_smoothing", "eval_batch_size"},
                         "train config");
  c = TrainConfig{};
  detail::read_field(j, "epochs", c.epochs);
  detail::read_field(j, "weight_decay", c.weight_decay);
  detail::read_field(j, "batch_size", c.batch_size);
  detail::read_field(j, "base_lr", c.base_lr);
  detail::read_field(j, "min_lr", c.min_lr);
  detail::read_field(j, "warmup_epochs", c.warmup_epochs);
  detail::read_field(j, "beta1", c.beta1);
  detail::read_field(j, "beta2", c.beta2);
  detail::read_field(j, "eps", c.eps);
  detail::read_field(j, "seed", c.seed);
  detail::read_field(j, "shuffle_seed", c.shuffle_seed);
  detail::read_field(j, "label_smoothing", c.label_smoothing);
  detail::read_field(j, "eval_batch_size", c.eval_batch_size);
}

struct MetricsRow {
  std::size_t epoch = 0;
  std::string split;
  double loss = 0.0;
  double top1 = 0.0;
  double seconds = 0.0;
  std::uint64_t macs = 0;
};

inline std::string metrics_csv_header() { return "epoch,split,loss,top1,seconds,macs"; }

inline std::string to_csv(const MetricsRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%s,%.17g,%.17g,%.3f,%llu", r.epoch, r.split.c_str(), r.loss, r.top1, r.seconds,
                static_cast<unsigned long long>(r.macs));
  return buf;
}

inline std::vector<MetricsRow> read_metrics_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open '" + path + "'");
  std::string line;
  std::getline(is, line);
  if (line != metrics_csv_header()) throw FormatError("'" + path + "' is not a metrics CSV");
  std::vector<MetricsRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string f[6];
    for (auto& x : f)
      if (!std::getline(ss, x, ',')) throw FormatError("malformed metrics row: " + line);
    rows.push_back({std::stoul(f[0]), f[1], std::stod(f[2]), std::stod(f[3]), std::stod(f[4]), std::stoull(f[5])});
  }
  return rows;
}

inline std::vector<std::size_t> argmax_rows(const Tensor<float>& logits) {
  std::vector<std::size_t> out;
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  for (std::size_t i = 0; i < b; ++i) {
    const float* row = logits.ptr() + i * c;
    out.push_back(static_cast<std::size_t>(std::max_element(row, row + c) - row));
  }
  return out;
}

struct EvalResult {
  double loss = 0.0;
  double top1 = 0.0;
  std::size_t count = 0;
};

inline void check_compatible(const ModelConfig& cfg, const Dataset& d) {
  if (d.image_side != cfg.image_side || d.channels != cfg.in_channels) {
    throw ConfigError("dataset images are " + std::to_string(d.channels) + "x" + std::to_string(d.image_side) + "x" +
                      std::to_string(d.image_side) + " but the model expects side " + std::to_string(cfg.image_side));
  }
  if (d.num_classes() != cfg.num_classes) {
    throw ConfigError("dataset has " + std::to_string(d.num_classes()) + " classes, model has " +
                      std::to_string(cfg.num_classes));
  }
}

// Eval-mode pass over the whole dataset in file order.
inline EvalResult evaluate(VitClca<float>& model, const Dataset& d, std::size_t batch_size = 64) {
  check_compatible(model.config(), d);
  if (d.size() == 0) throw ConfigError("cannot evaluate on an empty dataset");
  BatchIterator it(d, batch_size, 0, 0, false);
  double loss_sum = 0.0;
  std::size_t correct = 0;
  while (!it.done()) {
    Batch b = it.next();
    Tape<float> tape(false);
    auto out = model.forward(tape, b.images, ops::NormMode::eval);
    loss_sum += static_cast<double>(ops::cross_entropy(out.logits, b.labels).value()[0]) * b.labels.size();
    const auto pred = argmax_rows(out.logits.value());
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == b.labels[i];
  }
  return {loss_sum / d.size(), static_cast<double>(correct) / d.size(), d.size()};
}

inline EvalResult evaluate_checkpoint(const std::string& path, const Dataset& d, std::size_t batch_size = 64) {
  auto model = model_from_checkpoint(load_checkpoint(path));
  return evaluate(model, d, batch_size);
}

// Groups parameters into the layers reported by the gradient trace.
inline std::string grad_layer(const std::string& name) {
  if (name.rfind("blocks.", 0) == 0) {
    const auto dot = name.find('.', 7);
    return "block" + std::to_string(std::stoul(name.substr(7, dot - 7)) + 1);
  }
  if (name.rfind("patch_embed", 0) == 0 || name == "cls_token" || name == "clr_token" || name == "pos_embed")
    return "embed";
  return "head";
}

inline std::vector<std::string> grad_layers(const ModelConfig& cfg) {
  std::vector<std::string> names{"embed"};
  for (std::size_t l = 1; l <= cfg.depth; ++l) names.push_back("block" + std::to_string(l));
  names.push_back("head");
  return names;
}

struct TrainOptions {
  bool resume = false;               // continue from <out_dir>/last.ckpt
  std::size_t stop_after_epoch = 0;  // 0: run to the configured epoch count
  std::ostream* log = nullptr;
};

struct TrainResult {
  std::vector<MetricsRow> rows;  // every row in metrics.csv
  double best_val_top1 = -1.0;
  std::size_t best_epoch = 0;
  std::uint64_t steps = 0;
  std::uint64_t skipped_steps = 0;
  std::string metrics_path, grad_trace_path, best_path, last_path;
};

namespace detail {

inline void keep_lines(const std::string& path, const std::function<bool(const std::string&)>& keep) {
  std::ifstream is(path);
  std::vector<std::string> lines;
  std::string line;
  bool first = true;
  while (std::getline(is, line)) {
    if (first || keep(line)) lines.push_back(line);
    first = false;
  }
  is.close();
  std::ofstream os(path, std::ios::trunc);
  for (const auto& l : lines) os << l << '\n';
}

inline void save_atomic(const std::string& path, const Checkpoint& ck) {
  const std::string tmp = path + ".tmp";
  save_checkpoint(tmp, ck);
  std::filesystem::rename(tmp, path);
}

}  // namespace detail

// Trains with AdamW and a per-step cosine schedule. Writes metrics.csv,
// grad_trace.csv, best.ckpt (highest val top-1) and last.ckpt (resumable)
// into out_dir.
inline TrainResult train(const ModelConfig& model_cfg, const TrainConfig& tc, const Dataset& train_set,
                         const Dataset& val_set, const std::string& out_dir, const TrainOptions& opts = {}) {
  model_cfg.validate();
  tc.validate(model_cfg);
  check_compatible(model_cfg, train_set);
  check_compatible(model_cfg, val_set);
  std::filesystem::create_directories(out_dir);

  TrainResult res;
  const auto dir = std::filesystem::path(out_dir);
  res.metrics_path = (dir / "metrics.csv").string();
  res.grad_trace_path = (dir / "grad_trace.csv").string();
  res.best_path = (dir / "best.ckpt").string();
  res.last_path = (dir / "last.ckpt").string();

  VitClca<float> model(model_cfg, tc.seed);
  AdamWState<float> opt = AdamWState<float>::init(model.params());
  std::size_t first_epoch = 1;

  if (opts.resume) {
    const Checkpoint ck = load_checkpoint(res.last_path);
    if (checkpoint_config(ck) != model_cfg) throw ConfigError("resume: model config differs from checkpoint");
    if (!ck.header.contains("train_state")) throw FormatError("resume: checkpoint has no training state");
    const auto& st = ck.header["train_state"];
    if (st.at("train_config").get<TrainConfig>() != tc) throw ConfigError("resume: train config differs");
    model = model_from_checkpoint(ck);
    std::size_t i = 0;
    for (const auto& p : model.params()) {
      const Tensor<float>* m = ck.find("optim.m." + p.name);
      const Tensor<float>* v = ck.find("optim.v." + p.name);
      if (!m || !v) throw FormatError("resume: missing optimizer state for '" + p.name + "'");
      opt.m[i] = *m;
      opt.v[i] = *v;
      ++i;
    }
    opt.step = st.at("optimizer_step").get<std::uint64_t>();
    first_epoch = st.at("epochs_done").get<std::size_t>() + 1;
    res.best_val_top1 = st.at("best_val_top1").get<double>();
    res.best_epoch = st.at("best_epoch").get<std::size_t>();
    res.steps = st.at("steps").get<std::uint64_t>();
    res.skipped_steps = st.at("skipped_steps").get<std::uint64_t>();
    // drop rows written after the checkpoint was taken
    const std::size_t done = first_epoch - 1;
    const std::uint64_t steps = res.steps;
    detail::keep_lines(res.metrics_path, [&](const std::string& l) { return std::stoul(l) <= done; });
    detail::keep_lines(res.grad_trace_path, [&](const std::string& l) { return std::stoull(l) <= steps; });
  } else {
    std::ofstream(res.metrics_path, std::ios::trunc) << metrics_csv_header() << '\n';
    std::ofstream(res.grad_trace_path, std::ios::trunc) << "step,layer,max_abs_grad\n";
  }

  std::ofstream metrics(res.metrics_path, std::ios::app);
  std::ofstream trace(res.grad_trace_path, std::ios::app);
  const std::uint64_t macs = model_cost(model_cfg).total();
  const std::size_t steps_per_epoch = (train_set.size() + tc.batch_size - 1) / tc.batch_size;
  const CosineSchedule schedule{tc.base_lr, tc.min_lr, tc.warmup_epochs * steps_per_epoch,
                                tc.epochs * steps_per_epoch};
  const auto layers = grad_layers(model_cfg);
  std::vector<std::size_t> layer_of;
  for (const auto& p : model.params())
    layer_of.push_back(static_cast<std::size_t>(
        std::find(layers.begin(), layers.end(), grad_layer(p.name)) - layers.begin()));

  auto write_last = [&](std::size_t epochs_done) {
    Checkpoint ck = model_checkpoint(model);
    ck.header["train_state"] = {{"epochs_done", epochs_done},     {"optimizer_step", opt.step},
                                {"best_val_top1", res.best_val_top1}, {"best_epoch", res.best_epoch},
                                {"steps", res.steps},               {"skipped_steps", res.skipped_steps},
                                {"train_config", tc}};
    std::size_t i = 0;
    for (const auto& p : model.params()) {
      ck.records.emplace_back("optim.m." + p.name, opt.m[i]);
      ck.records.emplace_back("optim.v." + p.name, opt.v[i]);
      ++i;
    }
    detail::save_atomic(res.last_path, ck);
  };

  const std::size_t last_epoch =
      opts.stop_after_epoch ? std::min(tc.epochs, opts.stop_after_epoch) : tc.epochs;
  for (std::size_t epoch = first_epoch; epoch <= last_epoch; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    BatchIterator it(train_set, tc.batch_size, tc.shuffle_seed, epoch);
    double loss_sum = 0.0;
    std::size_t correct = 0, seen = 0;
    while (!it.done()) {
      Batch b = it.next();
      // a lone trailing sample cannot be batch-normalised in train mode
      if (model_cfg.clca_enabled && b.labels.size() < 2) continue;
      model.params().zero_grad();
      float loss_value = 0.0f;
      try {
        Tape<float> tape;
        auto out = model.forward(tape, b.images, ops::NormMode::train);
        auto loss = ops::cross_entropy(out.logits, b.labels, static_cast<float>(tc.label_smoothing));
        tape.backward(loss);
        loss_value = loss.value()[0];
        const auto pred = argmax_rows(out.logits.value());
        for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == b.labels[i];
      } catch (const NumericError& e) {
        metrics.flush();
        trace.flush();
        throw NumericError("training diverged at epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(res.steps + 1) + ": " + e.what() + " (trace in " + res.grad_trace_path +
                           ")");
      }
      loss_sum += static_cast<double>(loss_value) * b.labels.size();
      seen += b.labels.size();

      AdamWHyper h{schedule(res.steps), tc.beta1, tc.beta2, tc.eps, tc.weight_decay};
      ++res.steps;
      if (!grads_finite(model.params())) {
        ++res.skipped_steps;
        if (opts.log) *opts.log << "step " << res.steps << ": non-finite gradient, update skipped\n";
        continue;
      }
      std::vector<double> layer_max(layers.size(), 0.0);
      std::size_t i = 0;
      for (const auto& p : model.params()) {
        layer_max[layer_of[i]] = std::max(layer_max[layer_of[i]], static_cast<double>(p.grad.max_abs()));
        ++i;
      }
      double global = 0.0;
      for (std::size_t l = 0; l < layers.size(); ++l) {
        trace << res.steps << ',' << layers[l] << ',' << layer_max[l] << '\n';
        global = std::max(global, layer_max[l]);
      }
      trace << res.steps << ",all," << global << '\n';
      adamw_step(model.params(), opt, h);
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    MetricsRow train_row{epoch, "train", seen ? loss_sum / seen : 0.0, seen ? double(correct) / seen : 0.0, seconds,
                         macs};
    const auto t1 = std::chrono::steady_clock::now();
    const EvalResult ev = evaluate(model, val_set, tc.eval_batch_size);
    MetricsRow val_row{epoch, "val", ev.loss, ev.top1,
                       std::chrono::duration<double>(std::chrono::steady_clock::now() - t1).count(), macs};
    metrics << to_csv(train_row) << '\n' << to_csv(val_row) << '\n';
    metrics.flush();
    trace.flush();
    if (opts.log) {
      *opts.log << "epoch " << epoch << "/" << tc.epochs << "  train loss " << train_row.loss << " top1 "
                << train_row.top1 << "  val loss " << val_row.loss << " top1 " << val_row.top1 << "  ("
                << seconds << " s)\n";
    }
    if (val_row.top1 > res.best_val_top1) {
      res.best_val_top1 = val_row.top1;
      res.best_epoch = epoch;
      Checkpoint best = model_checkpoint(model);
      best.header["train_state"] = {{"epoch", epoch}, {"val_top1", val_row.top1}};
      detail::save_atomic(res.best_path, best);
    }
    write_last(epoch);
  }
  metrics.close();
  trace.close();
  res.rows = read_metrics_csv(res.metrics_path);
  return res;
}

}  // namespace clca
