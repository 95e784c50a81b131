#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "clca/checkpoint.hpp"
#include "clca/config.hpp"
#include "clca/dataset.hpp"
#include "clca/errors.hpp"
#include "clca/flops.hpp"
#include "clca/gradcheck.hpp"
#include "clca/schedule.hpp"
#include "clca/train.hpp"

namespace clca::cli {

inline constexpr const char* kVersion = "0.1.0";

enum Exit : int { ok = 0, usage = 1, runtime = 2, gradcheck_fail = 3 };

namespace fs = std::filesystem;

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open '" + path + "'");
  nlohmann::json j = nlohmann::json::parse(is, nullptr, false);
  if (j.is_discarded()) throw ConfigError("'" + path + "' is not valid JSON");
  return j;
}

inline void write_json_file(const std::string& path, const nlohmann::json& j) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write '" + path + "'");
  os << j.dump(2) << '\n';
}

// Overrides are "key=value" or "section.key=value". Unprefixed keys go to
// `fallback`; naming a section the command does not have is an error.
struct Overrides {
  std::vector<std::string> raw;

  void apply(nlohmann::json& j, const std::string& section, const std::string& fallback) const {
    for (const auto& a : raw) {
      const auto eq = a.find('=');
      const auto dot = a.find('.');
      std::string target = fallback, assignment = a;
      if (dot != std::string::npos && dot < eq) {
        target = a.substr(0, dot);
        assignment = a.substr(dot + 1);
      }
      if (target != section) continue;
      apply_override(j, assignment);
      // groups is derived from the reduction layers
      if (assignment.rfind("reduction_layers=", 0) == 0) j.erase("groups");
    }
  }

  void check_sections(const std::vector<std::string>& allowed) const {
    for (const auto& a : raw) {
      const auto eq = a.find('=');
      const auto dot = a.find('.');
      if (eq == std::string::npos) throw ConfigError("override '" + a + "' is not key=value");
      if (dot != std::string::npos && dot < eq) {
        const std::string s = a.substr(0, dot);
        if (std::find(allowed.begin(), allowed.end(), s) == allowed.end())
          throw ConfigError("override '" + a + "': this command has no '" + s + "' section");
      } else if (allowed.size() != 1) {
        throw ConfigError("override '" + a + "' needs a section prefix (" + allowed.front() + ".key=value, ...)");
      }
    }
  }
};

template <typename C>
C load_config(const std::string& path, const Overrides& ov, const std::string& section, const std::string& fallback) {
  nlohmann::json j = path.empty() ? nlohmann::json(C{}) : read_json_file(path);
  ov.apply(j, section, fallback);
  return j.get<C>();
}

inline std::string abs_path(const std::string& p) { return fs::absolute(p).lexically_normal().string(); }

inline nlohmann::json manifest(const std::string& command, const nlohmann::json& config, const nlohmann::json& seeds,
                               const nlohmann::json& inputs, const nlohmann::json& outputs) {
  return {{"command", command},
          {"version", std::string(kVersion) + " (" + __VERSION__ + ")"},
          {"threads", 1},
          {"seeds", seeds},
          {"config", config},
          {"inputs", inputs},
          {"outputs", outputs}};
}

// ---- runners shared by the subcommands and replay ----

inline void run_synth(const DatasetSpec& spec, const std::string& out_dir, std::ostream& out) {
  spec.validate();
  fs::create_directories(out_dir);
  const fs::path dir(out_dir);
  write_json_file((dir / "manifest.json").string(),
                  manifest("synth", {{"data", spec}}, {{"data", spec.seed}}, nlohmann::json::object(),
                           {{"dir", abs_path(out_dir)}}));
  const DatasetSplit split = generate(spec);
  save_dataset((dir / "train.ufgd").string(), split.train);
  save_dataset((dir / "val.ufgd").string(), split.val);
  write_json_file((dir / "dataset.json").string(), dataset_sidecar(spec, split));
  out << "wrote " << split.train.size() << " train / " << split.val.size() << " val samples ("
      << spec.num_classes() << " classes) to " << out_dir << '\n';
}

inline TrainResult run_train(const ModelConfig& mc, const TrainConfig& tc, const std::string& data_dir,
                             const std::string& out_dir, bool resume, std::size_t stop_after, std::ostream& out) {
  mc.validate();
  tc.validate(mc);
  const fs::path data(data_dir);
  const Dataset train_set = load_dataset((data / "train.ufgd").string());
  const Dataset val_set = load_dataset((data / "val.ufgd").string());
  fs::create_directories(out_dir);
  write_json_file((fs::path(out_dir) / "manifest.json").string(),
                  manifest("train", {{"model", mc}, {"train", tc}},
                           {{"model", tc.seed}, {"shuffle", tc.shuffle_seed}},
                           {{"data", abs_path(data_dir)}, {"resume", resume}, {"stop_after_epoch", stop_after}},
                           {{"dir", abs_path(out_dir)}}));
  TrainOptions opts;
  opts.resume = resume;
  opts.stop_after_epoch = stop_after;
  opts.log = &out;
  TrainResult r = train(mc, tc, train_set, val_set, out_dir, opts);
  out << "best val top1 " << r.best_val_top1 << " at epoch " << r.best_epoch << "; " << r.steps << " steps, "
      << r.skipped_steps << " skipped\n";
  return r;
}

struct SweepPoint {
  std::size_t image_side = 0;
  double keep_rate = 0.0;
  std::uint64_t macs = 0;
  double val_top1 = 0.0;
  std::string run_dir;
};

inline std::string sweep_csv_header() { return "image_side,keep_rate,macs,val_top1,run_dir"; }

inline std::string to_csv(const SweepPoint& p) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%zu,%g,%llu,%.9g,", p.image_side, p.keep_rate,
                static_cast<unsigned long long>(p.macs), p.val_top1);
  return buf + p.run_dir;
}

// Trains one model per (side, keep rate) on data generated at that side.
// Jobs run one after another, each in its own directory.
inline std::vector<SweepPoint> run_sweep(const ModelConfig& mc, const TrainConfig& tc, const DatasetSpec& ds,
                                         std::vector<double> rates, std::vector<std::size_t> sides,
                                         const std::string& out_dir, std::ostream& out) {
  if (rates.empty() || sides.empty()) throw ConfigError("sweep needs at least one keep rate and one image side");
  std::sort(rates.begin(), rates.end());
  std::sort(sides.begin(), sides.end());
  fs::create_directories(out_dir);
  const fs::path dir(out_dir);
  write_json_file((dir / "manifest.json").string(),
                  manifest("sweep", {{"model", mc}, {"train", tc}, {"data", ds}},
                           {{"model", tc.seed}, {"shuffle", tc.shuffle_seed}, {"data", ds.seed}},
                           {{"keep_rates", rates}, {"image_sides", sides}}, {{"dir", abs_path(out_dir)}}));
  std::vector<SweepPoint> points;
  std::ofstream csv(dir / "sweep.csv", std::ios::trunc);
  csv << sweep_csv_header() << '\n';
  for (std::size_t side : sides) {
    DatasetSpec spec = ds;
    spec.image_side = side;
    const std::string data_dir = (dir / ("data_s" + std::to_string(side))).string();
    run_synth(spec, data_dir, out);
    for (double r : rates) {
      ModelConfig cfg = mc;
      cfg.image_side = side;
      cfg.keep_rate = r;
      char name[64];
      std::snprintf(name, sizeof name, "run_s%zu_r%g", side, r);
      const std::string run_dir = (dir / name).string();
      out << "== " << name << '\n';
      TrainResult res = run_train(cfg, tc, data_dir, run_dir, false, 0, out);
      SweepPoint p{side, r, model_cost(cfg).total(), res.rows.back().top1, name};
      csv << to_csv(p) << '\n';
      csv.flush();
      points.push_back(p);
    }
  }
  return points;
}

inline void print_schedule(const ModelConfig& cfg, std::ostream& out) {
  char line[160];
  std::snprintf(line, sizeof line, "%5s %7s %7s %7s %6s %5s %9s %11s\n", "block", "t_attn", "t_ffn", "t_out", "kept",
                "fused", "recovered", "cache_after");
  out << line;
  for (const auto& b : token_schedule(cfg)) {
    std::snprintf(line, sizeof line, "%5zu %7zu %7zu %7zu %6zu %5d %9zu %11zu\n", b.block, b.t_attn, b.t_ffn, b.t_out,
                  b.kept, b.fused ? 1 : 0, b.recovered, b.cache_after);
    out << line;
  }
}

inline int run_replay(const std::string& manifest_path, const std::string& out_override, std::ostream& out) {
  const nlohmann::json m = read_json_file(manifest_path);
  const std::string cmd = m.at("command").get<std::string>();
  const auto& cfg = m.at("config");
  const std::string out_dir = out_override.empty() ? m.at("outputs").at("dir").get<std::string>() : out_override;
  if (cmd == "synth") {
    run_synth(cfg.at("data").get<DatasetSpec>(), out_dir, out);
  } else if (cmd == "train") {
    const auto& in = m.at("inputs");
    run_train(cfg.at("model").get<ModelConfig>(), cfg.at("train").get<TrainConfig>(), in.at("data").get<std::string>(),
              out_dir, in.at("resume").get<bool>(), in.at("stop_after_epoch").get<std::size_t>(), out);
  } else if (cmd == "sweep") {
    const auto& in = m.at("inputs");
    run_sweep(cfg.at("model").get<ModelConfig>(), cfg.at("train").get<TrainConfig>(),
              cfg.at("data").get<DatasetSpec>(), in.at("keep_rates").get<std::vector<double>>(),
              in.at("image_sides").get<std::vector<std::size_t>>(), out_dir, out);
  } else {
    throw ConfigError("manifest command '" + cmd + "' cannot be replayed");
  }
  return ok;
}

// ---- argument parsing ----

inline int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Cross-layer cache aggregation for token-reduced vision transformers"};
  app.name("clca");
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  std::string model_path, train_path, data_spec_path, data_dir, out_dir, ckpt_path, manifest_path, json_path;
  Overrides ov;
  auto add_set = [&](CLI::App* s) {
    s->add_option("--set", ov.raw, "Override a config field, key=value (repeatable)")->type_name("KEY=VALUE");
  };

  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset (train.ufgd, val.ufgd, dataset.json)");
  synth->add_option("--spec", data_spec_path, "Dataset spec JSON (defaults when omitted)");
  synth->add_option("--out", out_dir, "Output directory")->required();
  add_set(synth);

  bool resume = false;
  std::size_t stop_after = 0;
  auto* trn = app.add_subcommand("train", "Train a model; writes metrics.csv, grad_trace.csv and checkpoints");
  trn->add_option("--model-config", model_path, "Model config JSON");
  trn->add_option("--train-config", train_path, "Training config JSON");
  trn->add_option("--data", data_dir, "Directory holding train.ufgd and val.ufgd")->required();
  trn->add_option("--out", out_dir, "Run directory")->required();
  trn->add_flag("--resume", resume, "Continue from <out>/last.ckpt");
  trn->add_option("--stop-after-epoch", stop_after, "Stop after this epoch (0: run all epochs)");
  add_set(trn);

  std::size_t eval_batch = 64;
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset file");
  ev->add_option("--ckpt", ckpt_path, "Checkpoint file")->required();
  ev->add_option("--data", data_dir, "Dataset file, or a directory (uses val.ufgd)")->required();
  ev->add_option("--batch", eval_batch, "Evaluation batch size");

  bool csv = false;
  auto* fl = app.add_subcommand("flops", "Report the MAC cost of a model config");
  fl->add_option("--model-config", model_path, "Model config JSON");
  fl->add_flag("--csv", csv, "Print a CSV row instead of JSON");
  add_set(fl);

  auto* sc = app.add_subcommand("schedule", "Print the per-block token table");
  sc->add_option("--model-config", model_path, "Model config JSON");
  add_set(sc);

  GradCheckOptions gopt;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every parameter gradient");
  gc->add_option("--model-config", model_path, "Model config JSON (default: the 4-block check model)");
  gc->add_option("--tolerance", gopt.tolerance, "Relative error threshold");
  gc->add_option("--step", gopt.h, "Central-difference step");
  gc->add_option("--seed", gopt.seed, "Seed for parameters and inputs");
  gc->add_option("--batch", gopt.batch, "Batch size of the probe input");
  gc->add_option("--max-entries", gopt.max_entries_per_param, "Entries sampled per parameter (0: all)");
  gc->add_option("--only", gopt.only, "Only parameters with this name prefix (repeatable)");
  gc->add_option("--json", json_path, "Write the report as JSON");
  add_set(gc);

  std::vector<double> rates{0.1, 0.25, 0.5, 0.7, 1.0};
  std::vector<std::size_t> sides{64, 128};
  auto* sw = app.add_subcommand("sweep", "Train across keep rates and image sides; writes sweep.csv");
  sw->add_option("--model-config", model_path, "Model config JSON");
  sw->add_option("--train-config", train_path, "Training config JSON");
  sw->add_option("--data-spec", data_spec_path, "Dataset spec JSON; regenerated at each image side");
  sw->add_option("--keep-rates", rates, "Comma-separated keep rates")->delimiter(',');
  sw->add_option("--image-sides", sides, "Comma-separated image sides")->delimiter(',');
  sw->add_option("--out", out_dir, "Output directory")->required();
  add_set(sw);

  auto* rp = app.add_subcommand("replay", "Re-run the job recorded in a manifest.json");
  rp->add_option("--manifest", manifest_path, "Manifest written by synth, train or sweep")->required();
  rp->add_option("--out", out_dir, "Write outputs here instead of the recorded directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? ok : usage;
  }

  try {
    if (*synth) {
      ov.check_sections({"data"});
      run_synth(load_config<DatasetSpec>(data_spec_path, ov, "data", "data"), out_dir, out);
    } else if (*trn) {
      ov.check_sections({"model", "train"});
      const auto mc = load_config<ModelConfig>(model_path, ov, "model", "");
      const auto tc = load_config<TrainConfig>(train_path, ov, "train", "");
      run_train(mc, tc, data_dir, out_dir, resume, stop_after, out);
    } else if (*ev) {
      fs::path p(data_dir);
      if (fs::is_directory(p)) p /= "val.ufgd";
      const Dataset d = load_dataset(p.string());
      const Checkpoint ck = load_checkpoint(ckpt_path);
      VitClca<float> model = model_from_checkpoint(ck);
      const EvalResult r = evaluate(model, d, eval_batch);
      std::size_t epoch = 0;
      if (ck.header.contains("train_state")) {
        const auto& st = ck.header["train_state"];
        epoch = st.value("epochs_done", st.value("epoch", std::size_t{0}));
      }
      out << metrics_csv_header() << '\n'
          << to_csv(MetricsRow{epoch, "eval", r.loss, r.top1, 0.0, model_cost(model.config()).total()}) << '\n';
    } else if (*fl) {
      ov.check_sections({"model"});
      const auto mc = load_config<ModelConfig>(model_path, ov, "model", "model");
      const FlopsReport r = model_cost(mc);
      if (csv) {
        out << flops_csv_header() << '\n' << flops_csv_row(mc, r) << '\n';
      } else {
        nlohmann::json j = to_json(r);
        j["config_hash"] = config_hash(mc);
        out << j.dump(2) << '\n';
      }
    } else if (*sc) {
      ov.check_sections({"model"});
      print_schedule(load_config<ModelConfig>(model_path, ov, "model", "model"), out);
    } else if (*gc) {
      ov.check_sections({"model"});
      const ModelConfig mc = model_path.empty() && ov.raw.empty()
                                 ? gradcheck_tiny_config()
                                 : load_config<ModelConfig>(model_path, ov, "model", "model");
      const GradCheckReport r = grad_check(mc, gopt);
      for (const auto& e : r.entries) {
        char line[200];
        std::snprintf(line, sizeof line, "%-34s %8zu checked  max rel err %.3e  %s\n", e.name.c_str(), e.checked,
                      e.max_rel_error, e.passed ? "ok" : "FAIL");
        out << line;
      }
      out << (r.passed ? "PASS" : "FAIL") << "  worst " << r.worst << "  entries " << r.checked << "  ("
          << r.seconds << " s)\n";
      if (!json_path.empty()) write_json_file(json_path, to_json(r, gopt.tolerance));
      return r.passed ? ok : gradcheck_fail;
    } else if (*sw) {
      ov.check_sections({"model", "train", "data"});
      const auto mc = load_config<ModelConfig>(model_path, ov, "model", "");
      const auto tc = load_config<TrainConfig>(train_path, ov, "train", "");
      const auto ds = load_config<DatasetSpec>(data_spec_path, ov, "data", "");
      const auto points = run_sweep(mc, tc, ds, rates, sides, out_dir, out);
      out << sweep_csv_header() << '\n';
      for (const auto& p : points) out << to_csv(p) << '\n';
    } else if (*rp) {
      return run_replay(manifest_path, out_dir, out);
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return runtime;
  }
  return ok;
}

}  // namespace clca::cli
