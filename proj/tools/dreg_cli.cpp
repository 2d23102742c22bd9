#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dreg/config.hpp"
#include "dreg/error.hpp"
#include "dreg/trainer.hpp"

namespace fs = std::filesystem;
using namespace dreg;

namespace {

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> sets;
  std::string out;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "key = value settings file");
  cmd->add_option("--set", args.sets, "override one setting, key=value (repeatable)");
  cmd->add_option("--out", args.out, "output location");
}

KeyValueConfig gather(const CommonArgs& args) {
  KeyValueConfig kv;
  if (!args.config_path.empty()) kv = KeyValueConfig::load(args.config_path);
  for (const auto& s : args.sets) kv.assign(s);
  if (!args.out.empty()) kv.set("out", args.out);
  return kv;
}

std::set<std::string> with_keys(std::set<std::string> base, std::initializer_list<const char*> extra) {
  for (const char* k : extra) base.insert(k);
  return base;
}

const std::set<std::string>& eval_keys() {
  static const std::set<std::string> keys{"eval.jitter", "eval.jitter_scale", "eval.seed", "eval.dsc_voxel_mm"};
  return keys;
}

EvalOptions eval_options(const KeyValueConfig& kv) {
  EvalOptions o;
  o.jitter = kv.get_bool("eval.jitter", o.jitter);
  o.jitter_scale = kv.get_double("eval.jitter_scale", o.jitter_scale);
  o.eval_seed = kv.get_u64("eval.seed", o.eval_seed);
  o.dsc_voxel_mm = kv.get_double("eval.dsc_voxel_mm", o.dsc_voxel_mm);
  if (!(o.dsc_voxel_mm > 0.0) || o.jitter_scale < 0.0) throw ValidationError("invalid evaluation options");
  return o;
}

void record_eval_options(KeyValueConfig& kv, const EvalOptions& o) {
  kv.set("eval.jitter", o.jitter ? "true" : "false");
  kv.set("eval.jitter_scale", format_double(o.jitter_scale));
  kv.set("eval.seed", std::to_string(o.eval_seed));
  kv.set("eval.dsc_voxel_mm", format_double(o.dsc_voxel_mm));
}

fs::path run_dir(const KeyValueConfig& kv) {
  fs::path dir = kv.get("out", "");
  if (dir.empty()) {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    localtime_r(&now, &tm);
    char stamp[32];
    std::strftime(stamp, sizeof(stamp), "%Y%m%d-%H%M%S", &tm);
    dir = fs::path("runs") / stamp;
    for (int n = 1; fs::exists(dir); ++n) dir = fs::path("runs") / (std::string(stamp) + "-" + std::to_string(n));
  }
  fs::create_directories(dir);
  return dir;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

std::string require(const KeyValueConfig& kv, const std::string& key) {
  const auto v = kv.get(key, "");
  if (v.empty()) throw ValidationError("missing required setting '" + key + "'");
  return v;
}

void print_summary(const EvalReport& report) {
  const auto i = report.initial();
  const auto p = report.predicted();
  std::printf("samples   %zu\n", report.samples.size());
  std::printf("initial   MD %.3f +- %.3f  HD %.3f  MAE %.3f  DSC %.2f\n", i.mean.md_mm, i.stddev.md_mm, i.mean.hd_mm,
              i.mean.mae_mm, i.mean.dsc_percent);
  std::printf("predicted MD %.3f +- %.3f  HD %.3f  MAE %.3f  DSC %.2f\n", p.mean.md_mm, p.stddev.md_mm, p.mean.hd_mm,
              p.mean.mae_mm, p.mean.dsc_percent);
}

void write_eval_outputs(const EvalReport& report, const fs::path& dir) {
  write_metrics_csv(report, dir / "metrics.csv");
  write_text(dir / "summary.json", report.summary_json().dump(2) + "\n");
}

void write_overlays(const Checkpoint& ckpt, const Dataset& data, const fs::path& dir, int count) {
  if (count <= 0) return;
  fs::create_directories(dir / "overlays");
  const int first = data.train_count;
  const int last = std::min<int>(static_cast<int>(data.samples.size()), first + count);
  for (int id = first; id < last; ++id) {
    char name[48];
    std::snprintf(name, sizeof(name), "sample_%04d.png", id);
    write_png(render_overlay(ckpt, data, id).image, dir / "overlays" / name);
  }
}

int cmd_generate(const KeyValueConfig& kv) {
  kv.require_known({"out", "preset", "n_train", "n_test", "seed", "image_size", "pixel_mm", "resolution",
                    "jitter_max_mm", "max_displacement_mm", "bend_range_mm", "scale_range"});
  const std::string preset = kv.get("preset", "single");
  SampleConfig config;
  if (preset == "single") {
    config = SampleConfig::single_organ();
  } else if (preset == "coupled") {
    config = SampleConfig::coupled_two_organ();
  } else if (preset == "smoke") {
    config = SampleConfig::smoke();
  } else {
    throw ValidationError("preset must be single, coupled or smoke");
  }
  config.image_size = kv.get_int("image_size", config.image_size);
  config.pixel_mm = kv.get_double("pixel_mm", config.pixel_mm);
  config.jitter_max_mm = kv.get_double("jitter_max_mm", config.jitter_max_mm);
  config.max_displacement_mm = kv.get_double("max_displacement_mm", config.max_displacement_mm);
  config.bend_range_mm = kv.get_double("bend_range_mm", config.bend_range_mm);
  config.scale_range = kv.get_double("scale_range", config.scale_range);
  if (kv.has("resolution")) {
    for (auto& o : config.organs) o.resolution = kv.get_int("resolution", o.resolution);
  }
  const fs::path out = require(kv, "out");
  const auto ds = generate_dataset(config, kv.get_int("n_train", 64), kv.get_int("n_test", 16), kv.get_u64("seed", 1), out);
  std::printf("wrote %zu samples (%d train) to %s, mean displacement %.3f mm\n", ds.samples.size(), ds.train_count,
              out.string().c_str(), ds.mean_displacement_mm);
  return 0;
}

int cmd_fit_statmodel(const KeyValueConfig& kv) {
  kv.require_known({"out", "data", "mode", "organ", "bridge_count"});
  const auto ds = load_dataset(require(kv, "data"));
  const auto mode = reg_mode_from_string(kv.get("mode", "mr"));
  const int organ = kv.get_int("organ", 0);
  const int bridges = kv.get_int("bridge_count", kDefaultBridgeCount);
  std::vector<DisplacementField> fields;
  for (int i = 0; i < ds.train_count; ++i) {
    const auto c = make_case(ds.camera, ds.samples[static_cast<std::size_t>(i)], i, mode, organ, bridges);
    DisplacementField f(c.target.size());
    for (std::size_t v = 0; v < f.size(); ++v) f[v] = c.target[v] - c.mesh.vertices[v];
    fields.push_back(std::move(f));
  }
  const auto model = fit_pca(fields);
  const fs::path out = require(kv, "out");
  save_statmodel(model, out);
  std::printf("fitted %zu modes over %zu vertices -> %s\n", model.mode_count(), model.vertex_count(), out.string().c_str());
  for (std::size_t k = 0; k < std::min<std::size_t>(model.mode_count(), 5); ++k) {
    std::printf("  mode %zu stddev %.4f\n", k + 1, model.stddev[k]);
  }
  return 0;
}

int cmd_train(KeyValueConfig kv) {
  kv.require_known(with_keys(train_config_keys(), {"out", "overlays", "eval.jitter", "eval.jitter_scale", "eval.seed",
                                                   "eval.dsc_voxel_mm"}));
  const auto config = TrainConfig::from_config(kv);
  const auto options = eval_options(kv);
  if (config.data_dir.empty()) throw ValidationError("missing required setting 'data'");
  const auto ds = load_dataset(config.data_dir);
  const fs::path dir = run_dir(kv);
  const int overlays = kv.get_int("overlays", 4);

  KeyValueConfig snapshot = config.to_config();
  record_eval_options(snapshot, options);
  snapshot.set("overlays", std::to_string(overlays));
  write_text(dir / "config.snapshot", snapshot.dump());

  const auto result = train(config, ds, dir / "checkpoint.tns");
  save_checkpoint(result.checkpoint, dir / "checkpoint.tns");
  write_curve_csv(result.record, dir / "curve.csv");
  const auto ckpt = load_checkpoint(dir / "checkpoint.tns");
  const auto report = evaluate(ckpt, ds, options);
  write_eval_outputs(report, dir);
  write_overlays(ckpt, ds, dir, overlays);
  std::printf("run       %s\n", dir.string().c_str());
  std::printf("steps     %ld in %.1f s, final loss %.5f\n", result.record.optimizer_steps, result.record.wall_seconds,
              result.record.epochs.back().mean.total);
  print_summary(report);
  return 0;
}

int cmd_eval(KeyValueConfig kv) {
  kv.require_known(with_keys(eval_keys(), {"out", "data", "checkpoint", "overlays"}));
  const auto options = eval_options(kv);
  const auto ds = load_dataset(require(kv, "data"));
  const auto ckpt = load_checkpoint(require(kv, "checkpoint"));
  const auto report = evaluate(ckpt, ds, options);
  const fs::path dir = run_dir(kv);
  KeyValueConfig snapshot;
  record_eval_options(snapshot, options);
  snapshot.set("data", kv.get("data", ""));
  snapshot.set("checkpoint", kv.get("checkpoint", ""));
  write_text(dir / "config.snapshot", snapshot.dump());
  write_eval_outputs(report, dir);
  write_overlays(ckpt, ds, dir, kv.get_int("overlays", 0));
  std::printf("run       %s\n", dir.string().c_str());
  print_summary(report);
  return 0;
}

int cmd_experiment(KeyValueConfig kv) {
  kv.require_known(with_keys(train_config_keys(), {"out", "eval.jitter", "eval.jitter_scale", "eval.seed",
                                                   "eval.dsc_voxel_mm"}));
  const auto config = TrainConfig::from_config(kv);
  const auto options = eval_options(kv);
  if (config.data_dir.empty()) throw ValidationError("missing required setting 'data'");
  const auto ds = load_dataset(config.data_dir);
  const fs::path dir = run_dir(kv);
  KeyValueConfig snapshot = config.to_config();
  snapshot.erase("mode");
  snapshot.erase("organ");
  record_eval_options(snapshot, options);
  write_text(dir / "config.snapshot", snapshot.dump());

  const auto report = run_experiment(config, ds, options);
  write_experiment_csv(report, dir / "experiment.csv");
  save_checkpoint(report.mr.checkpoint, dir / "checkpoint_mr.tns");
  write_curve_csv(report.mr.record, dir / "curve_mr.csv");
  for (std::size_t o = 0; o < report.sr.size(); ++o) {
    save_checkpoint(report.sr[o].checkpoint, dir / ("checkpoint_sr" + std::to_string(o) + ".tns"));
    write_curve_csv(report.sr[o].record, dir / ("curve_sr" + std::to_string(o) + ".csv"));
  }
  std::printf("run       %s\n", dir.string().c_str());
  std::printf("organ  initial MD   SR MD          MR MD\n");
  for (const auto& o : report.organs) {
    std::printf("%5d  %10.3f   %6.3f +- %5.3f %6.3f +- %5.3f\n", o.organ, o.initial.mean.md_mm, o.sr.mean.md_mm,
                o.sr.stddev.md_mm, o.mr.mean.md_mm, o.mr.stddev.md_mm);
  }
  return 0;
}

int cmd_render(const KeyValueConfig& kv, int sample) {
  kv.require_known({"out", "data", "checkpoint"});
  const auto ds = load_dataset(require(kv, "data"));
  const auto ckpt = load_checkpoint(require(kv, "checkpoint"));
  const fs::path out = require(kv, "out");
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_png(render_overlay(ckpt, ds, sample).image, out);
  std::printf("wrote %s\n", out.string().c_str());
  return 0;
}

int cmd_gradcheck(const KeyValueConfig& kv) {
  kv.require_known({"out", "step", "tolerance", "entries", "seed"});
  GradcheckOptions o;
  o.step = kv.get_double("step", o.step);
  o.tolerance = kv.get_double("tolerance", o.tolerance);
  o.entries_per_tensor = kv.get_int("entries", o.entries_per_tensor);
  o.seed = kv.get_u64("seed", o.seed);
  const auto report = run_gradcheck(o);
  std::printf("%-32s %8s %8s %12s\n", "tensor", "checked", "redrawn", "max rel err");
  for (const auto& e : report.entries) {
    std::printf("%-32s %8zu %8zu %12.3e %s\n", e.name.c_str(), e.checked, e.skipped, e.max_rel_error,
                e.passed ? "ok" : "FAIL");
  }
  std::printf("max relative error %.3e, %.2f s: %s\n", report.max_rel_error(), report.seconds,
              report.passed() ? "PASS" : "FAIL");
  return report.passed() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"2D/3D deformable registration of organ meshes from a single projection image"};
  app.require_subcommand(1);

  CommonArgs generate, statfit, trainer, evaler, experiment, render, gradcheck;
  std::string data, checkpoint;
  int sample = 0;

  auto* gen_cmd = app.add_subcommand("generate-data", "synthesize a phantom dataset");
  add_common(gen_cmd, generate);
  auto* stat_cmd = app.add_subcommand("fit-statmodel", "fit the displacement PCA model on a training split");
  add_common(stat_cmd, statfit);
  stat_cmd->add_option("--data", data, "dataset directory");
  auto* train_cmd = app.add_subcommand("train", "train, evaluate and write a run directory");
  add_common(train_cmd, trainer);
  train_cmd->add_option("--data", data, "dataset directory");
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset's test split");
  add_common(eval_cmd, evaler);
  eval_cmd->add_option("--data", data, "dataset directory");
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint file");
  auto* exp_cmd = app.add_subcommand("experiment", "single-organ vs multi-organ comparison");
  add_common(exp_cmd, experiment);
  exp_cmd->add_option("--data", data, "dataset directory");
  auto* render_cmd = app.add_subcommand("render", "draw target and predicted vertices over the input image");
  add_common(render_cmd, render);
  render_cmd->add_option("--data", data, "dataset directory");
  render_cmd->add_option("--checkpoint", checkpoint, "checkpoint file");
  render_cmd->add_option("--sample", sample, "sample id");
  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient check on the smoke model");
  add_common(grad_cmd, gradcheck);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  auto with_paths = [&](KeyValueConfig kv) {
    if (!data.empty()) kv.set("data", data);
    if (!checkpoint.empty()) kv.set("checkpoint", checkpoint);
    return kv;
  };

  try {
    if (*gen_cmd) return cmd_generate(gather(generate));
    if (*stat_cmd) return cmd_fit_statmodel(with_paths(gather(statfit)));
    if (*train_cmd) return cmd_train(with_paths(gather(trainer)));
    if (*eval_cmd) return cmd_eval(with_paths(gather(evaler)));
    if (*exp_cmd) return cmd_experiment(with_paths(gather(experiment)));
    if (*render_cmd) return cmd_render(with_paths(gather(render)), sample);
    if (*grad_cmd) return cmd_gradcheck(gather(gradcheck));
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
