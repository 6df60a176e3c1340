#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "waunet/diagnostics/diagnostics.hpp"
#include "waunet/phantom/dataset.hpp"
#include "waunet/render/render.hpp"
#include "waunet/tensor/errors.hpp"
#include "waunet/tensor/wtf1.hpp"
#include "waunet/trainer/trainer.hpp"

namespace fs = std::filesystem;
using namespace waunet;

namespace {

// Config files ending in .json are read with this formatter; nested objects
// become sections, exactly like TOML tables.
class JsonConfig : public CLI::ConfigTOML {
 public:
  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(input);
    } catch (const nlohmann::json::exception& e) {
      throw CLI::ConfigError(std::string("invalid JSON config: ") + e.what());
    }
    std::vector<CLI::ConfigItem> items;
    flatten(j, {}, items);
    return items;
  }

 private:
  static std::string scalar(const nlohmann::json& v) {
    return v.is_string() ? v.get<std::string>() : v.dump();
  }
  static void flatten(const nlohmann::json& j, const std::vector<std::string>& parents,
                      std::vector<CLI::ConfigItem>& items) {
    if (!j.is_object()) throw CLI::ConfigError("JSON config must be an object");
    for (const auto& [key, value] : j.items()) {
      if (value.is_object()) {
        auto p = parents;
        p.push_back(key);
        flatten(value, p, items);
        continue;
      }
      CLI::ConfigItem item;
      item.parents = parents;
      item.name = key;
      if (value.is_array())
        for (const auto& v : value) item.inputs.push_back(scalar(v));
      else
        item.inputs.push_back(scalar(value));
      items.push_back(std::move(item));
    }
  }
};

struct Global {
  fs::path config;
  fs::path out;
  std::uint64_t seed = 0;
  bool force = false;
};

// Exit-code categories of the command-line contract.
struct RuntimeFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require_out(const Global& g, const std::string& cmd) {
  if (g.out.empty()) throw UsageError(cmd + ": --out is required");
}

// Creates the output directory; an existing non-empty one needs --force.
void prepare_out(const Global& g, bool allow_existing = false) {
  if (fs::exists(g.out) && !fs::is_directory(g.out))
    throw UsageError(g.out.string() + " exists and is not a directory");
  if (fs::exists(g.out) && !fs::is_empty(g.out) && !g.force && !allow_existing)
    throw UsageError(g.out.string() + " is not empty (use --force to overwrite)");
  fs::create_directories(g.out);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out << text;
}

void write_resolved(const Global& g, const CLI::App& sub) {
  std::ostringstream out;
  out << "seed=" << g.seed << "\n";
  out << "force=" << (g.force ? "true" : "false") << "\n";
  out << "out=\"" << g.out.string() << "\"\n";
  out << "\n[" << sub.get_name() << "]\n" << sub.config_to_str(true, false);
  write_text(g.out / "resolved_config.toml", out.str());
}

void add_net_options(CLI::App* app, net::NetConfig& c, std::string& dtype) {
  app->add_option("--levels", c.levels, "pyramid levels")->capture_default_str();
  app->add_option("--filters", c.filters, "channels per level")->capture_default_str();
  app->add_option("--attention-depths", c.attention_depths, "axial layers per level")
      ->capture_default_str();
  app->add_option("--heads", c.heads, "attention heads")->capture_default_str();
  app->add_option("--input-size", c.input_size, "network input H = W")->capture_default_str();
  app->add_flag("--attention,!--no-attention", c.attention, "attention bridges")->capture_default_str();
  app->add_option("--dtype", dtype, "f32 or f64")
      ->check(CLI::IsMember({"f32", "f64"}))
      ->capture_default_str();
}

std::vector<std::size_t> split_indices(const phantom::Dataset& ds, const std::string& which) {
  if (which == "train") return ds.split.train;
  if (which == "val") return ds.split.val;
  if (which == "test") return ds.split.test;
  std::vector<std::size_t> all(ds.cases.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return all;
}

void print_report(const metrics::MetricReport& r) {
  for (const auto& c : r.classes) {
    auto f = [](const std::optional<double>& v) {
      char buf[32];
      if (!v) return std::string("NA");
      std::snprintf(buf, sizeof buf, "%.4f", *v);
      return std::string(buf);
    };
    std::printf("  %-12s dsc %s  hd95 %s  msd %s  (valid %zu, undefined %zu)%s\n", c.name.c_str(),
                f(c.dsc_mean).c_str(), f(c.hd95_mean).c_str(), f(c.msd_mean).c_str(), c.n_valid,
                c.n_undefined, c.flagged() ? "  FLAGGED" : "");
  }
}

// ---- subcommands ---------------------------------------------------------

struct GenArgs {
  std::size_t cases = 0;
  std::size_t size = 32;
  std::size_t organs = 4;
  double noise = 0.03;
  double val = 0.1, test = 0.2;
};

int run_gen(const Global& g, const GenArgs& a, const CLI::App& sub) {
  require_out(g, "gen");
  if (a.cases == 0) throw UsageError("gen: --cases must be at least 1");
  phantom::PhantomSpec spec;
  spec.size = a.size;
  spec.num_organs = a.organs;
  spec.noise_std = a.noise;
  spec.seed = g.seed;
  auto ds = phantom::generate_dataset(g.out, spec, a.cases, {1.0 - a.val - a.test, a.val, a.test},
                                      g.force);
  write_resolved(g, sub);
  std::printf("generated %zu cases in %s: train %zu, val %zu, test %zu\n", ds.cases.size(),
              g.out.string().c_str(), ds.split.train.size(), ds.split.val.size(),
              ds.split.test.size());
  return 0;
}

struct TrainArgs {
  fs::path data;
  fs::path resume;
  std::string cases = "train";
  std::string dtype = "f32";
  net::NetConfig net;
  train::TrainConfig train;
};

int run_train(const Global& g, TrainArgs a, const CLI::App& sub) {
  require_out(g, "train");
  prepare_out(g, !a.resume.empty());
  auto ds = phantom::load_dataset(a.data);
  a.net.num_classes = ds.num_classes();
  a.net.dtype = a.dtype == "f64" ? DType::f64 : DType::f32;
  a.train.seed = g.seed;
  a.train.checkpoint_dir = g.out / "checkpoint";
  a.train.log_path = g.out / "train.jsonl";
  write_resolved(g, sub);
  const auto train_cases = split_indices(ds, a.cases);
  std::optional<fs::path> resume;
  if (!a.resume.empty()) resume = a.resume;
  auto res = train::train(a.net, ds, train_cases, ds.split.val, a.train, resume);
  const auto& ck = res.checkpoint;
  std::printf("trained %zu steps on %zu cases; final loss %.6f%s\n", ck.optimizer.step,
              train_cases.size(), ck.loss_history.empty() ? 0.0 : ck.loss_history.back(),
              res.stopped_early ? " (stopped early)" : "");
  if (res.last_eval) {
    res.last_eval->report.write(g.out / "val_report.csv");
    std::printf("validation mean foreground DSC %.4f\n", res.last_eval->mean_foreground_dsc);
  }
  std::printf("checkpoint: %s\n", a.train.checkpoint_dir.string().c_str());
  return 0;
}

struct EvalArgs {
  fs::path data, checkpoint;
  std::string split = "test";
  std::vector<std::string> cases;
};

std::vector<std::size_t> selected(const phantom::Dataset& ds, const EvalArgs& a) {
  if (a.cases.empty()) return split_indices(ds, a.split);
  std::vector<std::size_t> out;
  for (const auto& name : a.cases) {
    std::size_t i = 0;
    while (i < ds.cases.size() && ds.cases[i].name != name) ++i;
    if (i == ds.cases.size()) throw UsageError("unknown case " + name);
    out.push_back(i);
  }
  return out;
}

int run_eval(const Global& g, const EvalArgs& a, const CLI::App& sub) {
  require_out(g, "eval");
  prepare_out(g);
  auto ck = train::load_checkpoint(a.checkpoint);
  auto ds = phantom::load_dataset(a.data);
  const auto idx = selected(ds, a);
  if (idx.empty()) throw UsageError("eval: split '" + a.split + "' is empty");
  auto ev = train::evaluate(ck.graph, ds, idx);
  ev.report.write(g.out / "report.csv");
  write_resolved(g, sub);
  std::printf("evaluated %zu cases; mean foreground DSC %.4f\n", idx.size(), ev.mean_foreground_dsc);
  print_report(ev.report);
  return 0;
}

int run_predict(const Global& g, const EvalArgs& a, const CLI::App& sub) {
  require_out(g, "predict");
  prepare_out(g);
  auto ck = train::load_checkpoint(a.checkpoint);
  auto ds = phantom::load_dataset(a.data);
  const auto idx = selected(ds, a);
  if (idx.empty()) throw UsageError("predict: no cases selected");
  auto ev = train::evaluate(ck.graph, ds, idx);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const auto& c = ds.cases[idx[k]];
    const std::size_t s = ck.graph.config.input_size;
    const auto shown = c.data.labels.height() == s ? c.data : phantom::center_crop(c.data, s);
    const auto& pred = ev.predictions[k];
    const fs::path base = g.out / c.name;
    wtf1::save(base.string() + "_pred.wtf1", pred);
    render::write_pgm(base.string() + "_input.pgm", s, s, render::grayscale(shown.image));
    render::write_ppm(base.string() + "_overlay.ppm", render::overlay(shown.image, pred, shown.labels));
    render::write_ppm(base.string() + "_diff.ppm", render::difference_map(pred, shown.labels));
  }
  write_resolved(g, sub);
  std::printf("wrote predictions for %zu cases to %s\n", idx.size(), g.out.string().c_str());
  return 0;
}

struct GradArgs {
  double eps = 1e-4;
  double layer_threshold = 1e-5;
  double network_threshold = 1e-4;
  std::size_t coords = 200;
  bool skip_network = false;
  std::size_t num_classes = 5;
  std::string dtype = "f64";
  net::NetConfig net;
};

int run_gradcheck(const Global& g, const GradArgs& a, const CLI::App& sub) {
  auto checks = diag::primitive_grad_checks(a.eps, a.layer_threshold, g.seed);
  if (!a.skip_network) {
    auto cfg = a.net;
    cfg.num_classes = a.num_classes;
    checks.push_back(diag::network_grad_check(cfg, a.coords, a.eps, a.network_threshold, g.seed));
  }
  std::ostringstream csv;
  csv << "layer,max_rel_error,threshold,coords,kink_coords,worst_param,status\n";
  std::vector<const diag::LayerCheck*> failed;
  for (const auto& c : checks) {
    char err[32], thr[32];
    std::snprintf(err, sizeof err, "%.3e", c.max_rel_error);
    std::snprintf(thr, sizeof thr, "%.0e", c.threshold);
    std::printf("%-16s max rel err %s (threshold %s, %zu coords, %zu at kinks)  %s\n", c.name.c_str(),
                err, thr, c.coords, c.kink_coords, c.passed() ? "ok" : "FAIL");
    csv << c.name << "," << err << "," << thr << "," << c.coords << "," << c.kink_coords << ","
        << c.worst_param << "," << (c.passed() ? "ok" : "fail") << "\n";
    if (!c.passed()) failed.push_back(&c);
  }
  if (!g.out.empty()) {
    prepare_out(g);
    write_text(g.out / "gradcheck.csv", csv.str());
    write_resolved(g, sub);
  }
  if (failed.empty()) return 0;
  std::string msg = "gradient check failed:";
  for (const auto* c : failed) msg += " " + c->name + " (worst at " + c->worst_param + ")";
  throw RuntimeFailure(msg);
}

struct BenchArgs {
  diag::BenchOptions opts;
};

int run_bench(const Global& g, BenchArgs a, const CLI::App& sub) {
  a.opts.seed = g.seed;
  auto rows = diag::run_attention_bench(a.opts);
  const double sa = diag::fitted_slope(rows, attn::AttentionMode::axial);
  std::size_t nfull = 0;
  for (const auto& r : rows) nfull += r.mode == attn::AttentionMode::full;
  const bool have_full = nfull >= 2;
  const double sf = have_full ? diag::fitted_slope(rows, attn::AttentionMode::full) : 0.0;
  std::cout << diag::bench_csv(rows);
  std::printf("fitted slope vs tokens: axial %.3f (theory 1.5)", sa);
  if (have_full) std::printf(", full %.3f (theory 2.0)", sf);
  std::printf("\n");
  for (const auto& r : rows)
    if (r.size == 32 && r.mode == attn::AttentionMode::full)
      for (const auto& q : rows)
        if (q.size == 32 && q.mode == attn::AttentionMode::axial)
          std::printf("full/axial flop ratio at 32x32: %gx\n", double(r.flops) / double(q.flops));
  if (!g.out.empty()) {
    prepare_out(g);
    write_text(g.out / "bench.csv", diag::bench_csv(rows));
    std::ostringstream s;
    s << "mode,fitted_slope,theory\naxial," << sa << ",1.5\n";
    if (have_full) s << "full," << sf << ",2.0\n";
    write_text(g.out / "bench_slopes.csv", s.str());
    write_resolved(g, sub);
  }
  return 0;
}

bool json_config_requested(int argc, char** argv) {
  for (int i = 1; i < argc; ++i) {
    std::string a = argv[i];
    std::string value;
    if (a == "--config" && i + 1 < argc) value = argv[i + 1];
    else if (a.rfind("--config=", 0) == 0) value = a.substr(9);
    if (value.size() >= 5 && value.compare(value.size() - 5, 5, ".json") == 0) return true;
  }
  return false;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"WAU-net desk-scale segmentation engine"};
  app.require_subcommand(1);
  app.fallthrough();
  app.allow_config_extras(CLI::config_extras_mode::error);
  if (json_config_requested(argc, argv)) app.config_formatter(std::make_shared<JsonConfig>());

  Global g;
  app.set_config("--config", "", "TOML or JSON file of option defaults");
  app.add_option("--seed", g.seed, "master seed")->capture_default_str();
  app.add_option("--out", g.out, "output directory");
  app.add_flag("--force", g.force, "overwrite a non-empty output directory");

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen", "generate a phantom dataset");
  gen_cmd->add_option("--cases", gen.cases, "number of cases")->required();
  gen_cmd->add_option("--size", gen.size, "image size")->capture_default_str();
  gen_cmd->add_option("--organs", gen.organs, "foreground classes")->capture_default_str();
  gen_cmd->add_option("--noise", gen.noise, "Gaussian noise std")->capture_default_str();
  gen_cmd->add_option("--val", gen.val, "validation fraction")->capture_default_str();
  gen_cmd->add_option("--test", gen.test, "test fraction")->capture_default_str();

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "train a network on a dataset");
  train_cmd->add_option("--data", tr.data, "dataset directory")->required();
  train_cmd->add_option("--cases", tr.cases, "cases to train on")
      ->check(CLI::IsMember({"train", "all"}))
      ->capture_default_str();
  train_cmd->add_option("--resume", tr.resume, "checkpoint directory to resume from");
  train_cmd->add_option("--steps", tr.train.total_steps, "total optimizer steps")->capture_default_str();
  train_cmd->add_option("--lr", tr.train.lr0, "initial learning rate")->capture_default_str();
  train_cmd->add_option("--poly-power", tr.train.poly_power, "decay exponent")->capture_default_str();
  train_cmd->add_option("--batch", tr.train.batch_size, "batch size")->capture_default_str();
  train_cmd->add_option("--eval-every", tr.train.eval_every, "validation period, 0 = off")
      ->capture_default_str();
  train_cmd->add_option("--checkpoint-every", tr.train.checkpoint_every, "checkpoint period")
      ->capture_default_str();
  train_cmd->add_flag("--augment,!--no-augment", tr.train.augment, "random shift/rotate/flip")
      ->capture_default_str();
  train_cmd->add_option("--grad-clip", tr.train.grad_clip, "global norm limit, 0 = off")
      ->capture_default_str();
  train_cmd->add_option("--patience", tr.train.early_stop_patience, "early-stop patience in steps")
      ->capture_default_str();
  train_cmd->add_flag("--freeze-attention", tr.train.freeze_attention, "keep attention at init")
      ->capture_default_str();
  train_cmd->add_option("--stop-after", tr.train.stop_after, "end the run after this step")
      ->capture_default_str();
  add_net_options(train_cmd, tr.net, tr.dtype);

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  EvalArgs pr;
  auto* predict_cmd = app.add_subcommand("predict", "write predicted masks and renderings");
  for (auto [cmd, args] : {std::pair{eval_cmd, &ev}, std::pair{predict_cmd, &pr}}) {
    cmd->add_option("--data", args->data, "dataset directory")->required();
    cmd->add_option("--checkpoint", args->checkpoint, "checkpoint directory")->required();
    cmd->add_option("--split", args->split, "cases to use")
        ->check(CLI::IsMember({"train", "val", "test", "all"}))
        ->capture_default_str();
    cmd->add_option("--case", args->cases, "explicit case names");
  }

  GradArgs gc;
  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  grad_cmd->add_option("--eps", gc.eps, "central difference step")->capture_default_str();
  grad_cmd->add_option("--layer-threshold", gc.layer_threshold, "per-primitive limit")
      ->capture_default_str();
  grad_cmd->add_option("--network-threshold", gc.network_threshold, "whole-network limit")
      ->capture_default_str();
  grad_cmd->add_option("--coords", gc.coords, "sampled network coordinates")->capture_default_str();
  grad_cmd->add_flag("--skip-network", gc.skip_network, "primitives only")->capture_default_str();
  grad_cmd->add_option("--classes", gc.num_classes, "network classes")->capture_default_str();
  add_net_options(grad_cmd, gc.net, gc.dtype);

  BenchArgs bn;
  auto* bench_cmd = app.add_subcommand("bench", "axial vs full attention scaling");
  bench_cmd->add_option("--sizes", bn.opts.sizes, "H = W values")->capture_default_str();
  bench_cmd->add_option("--full-max", bn.opts.full_max_size, "largest size for full attention")
      ->capture_default_str();
  bench_cmd->add_option("--channels", bn.opts.channels, "channels")->capture_default_str();
  bench_cmd->add_option("--heads", bn.opts.heads, "heads")->capture_default_str();
  bench_cmd->add_option("--batch", bn.opts.batch, "images per call")->capture_default_str();
  bench_cmd->add_option("--repeats", bn.opts.repeats, "timed repeats (best kept)")
      ->capture_default_str();
  bench_cmd->add_option("--min-seconds", bn.opts.min_seconds, "minimum duration per repeat")
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen_cmd) return run_gen(g, gen, *gen_cmd);
    if (*train_cmd) return run_train(g, tr, *train_cmd);
    if (*eval_cmd) return run_eval(g, ev, *eval_cmd);
    if (*predict_cmd) return run_predict(g, pr, *predict_cmd);
    if (*grad_cmd) return run_gradcheck(g, gc, *grad_cmd);
    if (*bench_cmd) return run_bench(g, bn, *bench_cmd);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
