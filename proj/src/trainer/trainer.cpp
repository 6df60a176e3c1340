#include "waunet/trainer/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "json.hpp"
#include "waunet/tensor/ops.hpp"
#include "waunet/tensor/wtf1.hpp"

namespace waunet::train {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kCheckpointFormat = "waunet-checkpoint/1";

json net_json(const net::NetConfig& c) {
  return {{"levels", c.levels},
          {"filters", c.filters},
          {"attention_depths", c.attention_depths},
          {"heads", c.heads},
          {"num_classes", c.num_classes},
          {"input_size", c.input_size},
          {"input_channels", c.input_channels},
          {"attention", c.attention},
          {"dtype", std::string(dtype_name(c.dtype))}};
}

net::NetConfig net_from(const json& j) {
  net::NetConfig c;
  c.levels = j.at("levels");
  c.filters = j.at("filters").get<std::vector<std::size_t>>();
  c.attention_depths = j.at("attention_depths").get<std::vector<std::size_t>>();
  c.heads = j.at("heads");
  c.num_classes = j.at("num_classes");
  c.input_size = j.at("input_size");
  c.input_channels = j.at("input_channels");
  c.attention = j.at("attention");
  c.dtype = j.at("dtype") == "f64" ? DType::f64 : DType::f32;
  return c;
}

json train_json(const TrainConfig& c) {
  return {{"lr0", c.lr0},
          {"poly_power", c.poly_power},
          {"total_steps", c.total_steps},
          {"batch_size", c.batch_size},
          {"adam_beta1", c.adam_beta1},
          {"adam_beta2", c.adam_beta2},
          {"adam_eps", c.adam_eps},
          {"seed", c.seed},
          {"eval_every", c.eval_every},
          {"checkpoint_every", c.checkpoint_every},
          {"augment", c.augment},
          {"grad_clip", c.grad_clip},
          {"early_stop_patience", c.early_stop_patience},
          {"freeze_attention", c.freeze_attention}};
}

TrainConfig train_from(const json& j) {
  TrainConfig c;
  c.lr0 = j.at("lr0");
  c.poly_power = j.at("poly_power");
  c.total_steps = j.at("total_steps");
  c.batch_size = j.at("batch_size");
  c.adam_beta1 = j.at("adam_beta1");
  c.adam_beta2 = j.at("adam_beta2");
  c.adam_eps = j.at("adam_eps");
  c.seed = j.at("seed");
  c.eval_every = j.at("eval_every");
  c.checkpoint_every = j.at("checkpoint_every");
  c.augment = j.at("augment");
  c.grad_clip = j.at("grad_clip");
  c.early_stop_patience = j.at("early_stop_patience");
  c.freeze_attention = j.at("freeze_attention");
  return c;
}

json report_json(const metrics::MetricReport& r) { return json::parse(r.to_json()); }

void copy_into(Tensor t, const Tensor& src, const std::string& name) {
  if (src.shape() != t.shape())
    throw FormatError("checkpoint: parameter " + name + " has shape " + shape_str(src.shape()) +
                      ", expected " + shape_str(t.shape()));
  if (src.dtype() != t.dtype())
    throw FormatError("checkpoint: parameter " + name + " is " + std::string(dtype_name(src.dtype())) +
                      ", network is " + std::string(dtype_name(t.dtype())));
  dispatch(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto s = src.data<T>();
    std::copy(s.begin(), s.end(), t.data<T>().begin());
  });
}

Tensor moments_tensor(const std::vector<double>& v, const Shape& shape) {
  return Tensor::from_values(shape, v, DType::f64);
}

class JsonLog {
 public:
  JsonLog(const fs::path& path, bool append) {
    if (path.empty()) return;
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    out_.open(path, append ? std::ios::app : std::ios::trunc);
    if (!out_) throw UsageError("cannot open log " + path.string());
  }
  void write(const json& j) {
    if (out_.is_open()) out_ << j.dump() << "\n" << std::flush;
  }

 private:
  std::ofstream out_;
};

double global_norm(std::span<const NamedParam> params) {
  double s = 0;
  for (const auto& p : params)
    if (p.tensor.has_grad())
      for (double g : p.tensor.grad().to_vector()) s += g * g;
  return std::sqrt(s);
}

void scale_grads(std::span<const NamedParam> params, double factor) {
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    Tensor t = p.tensor;
    dispatch(t.dtype(), [&](auto tag) {
      using T = decltype(tag);
      for (auto& g : t.grad_data<T>()) g = static_cast<T>(g * factor);
    });
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lr0 > 0)) throw ConfigError("train: lr0 must be > 0");
  if (total_steps < 1) throw ConfigError("train: total_steps must be >= 1");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (!(adam_beta1 >= 0 && adam_beta1 < 1) || !(adam_beta2 >= 0 && adam_beta2 < 1))
    throw ConfigError("train: Adam betas must be in [0, 1)");
  if (!(adam_eps >= 0)) throw ConfigError("train: adam_eps must be >= 0");
  if (!(poly_power >= 0)) throw ConfigError("train: poly_power must be >= 0");
  if (!(grad_clip >= 0)) throw ConfigError("train: grad_clip must be >= 0");
}

double poly_lr(std::size_t step, const TrainConfig& config) {
  if (step > config.total_steps)
    throw UsageError("poly_lr: step " + std::to_string(step) + " beyond " +
                     std::to_string(config.total_steps));
  const double frac = 1.0 - double(step) / double(config.total_steps);
  return config.lr0 * std::pow(frac, config.poly_power);
}

void adam_step(std::span<const NamedParam> params, OptimizerState& state, double lr,
               const TrainConfig& config) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.tensor.numel(), 0.0);
      state.v.emplace_back(p.tensor.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw UsageError("adam_step: optimizer state mismatch");
  // Validate every gradient before touching any parameter.
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad().to_vector())
      if (!std::isfinite(g)) throw TrainingError("non-finite gradient in parameter " + p.name);
  }
  ++state.step;
  const double b1 = config.adam_beta1, b2 = config.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, double(state.step));
  const double c2 = 1.0 - std::pow(b2, double(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor t = params[i].tensor;
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != t.numel()) throw UsageError("adam_step: moment size mismatch for " + params[i].name);
    const bool has = t.has_grad();
    dispatch(t.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto w = t.data<T>();
      std::span<const T> g = has ? std::span<const T>(t.grad_data<T>()) : std::span<const T>();
      for (std::size_t k = 0; k < w.size(); ++k) {
        const double gk = has ? double(g[k]) : 0.0;
        m[k] = b1 * m[k] + (1 - b1) * gk;
        v[k] = b2 * v[k] + (1 - b2) * gk * gk;
        const double mhat = m[k] / c1, vhat = v[k] / c2;
        w[k] = static_cast<T>(double(w[k]) - lr * mhat / (std::sqrt(vhat) + config.adam_eps));
      }
    });
  }
}

std::vector<NamedParam> trainable(const net::NetworkGraph& graph, const TrainConfig& config) {
  std::vector<NamedParam> out;
  for (auto& [name, t] : graph.named_parameters()) {
    if (config.freeze_attention && name.starts_with("attn")) continue;
    out.push_back({name, t});
  }
  return out;
}

void save_checkpoint(const fs::path& dir, const Checkpoint& ckpt) {
  const auto params = trainable(ckpt.graph, ckpt.config);
  const fs::path tmp = dir.string() + ".tmp";
  fs::remove_all(tmp);
  fs::create_directories(tmp / "params");
  fs::create_directories(tmp / "adam");
  json plist = json::array();
  for (auto& [name, t] : ckpt.graph.named_parameters()) {
    plist.push_back({{"name", name}, {"shape", t.shape()}});
    wtf1::save(tmp / "params" / (name + ".wtf1"), t);
  }
  json optimized = json::array();
  for (std::size_t i = 0; i < params.size(); ++i) {
    optimized.push_back(params[i].name);
    if (ckpt.optimizer.m.empty()) continue;
    const Shape& s = params[i].tensor.shape();
    wtf1::save(tmp / "adam" / (params[i].name + ".m.wtf1"), moments_tensor(ckpt.optimizer.m[i], s));
    wtf1::save(tmp / "adam" / (params[i].name + ".v.wtf1"), moments_tensor(ckpt.optimizer.v[i], s));
  }
  json m = {{"format", kCheckpointFormat},
            {"net", net_json(ckpt.graph.config)},
            {"init_seed", ckpt.init_seed},
            {"train", train_json(ckpt.config)},
            {"step", ckpt.optimizer.step},
            {"adam_initialized", !ckpt.optimizer.m.empty()},
            {"params", plist},
            {"optimized", optimized},
            {"loss_history", ckpt.loss_history},
            {"best_val_dsc", ckpt.best_val_dsc},
            {"best_step", ckpt.best_step}};
  {
    std::ofstream out(tmp / "manifest.json", std::ios::trunc);
    if (!out) throw FormatError("cannot write checkpoint manifest in " + tmp.string());
    out << m.dump(2) << "\n";
  }
  // The previous checkpoint is replaced only once the new one is complete.
  fs::remove_all(dir);
  fs::rename(tmp, dir);
}

Checkpoint load_checkpoint(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.json";
  std::ifstream in(mpath);
  if (!in) throw FormatError("checkpoint: cannot open " + mpath.string());
  try {
    const json m = json::parse(in);
    if (m.at("format") != kCheckpointFormat)
      throw FormatError("checkpoint: " + mpath.string() + ": unknown format");
    Checkpoint c;
    c.init_seed = m.at("init_seed");
    c.config = train_from(m.at("train"));
    c.graph = net::build_waunet(net_from(m.at("net")), c.init_seed);
    for (const auto& p : m.at("params")) {
      const std::string name = p.at("name");
      copy_into(c.graph.parameter(name), wtf1::load_tensor(dir / "params" / (name + ".wtf1")), name);
    }
    c.optimizer.step = m.at("step");
    const auto params = trainable(c.graph, c.config);
    const auto optimized = m.at("optimized").get<std::vector<std::string>>();
    if (optimized.size() != params.size())
      throw FormatError("checkpoint: " + mpath.string() + ": optimizer covers " +
                        std::to_string(optimized.size()) + " parameters, expected " +
                        std::to_string(params.size()));
    if (m.at("adam_initialized").get<bool>())
      for (const auto& p : params) {
        auto mt = wtf1::load_tensor(dir / "adam" / (p.name + ".m.wtf1"));
        auto vt = wtf1::load_tensor(dir / "adam" / (p.name + ".v.wtf1"));
        if (mt.shape() != p.tensor.shape() || vt.shape() != p.tensor.shape())
          throw FormatError("checkpoint: Adam moments of " + p.name + " have the wrong shape");
        c.optimizer.m.push_back(mt.to_vector());
        c.optimizer.v.push_back(vt.to_vector());
      }
    c.loss_history = m.at("loss_history").get<std::vector<double>>();
    c.best_val_dsc = m.at("best_val_dsc");
    c.best_step = m.at("best_step");
    return c;
  } catch (const json::exception& e) {
    throw FormatError("checkpoint: " + mpath.string() + ": " + e.what());
  }
}

std::pair<Tensor, LabelMap> make_batch(const net::NetworkGraph& graph,
                                       const std::vector<const phantom::Phantom*>& cases) {
  if (cases.empty()) throw UsageError("make_batch: no cases");
  const std::size_t s = graph.config.input_size, ch = graph.config.input_channels;
  std::vector<double> px;
  std::vector<LabelMap> labels;
  for (const auto* c : cases) {
    if (c->image.rank() != 3 || c->image.dim(0) != ch)
      throw DimensionError("case image " + shape_str(c->image.shape()) + " does not have " +
                           std::to_string(ch) + " channels");
    if (c->labels.height() == s && c->labels.width() == s) {
      auto v = c->image.to_vector();
      px.insert(px.end(), v.begin(), v.end());
      labels.push_back(c->labels);
      continue;
    }
    auto cropped = phantom::center_crop(*c, s);
    auto v = cropped.image.to_vector();
    px.insert(px.end(), v.begin(), v.end());
    labels.push_back(std::move(cropped.labels));
  }
  return {Tensor::from_values({cases.size(), ch, s, s}, px, graph.config.dtype),
          LabelMap::stack(labels)};
}

EvalResult evaluate(const net::NetworkGraph& graph, const phantom::Dataset& data,
                    const std::vector<std::size_t>& cases) {
  if (cases.empty()) throw UsageError("evaluate: no cases");
  NoGradGuard no_grad;
  EvalResult r;
  std::vector<LabelMap> truth;
  for (auto i : cases) {
    const auto& c = data.cases.at(i).data;
    auto [x, y] = make_batch(graph, {&c});
    r.predictions.push_back(net::predict_labels(net::forward(graph, x), y.spacing()));
    truth.push_back(std::move(y));
  }
  std::vector<std::string> names;
  for (std::size_t k = 1; k < graph.config.num_classes; ++k)
    names.push_back(k <= data.class_names.size() ? data.class_names[k - 1]
                                                 : "class_" + std::to_string(k));
  r.report = metrics::metric_report(truth, r.predictions, names);
  double sum = 0;
  std::size_t n = 0;
  for (const auto& c : r.report.classes)
    if (c.dsc_mean) {
      sum += *c.dsc_mean;
      ++n;
    }
  r.mean_foreground_dsc = n ? sum / double(n) : 0.0;
  return r;
}

std::vector<std::size_t> batch_indices(std::size_t step, const std::vector<std::size_t>& cases,
                                       const TrainConfig& config) {
  if (cases.empty()) throw UsageError("no training cases");
  const std::size_t n = cases.size();
  std::vector<std::size_t> out;
  std::size_t cached_epoch = SIZE_MAX;
  std::vector<std::size_t> perm;
  for (std::size_t slot = 0; slot < config.batch_size; ++slot) {
    const std::size_t sample = step * config.batch_size + slot;
    const std::size_t epoch = sample / n;
    if (epoch != cached_epoch) {
      perm.resize(n);
      std::iota(perm.begin(), perm.end(), 0);
      Rng rng(mix_seed(mix_seed(config.seed, hash_name("epoch")), epoch));
      rng.shuffle(perm);
      cached_epoch = epoch;
    }
    out.push_back(cases[perm[sample % n]]);
  }
  return out;
}

TrainResult train(const net::NetConfig& net_config, const phantom::Dataset& data,
                  const std::vector<std::size_t>& train_cases,
                  const std::vector<std::size_t>& val_cases, const TrainConfig& config,
                  const std::optional<fs::path>& resume) {
  config.validate();
  if (train_cases.empty()) throw UsageError("train: the training split is empty");
  if (data.num_classes() > net_config.num_classes)
    throw ConfigError("train: dataset has " + std::to_string(data.num_classes()) +
                      " classes, network predicts " + std::to_string(net_config.num_classes));
  TrainResult result;
  Checkpoint& ck = result.checkpoint;
  if (resume) {
    ck = load_checkpoint(*resume);
    ck.config.stop_after = config.stop_after;
    ck.config.checkpoint_dir = config.checkpoint_dir;
    ck.config.log_path = config.log_path;
  } else {
    ck.graph = net::build_waunet(net_config, config.seed);
    ck.init_seed = config.seed;
    ck.config = config;
  }
  const TrainConfig& cfg = ck.config;
  const auto params = trainable(ck.graph, cfg);
  JsonLog log(cfg.log_path, resume.has_value());
  const std::uint64_t aug_root = mix_seed(cfg.seed, hash_name("augment"));
  auto save = [&] {
    if (!cfg.checkpoint_dir.empty()) save_checkpoint(cfg.checkpoint_dir, ck);
  };

  for (std::size_t t = ck.optimizer.step; t < cfg.total_steps; ++t) {
    const double lr = poly_lr(t, cfg);
    const auto idx = batch_indices(t, train_cases, cfg);
    std::vector<phantom::Phantom> samples;
    for (std::size_t slot = 0; slot < idx.size(); ++slot) {
      const auto& c = data.cases.at(idx[slot]).data;
      if (!cfg.augment) {
        samples.push_back(c);
        continue;
      }
      auto params = phantom::AugmentParams::for_size(c.labels.height(),
                                                      mix_seed(mix_seed(aug_root, t), slot));
      samples.push_back(phantom::augment(c, params));
    }
    std::vector<const phantom::Phantom*> ptrs;
    for (const auto& s : samples) ptrs.push_back(&s);
    auto [x, y] = make_batch(ck.graph, ptrs);

    for (const auto& p : params) Tensor(p.tensor).zero_grad();
    Tensor loss = ops::cross_entropy_loss(net::forward(ck.graph, x), y);
    const double value = loss.item();
    if (!std::isfinite(value))
      throw TrainingError("non-finite loss at step " + std::to_string(t) +
                          (cfg.checkpoint_dir.empty()
                               ? std::string()
                               : "; last good checkpoint kept in " + cfg.checkpoint_dir.string()));
    loss.backward();
    if (cfg.grad_clip > 0) {
      const double norm = global_norm(params);
      if (norm > cfg.grad_clip) scale_grads(params, cfg.grad_clip / norm);
    }
    adam_step(params, ck.optimizer, lr, cfg);
    ck.loss_history.push_back(value);
    log.write({{"step", t}, {"lr", lr}, {"loss", value}});

    const std::size_t done = t + 1;
    if (cfg.eval_every && done % cfg.eval_every == 0 && !val_cases.empty()) {
      result.last_eval = evaluate(ck.graph, data, val_cases);
      const double dsc = result.last_eval->mean_foreground_dsc;
      log.write({{"step", t}, {"eval", report_json(result.last_eval->report)},
                 {"mean_foreground_dsc", dsc}});
      if (dsc > ck.best_val_dsc) {
        ck.best_val_dsc = dsc;
        ck.best_step = done;
      } else if (cfg.early_stop_patience && done - ck.best_step >= cfg.early_stop_patience) {
        result.stopped_early = true;
        break;
      }
    }
    if (cfg.checkpoint_every && done % cfg.checkpoint_every == 0 && done < cfg.total_steps) save();
    if (cfg.stop_after && done >= cfg.stop_after) break;
  }
  save();
  return result;
}

std::vector<FoldResult> cross_validate(const net::NetConfig& net_config,
                                       const phantom::Dataset& data, std::size_t folds,
                                       const TrainConfig& config) {
  const std::size_t n = data.cases.size();
  if (folds < 2 || folds > n)
    throw ConfigError("cross_validate: folds must be in [2, " + std::to_string(n) + "]");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(mix_seed(config.seed, hash_name("folds")));
  rng.shuffle(order);
  std::vector<FoldResult> out;
  for (std::size_t f = 0; f < folds; ++f) {
    FoldResult fr;
    for (std::size_t i = 0; i < n; ++i) (i % folds == f ? fr.val : fr.train).push_back(order[i]);
    std::sort(fr.train.begin(), fr.train.end());
    std::sort(fr.val.begin(), fr.val.end());
    TrainConfig fc = config;
    if (!config.checkpoint_dir.empty())
      fc.checkpoint_dir = config.checkpoint_dir / ("fold_" + std::to_string(f));
    if (!config.log_path.empty())
      fc.log_path = config.log_path.parent_path() /
                    (config.log_path.stem().string() + "_fold" + std::to_string(f) +
                     config.log_path.extension().string());
    auto res = train(net_config, data, fr.train, fr.val, fc);
    fr.eval = evaluate(res.checkpoint.graph, data, fr.val);
    out.push_back(std::move(fr));
  }
  return out;
}

}  // namespace waunet::train
