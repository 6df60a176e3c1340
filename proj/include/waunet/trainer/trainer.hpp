#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "waunet/metrics/metrics.hpp"
#include "waunet/network/waunet.hpp"
#include "waunet/phantom/dataset.hpp"

namespace waunet::train {

struct TrainConfig {
  double lr0 = 1e-3;
  double poly_power = 0.9;
  std::size_t total_steps = 300;
  std::size_t batch_size = 2;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  std::size_t eval_every = 0;        // 0 disables periodic validation
  std::size_t checkpoint_every = 0;  // 0 writes only the final checkpoint
  std::filesystem::path checkpoint_dir;
  std::filesystem::path log_path;    // JSON lines; empty disables
  bool augment = true;
  double grad_clip = 0.0;            // global L2 max-norm; 0 disables
  std::size_t early_stop_patience = 0;  // steps without validation DSC gain; 0 disables
  // Attention parameters keep their initial values (the ablation baseline).
  bool freeze_attention = false;
  // Ends the run after this many total steps without finishing the schedule.
  std::size_t stop_after = 0;

  void validate() const;
};

double poly_lr(std::size_t step, const TrainConfig& config);

struct OptimizerState {
  std::size_t step = 0;
  std::vector<std::vector<double>> m, v;  // indexed like the parameter list
};

struct NamedParam {
  std::string name;
  Tensor tensor;
};

// One Adam update from the gradients accumulated on `params`. A parameter
// without a gradient is treated as having a zero gradient.
void adam_step(std::span<const NamedParam> params, OptimizerState& state, double lr,
               const TrainConfig& config);

std::vector<NamedParam> trainable(const net::NetworkGraph& graph, const TrainConfig& config);

struct Checkpoint {
  net::NetworkGraph graph;
  std::uint64_t init_seed = 0;
  TrainConfig config;
  OptimizerState optimizer;
  std::vector<double> loss_history;
  double best_val_dsc = -1.0;
  std::size_t best_step = 0;
};

// Manifest plus one WTF1 file per parameter and per Adam moment.
void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

struct EvalResult {
  metrics::MetricReport report;
  std::vector<LabelMap> predictions;  // one per evaluated case
  // Mean over foreground classes of the per-class mean DSC.
  double mean_foreground_dsc = 0.0;
};

EvalResult evaluate(const net::NetworkGraph& graph, const phantom::Dataset& data,
                    const std::vector<std::size_t>& cases);

// Images of the cases stacked to [N, C, S, S] in the network dtype, centre
// cropped to the network input size.
std::pair<Tensor, LabelMap> make_batch(const net::NetworkGraph& graph,
                                       const std::vector<const phantom::Phantom*>& cases);

struct TrainResult {
  Checkpoint checkpoint;
  std::optional<EvalResult> last_eval;
  bool stopped_early = false;
};

// Trains from scratch, or resumes when `resume` names a checkpoint
// directory. Batch composition and augmentation are pure functions of
// (seed, step).
TrainResult train(const net::NetConfig& net_config, const phantom::Dataset& data,
                  const std::vector<std::size_t>& train_cases,
                  const std::vector<std::size_t>& val_cases, const TrainConfig& config,
                  const std::optional<std::filesystem::path>& resume = std::nullopt);

// Dataset indices of the training batch at `step`.
std::vector<std::size_t> batch_indices(std::size_t step, const std::vector<std::size_t>& cases,
                                       const TrainConfig& config);

struct FoldResult {
  std::vector<std::size_t> train, val;
  EvalResult eval;
};

// k-fold cross-validation over all cases of the dataset; fold f trains
// into <checkpoint_dir>/fold_f.
std::vector<FoldResult> cross_validate(const net::NetConfig& net_config,
                                       const phantom::Dataset& data, std::size_t folds,
                                       const TrainConfig& config);

}  // namespace waunet::train
