// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "rar/gridtok.hpp"
#include "rar/model.hpp"
#include "rar/permute.hpp"

namespace rar {

struct TrainConfig {
  int batch_size = 64;
  int total_epochs = 60;
  int warmup_epochs = 10;
  double base_lr = 3e-4;
  double end_lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.96;
  double adam_eps = 1e-8;
  double weight_decay = 0.03;   // weight matrices only; see tensor_refs
  double max_grad_norm = 1.0;
  double cond_dropout = 0.1;    // probability of training a sample unconditionally
  AnnealSchedule anneal{20, 40};
  ScanKind canonical = ScanKind::row_major;
  uint64_t seed = 0;

  void validate() const;
  std::string canonical_json() const;
  static TrainConfig from_json_text(const std::string& text);
};

// Linear warmup from zero to base_lr, then cosine decay to end_lr.
double lr_at(int64_t step, int64_t steps_per_epoch, const TrainConfig& cfg);

struct OptState {
  ModelParams<float> m, v;
  int64_t step = 0;
};
OptState make_opt_state(const ModelConfig& config);

// L2 norm over every gradient tensor; throws on non-finite values, naming
// the offending tensor.
double global_grad_norm(ModelParams<float>& grads);

// Scales gradients so their global norm is at most max_norm; returns the
// pre-clip norm.
double clip_gradients(ModelParams<float>& grads, double max_norm);

// Decoupled weight decay: the decay term never enters the moments and only
// applies to tensors with decays == true.
void adamw_step(ModelParams<float>& params, ModelParams<float>& grads, OptState& opt, double lr,
                const TrainConfig& cfg);

// Independent named streams, all derived from the master seed. The branch
// stream decides random-vs-canonical per sample, the shuffle stream builds
// random orders, the data stream shuffles the dataset each epoch, and the
// condition stream drops labels.
struct TrainStreams {
  Rng data{0}, branch{0}, shuffle{0}, cond_drop{0};
  static TrainStreams make(uint64_t seed);
};

struct StepMetrics {
  int64_t step = 0;
  double epoch = 0, lr = 0, r = 0, frac_random = 0, loss = 0, grad_norm = 0;
};

// One optimizer step over the given batch. kFixedRaster compiles the order
// machinery out entirely: no branch draws, every sample trains under the
// identity order. With the annealing schedule pinned at zero the generic
// path must reproduce it bit for bit.
template <bool kFixedRaster = false>
StepMetrics train_step(ModelParams<float>& params, OptState& opt,
                       std::span<const TokenGrid> dataset, std::span<const int> batch_indices,
                       const TrainConfig& cfg, const Permutation& canonical,
                       TrainStreams& streams, int64_t steps_per_epoch, int threads = 1);

struct TrainHooks {
  std::function<void(const StepMetrics&)> on_step;
  std::function<void(int completed_epoch)> on_epoch;
};

// Epoch loop: reshuffles indices each epoch from the data stream, walks
// full batches (the remainder is dropped), and runs the generic step.
void run_training(ModelParams<float>& params, OptState& opt,
                  const std::vector<TokenGrid>& dataset, const TrainConfig& cfg,
                  TrainStreams& streams, const TrainHooks& hooks = {}, int start_epoch = 0,
                  int threads = 1);

// Optimizer-and-stream sidecar that makes checkpoint resume exact.
void save_train_state(const std::string& path, const OptState& opt, const TrainStreams& streams,
                      const TrainConfig& cfg, int next_epoch);
struct TrainState {
  OptState opt;
  TrainStreams streams;
  TrainConfig config;
  int next_epoch = 0;
};
TrainState load_train_state(const std::string& path, const ModelConfig& model_config);

}  // namespace rar
