// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rar/gridtok.hpp"
#include "rar/model.hpp"
#include "rar/train.hpp"

namespace rar {

struct NllResult {
  std::vector<double> per_step;  // -log p(y_t | y_<t, order, condition)
  double total = 0;
  double mean = 0;  // per token
};

// Teacher-forced model likelihood of one grid under a visiting order.
NllResult nll_under_order(const ModelParams<float>& params, std::span<const uint16_t> tokens,
                          std::optional<int> label, const Permutation& order);

// Exact data likelihood of the same factorization: step t conditions on the
// cells visited before t. Uses the boundary DP for the identity order when
// available, otherwise full enumeration.
NllResult oracle_nll_under_order(const PottsModel& model, const TokenGrid& grid,
                                 const Permutation& order);

struct GapReport {
  double model_nll = 0;   // mean per token
  double oracle_nll = 0;  // mean per token
  double gap = 0;         // model - oracle
  int grids = 0;
};

// Mean per-token NLL of the model against the exact oracle over a grid set,
// both conditioned on each grid's label, both under the same order.
GapReport oracle_gap(const ModelParams<float>& params, const PottsModel& model,
                     std::span<const TokenGrid> grids, const Permutation& order);

// Exact model distribution over all V^T grids (flat index: raster cells as
// big-endian base-V digits). Feasible for tiny grids only.
std::vector<double> model_grid_distribution(const ModelParams<float>& params,
                                            std::optional<int> label, const Permutation& order);

double total_variation(std::span<const double> p, std::span<const double> q);

// Ambiguous-successor probe. The task: three cells on a line, x0 uniform,
// x1 = x0, x2 = 1 - x0, trained under two orders that share the first cell
// and then diverge. At the second step the correct prediction depends only
// on which cell comes next, so the probe isolates the target embeddings:
// with them the step-1 loss trains to near zero; with the target table
// zeroed and frozen both orders present identical inputs and no model can
// beat log 2 on average.
struct ProbeConfig {
  uint64_t seed = 1;
  int steps = 1200;
  double lr = 3e-3;
};
struct ProbeReport {
  double ambiguous_nll_with_targets = 0;
  double ambiguous_nll_without_targets = 0;
};
ProbeReport disambiguation_probe(const ProbeConfig& cfg);

// Trains one model per (anneal schedule, seed) on a fixed dataset drawn from
// the spec, then reports the raster-order oracle gap on held-out grids.
struct SweepPoint {
  int start_epoch = 0;
  int end_epoch = 0;
  uint64_t seed = 0;
  double mean_nll = 0;
  double oracle_nll = 0;
  double gap = 0;
};
std::vector<SweepPoint> sweep_annealing(const GridSpec& spec, const ModelConfig& model_config,
                                        const TrainConfig& base,
                                        std::span<const std::pair<int, int>> schedules,
                                        std::span<const uint64_t> seeds, int train_grids,
                                        int eval_grids, int threads = 1,
                                        std::ostream* progress = nullptr);

// Central-difference check of the full loss gradient in double precision.
// Every tensor is randomized (head, biases, and gains included) so no path
// is trivially zero. corrupt_grads, when set, perturbs the analytic
// gradients before comparison; the harness must then report the error.
struct GradCheckConfig {
  ModelConfig model;
  uint64_t seed = 7;
  double fd_step = 1e-3;
  std::function<void(ModelParams<double>&)> corrupt_grads;
};
struct TensorGradReport {
  std::string name;
  double max_rel_err = 0;
  double max_abs_err = 0;
};
struct GradCheckReport {
  double max_rel_err = 0;
  std::string worst_tensor;
  std::vector<TensorGradReport> tensors;
};
GradCheckReport grad_check(const GradCheckConfig& cfg);

// Geometry used by the gradient-check acceptance gate.
ModelConfig grad_check_model();

}  // namespace rar
