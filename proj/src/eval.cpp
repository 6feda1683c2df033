// SPDX-License-Identifier: Apache-2.0
#include "rar/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace rar {

NllResult nll_under_order(const ModelParams<float>& params, std::span<const uint16_t> tokens,
                          std::optional<int> label, const Permutation& order) {
  const int T = params.config.seq_len;
  if (static_cast<int>(tokens.size()) != T)
    throw std::invalid_argument("nll_under_order: token count mismatch");
  std::vector<uint16_t> permuted = apply_permutation(tokens, order);
  Mat<float> logits = forward(params, std::span<const uint16_t>(permuted), order, label);
  NllResult res;
  res.per_step.resize(T);
  const int V = params.config.vocab_size;
  for (int t = 0; t < T; ++t) {
    const float* row = logits.row(t);  // row t predicts permuted token t
    double m = row[0];
    for (int j = 1; j < V; ++j) m = std::max(m, double(row[j]));
    double total = 0.0;
    for (int j = 0; j < V; ++j) total += std::exp(double(row[j]) - m);
    res.per_step[t] = std::log(total) + m - double(row[permuted[t]]);
    res.total += res.per_step[t];
  }
  res.mean = res.total / T;
  return res;
}

NllResult oracle_nll_under_order(const PottsModel& model, const TokenGrid& grid,
                                 const Permutation& order) {
  const GridSpec& spec = model.spec();
  const int T = spec.cells();
  if (static_cast<int>(grid.tokens.size()) != T)
    throw std::invalid_argument("oracle_nll_under_order: token count mismatch");
  if (order.size() != T) throw std::invalid_argument("oracle_nll_under_order: order mismatch");
  NllResult res;
  res.per_step.resize(T);
  const bool raster_dp = order.is_identity() && model.dp_available();
  std::vector<int> observed_cells;
  std::vector<uint16_t> observed_values;
  observed_cells.reserve(T);
  observed_values.reserve(T);
  for (int t = 0; t < T; ++t) {
    const int cell = order.order[t];
    std::vector<double> probs;
    if (raster_dp) {
      probs = model.raster_conditional(grid.label,
                                       std::span<const uint16_t>(grid.tokens.data(), t));
    } else {
      probs = model.exact_conditional(grid.label, std::span<const int>(observed_cells),
                                      std::span<const uint16_t>(observed_values), cell);
    }
    double p = probs[grid.tokens[cell]];
    if (!(p > 0)) throw std::runtime_error("oracle_nll_under_order: zero-probability token");
    res.per_step[t] = -std::log(p);
    res.total += res.per_step[t];
    observed_cells.push_back(cell);
    observed_values.push_back(grid.tokens[cell]);
  }
  res.mean = res.total / T;
  return res;
}

GapReport oracle_gap(const ModelParams<float>& params, const PottsModel& model,
                     std::span<const TokenGrid> grids, const Permutation& order) {
  if (grids.empty()) throw std::invalid_argument("oracle_gap: no grids");
  GapReport rep;
  for (const TokenGrid& g : grids) {
    rep.model_nll +=
        nll_under_order(params, std::span<const uint16_t>(g.tokens), g.label, order).mean;
    rep.oracle_nll += oracle_nll_under_order(model, g, order).mean;
  }
  rep.grids = static_cast<int>(grids.size());
  rep.model_nll /= rep.grids;
  rep.oracle_nll /= rep.grids;
  rep.gap = rep.model_nll - rep.oracle_nll;
  return rep;
}

std::vector<double> model_grid_distribution(const ModelParams<float>& params,
                                            std::optional<int> label, const Permutation& order) {
  const int T = params.config.seq_len, V = params.config.vocab_size;
  double combos = std::pow(double(V), double(T));
  if (combos > double(1 << 20))
    throw std::invalid_argument("model_grid_distribution: grid too large");
  const int64_t total = static_cast<int64_t>(combos + 0.5);
  std::vector<double> dist(total, 0.0);
  std::vector<uint16_t> tokens(T, 0);
  for (int64_t idx = 0; idx < total; ++idx) {
    int64_t rem = idx;
    for (int cell = T - 1; cell >= 0; --cell) {
      tokens[cell] = static_cast<uint16_t>(rem % V);
      rem /= V;
    }
    NllResult r = nll_under_order(params, std::span<const uint16_t>(tokens), label, order);
    dist[idx] = std::exp(-r.total);
  }
  return dist;
}

double total_variation(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw std::invalid_argument("total_variation: size mismatch");
  double tv = 0.0;
  for (size_t i = 0; i < p.size(); ++i) tv += std::abs(p[i] - q[i]);
  return 0.5 * tv;
}

ProbeReport disambiguation_probe(const ProbeConfig& cfg) {
  ModelConfig mc;
  mc.depth = 2;
  mc.width = 8;
  mc.heads = 2;
  mc.mlp_dim = 32;
  mc.vocab_size = 2;
  mc.seq_len = 3;
  mc.num_classes = 1;
  mc.validate();

  // Two orders sharing cell 0, then diverging; all four (x0, order) combos.
  Permutation order_a;
  order_a.order = {0, 1, 2};
  Permutation order_b;
  order_b.order = {0, 2, 1};
  struct Case {
    std::vector<uint16_t> tokens;
    const Permutation* order;
  };
  std::vector<Case> cases;
  for (uint16_t x0 : {uint16_t(0), uint16_t(1)}) {
    std::vector<uint16_t> tokens = {x0, x0, static_cast<uint16_t>(1 - x0)};
    cases.push_back({tokens, &order_a});
    cases.push_back({tokens, &order_b});
  }

  TrainConfig tc;  // only the optimizer constants matter here
  tc.weight_decay = 0.0;

  auto run = [&](bool use_targets) {
    Rng init = derive_rng(cfg.seed, use_targets ? "probe.init.with" : "probe.init.without");
    ModelParams<float> params = init_params<float>(mc, init);
    if (!use_targets) params.tgt_emb.zero();
    OptState opt = make_opt_state(mc);
    for (int step = 0; step < cfg.steps; ++step) {
      ModelParams<float> grads = shaped_params<float>(mc);
      for (const Case& c : cases)
        loss_and_grad(params, std::span<const uint16_t>(c.tokens), *c.order, std::optional<int>(0),
                      grads);
      const float inv = 1.0f / cases.size();
      for (const auto& ref : tensor_refs(grads))
        for (float& g : ref.mat->data) g *= inv;
      if (!use_targets) grads.tgt_emb.zero();  // frozen table
      adamw_step(params, grads, opt, cfg.lr, tc);
    }
    double nll = 0.0;
    for (const Case& c : cases) {
      NllResult r = nll_under_order(params, std::span<const uint16_t>(c.tokens),
                                    std::optional<int>(0), *c.order);
      nll += r.per_step[1];  // the ambiguous step
    }
    return nll / cases.size();
  };

  ProbeReport rep;
  rep.ambiguous_nll_with_targets = run(true);
  rep.ambiguous_nll_without_targets = run(false);
  return rep;
}

std::vector<SweepPoint> sweep_annealing(const GridSpec& spec, const ModelConfig& model_config,
                                        const TrainConfig& base,
                                        std::span<const std::pair<int, int>> schedules,
                                        std::span<const uint64_t> seeds, int train_grids,
                                        int eval_grids, int threads, std::ostream* progress) {
  spec.validate();
  model_config.validate();
  if (model_config.seq_len != spec.cells())
    throw std::invalid_argument("sweep_annealing: model seq_len does not match grid");
  PottsModel model(spec);
  if (!model.exact_sampling_available())
    throw std::invalid_argument("sweep_annealing: grid too large for exact sampling");

  // One fixed train set and one fixed held-out set for every run.
  DatasetShard train = generate_shard(model, train_grids, spec.seed, "sweep.train");
  DatasetShard held = generate_shard(model, eval_grids, spec.seed, "sweep.eval");
  const Permutation raster = identity_perm(spec.cells());

  std::vector<SweepPoint> points;
  for (const auto& [start, end] : schedules) {
    for (uint64_t seed : seeds) {
      TrainConfig cfg = base;
      cfg.anneal = AnnealSchedule{start, end};
      cfg.seed = seed;
      cfg.validate();
      Rng init = derive_rng(seed, "sweep.init");
      ModelParams<float> params = init_params<float>(model_config, init);
      OptState opt = make_opt_state(model_config);
      TrainStreams streams = TrainStreams::make(seed);
      run_training(params, opt, train.grids, cfg, streams, {}, 0, threads);
      GapReport gap = oracle_gap(params, model, std::span<const TokenGrid>(held.grids), raster);
      SweepPoint pt;
      pt.start_epoch = start;
      pt.end_epoch = end;
      pt.seed = seed;
      pt.mean_nll = gap.model_nll;
      pt.oracle_nll = gap.oracle_nll;
      pt.gap = gap.gap;
      points.push_back(pt);
      if (progress)
        (*progress) << "sweep start=" << start << " end=" << end << " seed=" << seed
                    << " nll=" << pt.mean_nll << " oracle=" << pt.oracle_nll << " gap=" << pt.gap
                    << "\n";
    }
  }
  return points;
}

ModelConfig grad_check_model() {
  ModelConfig mc;
  mc.depth = 2;
  mc.width = 8;
  mc.heads = 2;
  mc.mlp_dim = 32;
  mc.vocab_size = 5;
  mc.seq_len = 8;
  mc.num_classes = 3;
  mc.validate();
  return mc;
}

namespace {

double loss_only(const ModelParams<double>& params, std::span<const uint16_t> permuted,
                 const Permutation& order, std::optional<int> label,
                 std::span<const uint16_t> labels) {
  Mat<double> logits = forward(params, permuted, order, label);
  return shifted_cross_entropy(logits, labels);
}

}  // namespace

GradCheckReport grad_check(const GradCheckConfig& cfg) {
  cfg.model.validate();
  Rng rng = derive_rng(cfg.seed, "gradcheck");
  ModelParams<double> params = init_params<double>(cfg.model, rng);
  // Give the structurally zero or constant tensors generic values too.
  for (auto& ref : tensor_refs(params)) {
    if (!ref.random_init) {
      for (auto& v : ref.mat->data)
        v = (ref.ones_init ? 1.0 : 0.0) + 0.2 * rng.next_trunc_normal(1.0);
    }
  }
  const int T = cfg.model.seq_len;
  std::vector<uint16_t> tokens(T);
  for (auto& t : tokens)
    t = static_cast<uint16_t>(rng.next_below(static_cast<uint64_t>(cfg.model.vocab_size)));
  Rng order_rng = derive_rng(cfg.seed, "gradcheck.order");
  Permutation order = random_permutation(order_rng, T);
  std::optional<int> label = static_cast<int>(rng.next_below(cfg.model.num_classes));

  ModelParams<double> grads = shaped_params<double>(cfg.model);
  loss_and_grad(params, std::span<const uint16_t>(tokens), order, label, grads);
  if (cfg.corrupt_grads) cfg.corrupt_grads(grads);

  std::vector<uint16_t> permuted = apply_permutation(std::span<const uint16_t>(tokens), order);
  std::vector<uint16_t> labels(T + 1, 0);
  std::copy(permuted.begin(), permuted.end(), labels.begin() + 1);

  GradCheckReport report;
  auto prefs = tensor_refs(params);
  auto grefs = tensor_refs(grads);
  const double h = cfg.fd_step;
  for (size_t i = 0; i < prefs.size(); ++i) {
    TensorGradReport tr;
    tr.name = prefs[i].name;
    auto& data = prefs[i].mat->data;
    for (size_t j = 0; j < data.size(); ++j) {
      const double saved = data[j];
      data[j] = saved + h;
      double up = loss_only(params, std::span<const uint16_t>(permuted), order, label,
                            std::span<const uint16_t>(labels));
      data[j] = saved - h;
      double down = loss_only(params, std::span<const uint16_t>(permuted), order, label,
                              std::span<const uint16_t>(labels));
      data[j] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = grefs[i].mat->data[j];
      const double abs_err = std::abs(analytic - numeric);
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
      tr.max_abs_err = std::max(tr.max_abs_err, abs_err);
      tr.max_rel_err = std::max(tr.max_rel_err, abs_err / denom);
    }
    if (tr.max_rel_err > report.max_rel_err) {
      report.max_rel_err = tr.max_rel_err;
      report.worst_tensor = tr.name;
    }
    report.tensors.push_back(tr);
  }
  return report;
}

}  // namespace rar
