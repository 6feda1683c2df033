// SPDX-License-Identifier: Apache-2.0
#include "rar/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "rar/eval.hpp"
#include "rar/gridtok.hpp"
#include "rar/model.hpp"
#include "rar/permute.hpp"
#include "rar/sample.hpp"
#include "rar/train.hpp"

namespace rar {

namespace {

namespace fs = std::filesystem;

// Config-level mistakes (mismatched artifacts, out-of-range arguments) exit
// with 2 like parse errors; operational failures (IO, corrupt files) exit 1.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::vector<std::string> split_list(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, sep))
    if (!item.empty()) out.push_back(item);
  return out;
}

std::vector<int> parse_int_list(const std::string& text, const std::string& what) {
  std::vector<int> out;
  for (const std::string& part : split_list(text, ',')) {
    size_t used = 0;
    int v = std::stoi(part, &used);
    if (used != part.size()) throw UsageError(what + ": malformed integer '" + part + "'");
    out.push_back(v);
  }
  if (out.empty()) throw UsageError(what + ": empty list");
  return out;
}

struct GeometryOpts {
  std::string preset = "small";
  int depth = 0, width = 0, heads = 0, mlp_dim = 0;  // 0 = take from preset

  void add_flags(CLI::App* cmd) {
    cmd->add_option("--preset", preset, "model preset: micro, small, b, l, xl, xxl")
        ->capture_default_str();
    cmd->add_option("--depth", depth, "override preset depth");
    cmd->add_option("--width", width, "override preset width");
    cmd->add_option("--heads", heads, "override preset heads");
    cmd->add_option("--mlp-dim", mlp_dim, "override preset mlp dimension");
  }

  ModelConfig resolve(const GridSpec& spec) const {
    ModelConfig mc = preset_config(preset, spec.vocab_size, spec.cells(), spec.num_classes);
    if (depth > 0) mc.depth = depth;
    if (width > 0) mc.width = width;
    if (heads > 0) mc.heads = heads;
    if (mlp_dim > 0) mc.mlp_dim = mlp_dim;
    mc.validate();
    return mc;
  }
};

void check_shard_matches(const DatasetShard& shard, const GridSpec& spec,
                         const std::string& what) {
  if (shard.fingerprint != spec.fingerprint())
    throw UsageError(what + ": shard fingerprint does not match the grid spec");
  if (shard.height != spec.height || shard.width != spec.width ||
      shard.vocab_size != spec.vocab_size || shard.num_classes != spec.num_classes)
    throw UsageError(what + ": shard header does not match the grid spec");
}

// P6 binary image; fn(r, c) supplies one 0..255 RGB triple per pixel.
template <typename F>
void write_ppm(const std::string& path, int height, int width, F&& fn) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  os << "P6\n" << width << ' ' << height << "\n255\n";
  for (int r = 0; r < height; ++r)
    for (int c = 0; c < width; ++c) {
      auto [red, green, blue] = fn(r, c);
      os.put(static_cast<char>(red));
      os.put(static_cast<char>(green));
      os.put(static_cast<char>(blue));
    }
  if (!os) throw std::runtime_error("write failed: " + path);
}

void render_grid_ppm(const std::string& path, const TokenGrid& grid, int vocab_size) {
  write_ppm(path, grid.height, grid.width, [&](int r, int c) {
    int v = grid.tokens[static_cast<size_t>(r) * grid.width + c];
    int g = vocab_size > 1 ? v * 255 / (vocab_size - 1) : 0;
    return std::tuple(g, g, g);
  });
}

int cmd_make_data(const std::string& spec_path, int height, int width, int vocab, int classes,
                  uint64_t seed, double field_scale, double coupling_scale, int train_count,
                  int eval_count, const std::string& out_dir) {
  GridSpec spec;
  if (!spec_path.empty()) {
    spec = GridSpec::load(spec_path);
  } else {
    spec = make_grid_spec(height, width, vocab, classes, seed, field_scale, coupling_scale);
  }
  fs::create_directories(out_dir);
  PottsModel model(spec);
  spec.save((fs::path(out_dir) / "spec.json").string());
  DatasetShard train = generate_shard(model, train_count, spec.seed, "data.train");
  DatasetShard held = generate_shard(model, eval_count, spec.seed, "data.eval");
  save_shard((fs::path(out_dir) / "train.shard").string(), train);
  save_shard((fs::path(out_dir) / "eval.shard").string(), held);
  std::cout << "spec fingerprint: " << std::hex << spec.fingerprint() << std::dec << "\n";
  std::cout << "train grids: " << train.grids.size() << ", eval grids: " << held.grids.size()
            << "\n";
  if (train.approximate || held.approximate)
    std::cout << "warning: grid too large for exact sampling; shards hold approximate"
                 " single-sweep Gibbs samples\n";
  std::cout << "wrote " << out_dir << "/{spec.json,train.shard,eval.shard}\n";
  return 0;
}

int cmd_train(const std::string& spec_path, const std::string& data_path,
              const std::string& val_path, const GeometryOpts& geom, TrainConfig cfg,
              const std::string& canonical_name, const std::string& out_dir, bool resume,
              int threads) {
  GridSpec spec = GridSpec::load(spec_path);
  DatasetShard data = load_shard(data_path);
  check_shard_matches(data, spec, "train");
  cfg.canonical = scan_kind_from_string(canonical_name);
  cfg.validate();

  fs::create_directories(out_dir);
  const std::string ckpt_path = (fs::path(out_dir) / "checkpoint.rar").string();
  const std::string state_path = (fs::path(out_dir) / "train_state.rar").string();
  const std::string metrics_path = (fs::path(out_dir) / "metrics.csv").string();

  ModelParams<float> params;
  OptState opt;
  TrainStreams streams;
  int start_epoch = 0;
  std::ofstream metrics;
  if (resume) {
    params = load_checkpoint(ckpt_path);
    TrainState st = load_train_state(state_path, params.config);
    if (st.config.canonical_json() != cfg.canonical_json())
      throw UsageError("resume: training configuration changed");
    opt = std::move(st.opt);
    streams = st.streams;
    start_epoch = st.next_epoch;
    metrics.open(metrics_path, std::ios::app);
  } else {
    ModelConfig mc = geom.resolve(spec);
    Rng init = derive_rng(cfg.seed, "model.init");
    params = init_params<float>(mc, init);
    opt = make_opt_state(mc);
    streams = TrainStreams::make(cfg.seed);
    metrics.open(metrics_path);
    metrics << "step,epoch,lr,r,frac_random,loss,grad_norm\n";
  }
  if (!metrics) throw std::runtime_error("cannot open for writing: " + metrics_path);

  std::cout << "model parameters: " << param_count(params.config) << "\n";
  if (start_epoch >= cfg.total_epochs) {
    std::cout << "nothing to do: training already complete\n";
    return 0;
  }

  TrainHooks hooks;
  hooks.on_step = [&](const StepMetrics& m) {
    metrics << m.step << ',' << std::setprecision(10) << m.epoch << ',' << m.lr << ',' << m.r
            << ',' << m.frac_random << ',' << m.loss << ',' << m.grad_norm << "\n";
  };
  hooks.on_epoch = [&](int epoch) {
    metrics.flush();
    save_checkpoint(ckpt_path, params);
    save_train_state(state_path, opt, streams, cfg, epoch + 1);
    std::cout << "epoch " << epoch + 1 << "/" << cfg.total_epochs << " done, step " << opt.step
              << "\n";
  };
  run_training(params, opt, data.grids, cfg, streams, hooks, start_epoch, threads);

  if (!val_path.empty()) {
    DatasetShard val = load_shard(val_path);
    check_shard_matches(val, spec, "val");
    const Permutation raster = identity_perm(params.config.seq_len);
    double nll = 0.0;
    for (const TokenGrid& g : val.grids)
      nll += nll_under_order(params, std::span<const uint16_t>(g.tokens), g.label, raster).mean;
    std::cout << "val nll (raster, per token): " << nll / val.grids.size() << "\n";
  }
  std::cout << "wrote " << ckpt_path << "\n";
  return 0;
}

int cmd_sample(const std::string& ckpt_path, const std::string& spec_path, int label,
               bool unconditional, int count, const std::string& order_name, SampleConfig scfg,
               bool merge_pe, uint64_t seed, const std::string& out_path,
               const std::string& ppm_dir) {
  ModelParams<float> params = load_checkpoint(ckpt_path);
  GridSpec spec = GridSpec::load(spec_path);
  if (spec.cells() != params.config.seq_len || spec.vocab_size != params.config.vocab_size ||
      spec.num_classes != params.config.num_classes)
    throw UsageError("sample: grid spec does not match the checkpoint");
  scfg.validate();
  if (merge_pe && !params.config.merged) params = merge_positional(params);
  Permutation order = canonical_scan(scan_kind_from_string(order_name), spec.height, spec.width);
  std::optional<int> lbl;
  if (!unconditional) {
    if (label < 0)
      throw UsageError("sample: pass --label <class> or --unconditional");
    if (label >= spec.num_classes) throw UsageError("sample: --label out of range");
    lbl = label;
  }
  DatasetShard shard;
  shard.height = spec.height;
  shard.width = spec.width;
  shard.vocab_size = spec.vocab_size;
  shard.num_classes = spec.num_classes;
  shard.fingerprint = spec.fingerprint();
  for (int i = 0; i < count; ++i) {
    Rng rng = derive_rng(seed, "sample", static_cast<uint64_t>(i));
    TokenGrid g = generate(params, lbl, spec.height, spec.width, order, scfg, rng);
    if (!lbl) g.label = 0;  // shards carry a label; unconditional draws record class 0
    shard.grids.push_back(std::move(g));
  }
  save_shard(out_path, shard);
  if (!ppm_dir.empty()) {
    fs::create_directories(ppm_dir);
    for (int i = 0; i < count; ++i) {
      std::ostringstream name;
      name << "sample_" << std::setw(5) << std::setfill('0') << i << ".ppm";
      render_grid_ppm((fs::path(ppm_dir) / name.str()).string(), shard.grids[i],
                      spec.vocab_size);
    }
    std::cout << "wrote " << count << " renders to " << ppm_dir << "\n";
  }
  if (!lbl) std::cout << "note: unconditional samples are stored with label 0\n";
  std::cout << "wrote " << count << " grids to " << out_path << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& spec_path,
             const std::string& data_path, std::vector<std::string> order_names,
             const std::string& csv_path) {
  ModelParams<float> params = load_checkpoint(ckpt_path);
  GridSpec spec = GridSpec::load(spec_path);
  DatasetShard data = load_shard(data_path);
  check_shard_matches(data, spec, "eval");
  if (spec.cells() != params.config.seq_len || spec.vocab_size != params.config.vocab_size)
    throw UsageError("eval: grid spec does not match the checkpoint");
  PottsModel model(spec);

  if (order_names.size() == 1 && order_names[0] == "all") {
    order_names.clear();
    for (ScanKind k : all_scan_kinds()) {
      if (scan_defined(k, spec.height, spec.width))
        order_names.push_back(to_string(k));
      else
        std::cout << "skipping order " << to_string(k) << ": undefined for " << spec.height << "x"
                  << spec.width << "\n";
    }
  }

  std::ofstream csv;
  if (!csv_path.empty()) {
    csv.open(csv_path);
    if (!csv) throw std::runtime_error("cannot open for writing: " + csv_path);
    csv << "order,model_nll,oracle_nll,gap\n";
  }
  for (const std::string& name : order_names) {
    Permutation order = canonical_scan(scan_kind_from_string(name), spec.height, spec.width);
    double model_nll = 0.0;
    for (const TokenGrid& g : data.grids)
      model_nll +=
          nll_under_order(params, std::span<const uint16_t>(g.tokens), g.label, order).mean;
    model_nll /= data.grids.size();

    bool oracle_ok =
        (order.is_identity() && model.dp_available()) || model.enumeration_available();
    if (oracle_ok) {
      double oracle_nll = 0.0;
      for (const TokenGrid& g : data.grids)
        oracle_nll += oracle_nll_under_order(model, g, order).mean;
      oracle_nll /= data.grids.size();
      std::cout << "order=" << name << " model_nll=" << model_nll << " oracle_nll=" << oracle_nll
                << " gap=" << model_nll - oracle_nll << "\n";
      if (csv)
        csv << name << ',' << std::setprecision(10) << model_nll << ',' << oracle_nll << ','
            << model_nll - oracle_nll << "\n";
    } else {
      std::cout << "order=" << name << " model_nll=" << model_nll
                << " oracle_nll=unavailable (grid too large for this order)\n";
      if (csv) csv << name << ',' << std::setprecision(10) << model_nll << ",,\n";
    }
  }
  return 0;
}

int cmd_sweep(const std::string& spec_path, const GeometryOpts& geom, TrainConfig base,
              const std::string& canonical_name, const std::string& starts_text,
              const std::string& ends_text, const std::string& seeds_text, int train_grids,
              int eval_grids, int threads, const std::string& out_path) {
  GridSpec spec = GridSpec::load(spec_path);
  base.canonical = scan_kind_from_string(canonical_name);
  ModelConfig mc = geom.resolve(spec);

  // Cross product of --starts and --ends; pairs that do not form a valid
  // schedule are skipped with a note rather than failing the whole sweep.
  std::vector<std::pair<int, int>> schedules;
  for (int s : parse_int_list(starts_text, "sweep --starts"))
    for (int e : parse_int_list(ends_text, "sweep --ends")) {
      try {
        AnnealSchedule{s, e}.validate(base.total_epochs);
      } catch (const std::exception& ex) {
        std::cout << "skipping schedule (" << s << ", " << e << "): " << ex.what() << "\n";
        continue;
      }
      schedules.emplace_back(s, e);
    }
  std::vector<uint64_t> seeds;
  for (const std::string& part : split_list(seeds_text, ',')) seeds.push_back(std::stoull(part));
  if (schedules.empty()) throw UsageError("sweep: no valid (start, end) schedule");
  if (seeds.empty()) throw UsageError("sweep: need at least one seed");

  std::vector<SweepPoint> points =
      sweep_annealing(spec, mc, base, std::span<const std::pair<int, int>>(schedules),
                      std::span<const uint64_t>(seeds), train_grids, eval_grids, threads,
                      &std::cout);
  std::ofstream csv(out_path);
  if (!csv) throw std::runtime_error("cannot open for writing: " + out_path);
  csv << "start,end,seed,mean_nll,oracle_nll,gap\n";
  for (const SweepPoint& p : points)
    csv << p.start_epoch << ',' << p.end_epoch << ',' << p.seed << ',' << std::setprecision(10)
        << p.mean_nll << ',' << p.oracle_nll << ',' << p.gap << "\n";
  std::cout << "wrote " << out_path << "\n";
  return 0;
}

int cmd_orders(const std::string& kind_name, int height, int width, const std::string& csv_path,
               const std::string& ppm_path) {
  Permutation p = canonical_scan(scan_kind_from_string(kind_name), height, width);
  std::ostringstream row;
  for (int t = 0; t < p.size(); ++t) {
    if (t) row << ',';
    row << p.order[t];
  }
  std::cout << row.str() << "\n";
  if (!csv_path.empty()) {
    std::ofstream csv(csv_path);
    if (!csv) throw std::runtime_error("cannot open for writing: " + csv_path);
    csv << row.str() << "\n";
  }
  if (!ppm_path.empty()) {
    // Heat map of visit indices: early cells blue, late cells red.
    Permutation inv = invert(p);
    const int last = p.size() - 1;
    write_ppm(ppm_path, height, width, [&](int r, int c) {
      int t = inv.order[r * width + c];
      int hot = last > 0 ? t * 255 / last : 0;
      return std::tuple(hot, 0, 255 - hot);
    });
    std::cout << "wrote " << ppm_path << "\n";
  }
  return 0;
}

int cmd_gradcheck(uint64_t seed, double fd_step, double tolerance) {
  GradCheckConfig cfg;
  cfg.model = grad_check_model();
  cfg.seed = seed;
  cfg.fd_step = fd_step;
  GradCheckReport report = grad_check(cfg);
  std::cout << std::left << std::setw(20) << "tensor" << std::setw(14) << "max_rel_err"
            << "max_abs_err\n";
  for (const auto& t : report.tensors)
    std::cout << std::left << std::setw(20) << t.name << std::setw(14) << std::setprecision(4)
              << t.max_rel_err << std::setprecision(4) << t.max_abs_err << "\n";
  std::cout << "worst tensor: " << report.worst_tensor << " (rel err " << report.max_rel_err
            << ", tolerance " << tolerance << ")\n";
  if (report.max_rel_err > tolerance) {
    std::cerr << "gradient check failed\n";
    return 1;
  }
  std::cout << "gradient check passed\n";
  return 0;
}

int cmd_probe(uint64_t seed, int steps, double lr) {
  ProbeConfig cfg;
  cfg.seed = seed;
  cfg.steps = steps;
  cfg.lr = lr;
  ProbeReport report = disambiguation_probe(cfg);
  std::cout << "{\"ambiguous_nll_with_targets\":" << std::setprecision(10)
            << report.ambiguous_nll_with_targets
            << ",\"ambiguous_nll_without_targets\":" << report.ambiguous_nll_without_targets
            << "}\n";
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Randomized-order autoregressive modeling on synthetic token grids"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "rar 0.1.0");

  // make-data
  auto* mk = app.add_subcommand("make-data", "synthesize a grid spec and sample dataset shards");
  std::string mk_spec, mk_out = "data";
  int mk_h = 4, mk_w = 4, mk_v = 4, mk_c = 2, mk_train = 4096, mk_eval = 512;
  uint64_t mk_seed = 1;
  double mk_field = 0.3, mk_coupling = 0.6;
  mk->add_option("--spec", mk_spec, "existing grid spec JSON (skips synthesis)")
      ->check(CLI::ExistingFile);
  mk->add_option("--height", mk_h)->capture_default_str();
  mk->add_option("--width", mk_w)->capture_default_str();
  mk->add_option("--vocab", mk_v)->capture_default_str();
  mk->add_option("--classes", mk_c)->capture_default_str();
  mk->add_option("--seed", mk_seed)->capture_default_str();
  mk->add_option("--field-scale", mk_field)->capture_default_str();
  mk->add_option("--coupling-scale", mk_coupling)->capture_default_str();
  mk->add_option("--train", mk_train, "training grids")->capture_default_str();
  mk->add_option("--eval", mk_eval, "held-out grids")->capture_default_str();
  mk->add_option("--out", mk_out, "output directory")->capture_default_str();

  // train
  auto* tr = app.add_subcommand("train", "train a model on a dataset shard");
  std::string tr_spec, tr_data, tr_val, tr_out = "run", tr_canonical = "row_major";
  GeometryOpts tr_geom;
  TrainConfig tr_cfg;
  bool tr_resume = false;
  int tr_threads = 0;
  tr->add_option("--spec", tr_spec, "grid spec JSON")->required()->check(CLI::ExistingFile);
  tr->add_option("--data", tr_data, "training shard")->required()->check(CLI::ExistingFile);
  tr->add_option("--val", tr_val, "optional held-out shard for a final NLL report")
      ->check(CLI::ExistingFile);
  tr->add_option("--out", tr_out, "output directory")->capture_default_str();
  tr_geom.add_flags(tr);
  tr->add_option("--batch", tr_cfg.batch_size)->capture_default_str();
  tr->add_option("--epochs", tr_cfg.total_epochs)->capture_default_str();
  tr->add_option("--warmup", tr_cfg.warmup_epochs)->capture_default_str();
  tr->add_option("--anneal-start", tr_cfg.anneal.start_epoch)->capture_default_str();
  tr->add_option("--anneal-end", tr_cfg.anneal.end_epoch)->capture_default_str();
  tr->add_option("--base-lr", tr_cfg.base_lr)->capture_default_str();
  tr->add_option("--end-lr", tr_cfg.end_lr)->capture_default_str();
  tr->add_option("--weight-decay", tr_cfg.weight_decay)->capture_default_str();
  tr->add_option("--cond-dropout", tr_cfg.cond_dropout)->capture_default_str();
  tr->add_option("--grad-clip", tr_cfg.max_grad_norm)->capture_default_str();
  tr->add_option("--canonical", tr_canonical, "canonical scan order")->capture_default_str();
  tr->add_option("--seed", tr_cfg.seed)->capture_default_str();
  tr->add_option("--threads", tr_threads, "worker threads (0 = auto)")->capture_default_str();
  tr->add_flag("--resume", tr_resume, "continue from checkpoint and train state in --out");

  // sample
  auto* sm = app.add_subcommand("sample", "draw grids from a trained model");
  std::string sm_ckpt, sm_spec, sm_order = "row_major", sm_schedule = "none";
  std::string sm_out = "samples.shard", sm_ppm_dir;
  int sm_label = -1, sm_count = 16;
  bool sm_uncond = false, sm_greedy = false, sm_merge = false;
  uint64_t sm_seed = 1;
  SampleConfig sm_cfg;
  sm->add_option("--checkpoint", sm_ckpt)->required()->check(CLI::ExistingFile);
  sm->add_option("--spec", sm_spec, "grid spec JSON")->required()->check(CLI::ExistingFile);
  sm->add_option("--label", sm_label, "class label")->capture_default_str();
  sm->add_flag("--unconditional", sm_uncond, "sample from the null condition");
  sm->add_option("--n", sm_count, "number of grids")->capture_default_str();
  sm->add_option("--order", sm_order, "decoding scan order")->capture_default_str();
  sm->add_option("--temperature", sm_cfg.temperature, "softmax temperature (> 0; see --greedy)")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  sm->add_flag("--greedy", sm_greedy, "argmax decoding");
  sm->add_option("--guidance", sm_cfg.guidance_scale, "guidance scale")->capture_default_str();
  sm->add_option("--schedule", sm_schedule, "guidance schedule: none, linear, power_cosine")
      ->capture_default_str();
  sm->add_option("--power", sm_cfg.schedule_power, "power_cosine exponent")
      ->capture_default_str();
  sm->add_flag("--merge-pe", sm_merge, "fold target embeddings into the position table first");
  sm->add_option("--seed", sm_seed)->capture_default_str();
  sm->add_option("--out", sm_out, "output shard")->capture_default_str();
  sm->add_option("--ppm-dir", sm_ppm_dir, "also render each grid as a PPM in this directory");

  // eval
  auto* ev = app.add_subcommand("eval", "model NLL and exact-oracle gap on a shard");
  std::string ev_ckpt, ev_spec, ev_data, ev_csv;
  std::vector<std::string> ev_orders{"row_major"};
  ev->add_option("--checkpoint", ev_ckpt)->required()->check(CLI::ExistingFile);
  ev->add_option("--spec", ev_spec)->required()->check(CLI::ExistingFile);
  ev->add_option("--data", ev_data)->required()->check(CLI::ExistingFile);
  ev->add_option("--order", ev_orders, "scan orders to evaluate, or 'all'")
      ->capture_default_str();
  ev->add_option("--csv", ev_csv, "optional CSV output path");

  // sweep
  auto* sw = app.add_subcommand("sweep", "train across annealing schedules and report gaps");
  std::string sw_spec, sw_out = "sweep.csv", sw_starts = "20", sw_ends = "40", sw_seeds = "1,2,3";
  std::string sw_canonical = "row_major";
  GeometryOpts sw_geom;
  TrainConfig sw_cfg;
  int sw_train = 2048, sw_eval = 256, sw_threads = 0;
  sw->add_option("--spec", sw_spec)->required()->check(CLI::ExistingFile);
  sw_geom.add_flags(sw);
  sw->add_option("--starts", sw_starts, "comma list of anneal start epochs")
      ->capture_default_str();
  sw->add_option("--ends", sw_ends, "comma list of anneal end epochs")->capture_default_str();
  sw->add_option("--seeds", sw_seeds, "comma list of seeds")->capture_default_str();
  sw->add_option("--train-grids", sw_train)->capture_default_str();
  sw->add_option("--eval-grids", sw_eval)->capture_default_str();
  sw->add_option("--batch", sw_cfg.batch_size)->capture_default_str();
  sw->add_option("--epochs", sw_cfg.total_epochs)->capture_default_str();
  sw->add_option("--warmup", sw_cfg.warmup_epochs)->capture_default_str();
  sw->add_option("--base-lr", sw_cfg.base_lr)->capture_default_str();
  sw->add_option("--end-lr", sw_cfg.end_lr)->capture_default_str();
  sw->add_option("--weight-decay", sw_cfg.weight_decay)->capture_default_str();
  sw->add_option("--cond-dropout", sw_cfg.cond_dropout)->capture_default_str();
  sw->add_option("--canonical", sw_canonical)->capture_default_str();
  sw->add_option("--threads", sw_threads, "worker threads (0 = auto)")->capture_default_str();
  sw->add_option("--out", sw_out, "output CSV")->capture_default_str();

  // orders
  auto* od = app.add_subcommand("orders", "print a canonical scan order");
  od->set_help_flag("--help", "print this help message and exit");  // frees -h for --h
  std::string od_kind = "row_major", od_csv, od_ppm;
  int od_h = 4, od_w = 4;
  od->add_option("--kind", od_kind, "scan kind")->capture_default_str();
  od->add_option("--h", od_h, "grid height")->capture_default_str();
  od->add_option("--w", od_w, "grid width")->capture_default_str();
  od->add_option("--csv", od_csv, "also write the order as a CSV row to this path");
  od->add_option("--ppm", od_ppm, "also write a visit-index heat map to this path");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of the loss gradient");
  uint64_t gc_seed = 7;
  double gc_fd = 1e-3, gc_tol = 1e-3;
  gc->add_option("--seed", gc_seed)->capture_default_str();
  gc->add_option("--fd-step", gc_fd)->capture_default_str();
  gc->add_option("--tolerance", gc_tol)->capture_default_str();

  // probe
  auto* pb = app.add_subcommand("probe", "ambiguous-successor probe of the target embeddings");
  ProbeConfig pb_cfg;
  pb->add_option("--seed", pb_cfg.seed)->capture_default_str();
  pb->add_option("--steps", pb_cfg.steps)->capture_default_str();
  pb->add_option("--lr", pb_cfg.lr)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (app.got_subcommand(mk))
      return cmd_make_data(mk_spec, mk_h, mk_w, mk_v, mk_c, mk_seed, mk_field, mk_coupling,
                           mk_train, mk_eval, mk_out);
    if (app.got_subcommand(tr))
      return cmd_train(tr_spec, tr_data, tr_val, tr_geom, tr_cfg, tr_canonical, tr_out, tr_resume,
                       resolve_threads(tr_threads));
    if (app.got_subcommand(sm)) {
      sm_cfg.greedy = sm_greedy;
      sm_cfg.schedule = guidance_schedule_from_string(sm_schedule);
      return cmd_sample(sm_ckpt, sm_spec, sm_label, sm_uncond, sm_count, sm_order, sm_cfg,
                        sm_merge, sm_seed, sm_out, sm_ppm_dir);
    }
    if (app.got_subcommand(ev)) return cmd_eval(ev_ckpt, ev_spec, ev_data, ev_orders, ev_csv);
    if (app.got_subcommand(sw))
      return cmd_sweep(sw_spec, sw_geom, sw_cfg, sw_canonical, sw_starts, sw_ends, sw_seeds,
                       sw_train, sw_eval, resolve_threads(sw_threads), sw_out);
    if (app.got_subcommand(od)) return cmd_orders(od_kind, od_h, od_w, od_csv, od_ppm);
    if (app.got_subcommand(gc)) return cmd_gradcheck(gc_seed, gc_fd, gc_tol);
    if (app.got_subcommand(pb)) return cmd_probe(pb_cfg.seed, pb_cfg.steps, pb_cfg.lr);
    throw std::logic_error("no subcommand dispatched");
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace rar
