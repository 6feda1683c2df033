// SPDX-License-Identifier: Apache-2.0
#include "rar/train.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace rar {

using nlohmann::json;

void TrainConfig::validate() const {
  if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be positive");
  if (total_epochs < 1) throw std::invalid_argument("TrainConfig: total_epochs must be positive");
  if (warmup_epochs < 0 || warmup_epochs > total_epochs)
    throw std::invalid_argument("TrainConfig: warmup_epochs outside [0, total_epochs]");
  if (!(base_lr > 0) || end_lr < 0 || end_lr > base_lr)
    throw std::invalid_argument("TrainConfig: need 0 <= end_lr <= base_lr, base_lr > 0");
  if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
    throw std::invalid_argument("TrainConfig: betas must lie in [0, 1)");
  if (adam_eps <= 0) throw std::invalid_argument("TrainConfig: adam_eps must be positive");
  if (weight_decay < 0) throw std::invalid_argument("TrainConfig: negative weight_decay");
  if (max_grad_norm <= 0) throw std::invalid_argument("TrainConfig: max_grad_norm must be positive");
  if (cond_dropout < 0 || cond_dropout > 1)
    throw std::invalid_argument("TrainConfig: cond_dropout outside [0, 1]");
  anneal.validate(total_epochs);
}

std::string TrainConfig::canonical_json() const {
  json j;
  j["batch_size"] = batch_size;
  j["total_epochs"] = total_epochs;
  j["warmup_epochs"] = warmup_epochs;
  j["base_lr"] = base_lr;
  j["end_lr"] = end_lr;
  j["beta1"] = beta1;
  j["beta2"] = beta2;
  j["adam_eps"] = adam_eps;
  j["weight_decay"] = weight_decay;
  j["max_grad_norm"] = max_grad_norm;
  j["cond_dropout"] = cond_dropout;
  j["anneal_start"] = anneal.start_epoch;
  j["anneal_end"] = anneal.end_epoch;
  j["canonical"] = to_string(canonical);
  j["seed"] = seed;
  return j.dump();
}

TrainConfig TrainConfig::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("TrainConfig: invalid JSON: ") + e.what());
  }
  TrainConfig c;
  try {
    c.batch_size = j.at("batch_size").get<int>();
    c.total_epochs = j.at("total_epochs").get<int>();
    c.warmup_epochs = j.at("warmup_epochs").get<int>();
    c.base_lr = j.at("base_lr").get<double>();
    c.end_lr = j.at("end_lr").get<double>();
    c.beta1 = j.at("beta1").get<double>();
    c.beta2 = j.at("beta2").get<double>();
    c.adam_eps = j.at("adam_eps").get<double>();
    c.weight_decay = j.at("weight_decay").get<double>();
    c.max_grad_norm = j.at("max_grad_norm").get<double>();
    c.cond_dropout = j.at("cond_dropout").get<double>();
    c.anneal.start_epoch = j.at("anneal_start").get<int>();
    c.anneal.end_epoch = j.at("anneal_end").get<int>();
    c.canonical = scan_kind_from_string(j.at("canonical").get<std::string>());
    c.seed = j.at("seed").get<uint64_t>();
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("TrainConfig: missing or mistyped key: ") + e.what());
  }
  c.validate();
  return c;
}

double lr_at(int64_t step, int64_t steps_per_epoch, const TrainConfig& cfg) {
  if (step < 0 || steps_per_epoch < 1) throw std::invalid_argument("lr_at: bad step arguments");
  const int64_t warmup = int64_t(cfg.warmup_epochs) * steps_per_epoch;
  const int64_t total = int64_t(cfg.total_epochs) * steps_per_epoch;
  if (step < warmup) return cfg.base_lr * double(step + 1) / double(warmup);
  if (step >= total) return cfg.end_lr;
  if (total == warmup) return cfg.base_lr;
  double progress = double(step - warmup) / double(total - warmup);
  return cfg.end_lr + 0.5 * (cfg.base_lr - cfg.end_lr) * (1.0 + std::cos(M_PI * progress));
}

OptState make_opt_state(const ModelConfig& config) {
  OptState s;
  s.m = shaped_params<float>(config);
  s.v = shaped_params<float>(config);
  s.step = 0;
  return s;
}

double global_grad_norm(ModelParams<float>& grads) {
  double total = 0.0;
  for (const auto& ref : tensor_refs(grads)) {
    double part = 0.0;
    for (float g : ref.mat->data) part += double(g) * double(g);
    if (!std::isfinite(part))
      throw std::runtime_error("non-finite gradient in tensor " + ref.name);
    total += part;
  }
  return std::sqrt(total);
}

double clip_gradients(ModelParams<float>& grads, double max_norm) {
  if (max_norm <= 0) throw std::invalid_argument("clip_gradients: max_norm must be positive");
  double norm = global_grad_norm(grads);
  if (norm > max_norm) {
    const float scale = static_cast<float>(max_norm / norm);
    for (const auto& ref : tensor_refs(grads))
      for (float& g : ref.mat->data) g *= scale;
  }
  return norm;
}

void adamw_step(ModelParams<float>& params, ModelParams<float>& grads, OptState& opt, double lr,
                const TrainConfig& cfg) {
  const int64_t t = opt.step + 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, double(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, double(t));
  auto prefs = tensor_refs(params);
  auto grefs = tensor_refs(grads);
  auto mrefs = tensor_refs(opt.m);
  auto vrefs = tensor_refs(opt.v);
  if (prefs.size() != grefs.size() || prefs.size() != mrefs.size() || prefs.size() != vrefs.size())
    throw std::invalid_argument("adamw_step: mismatched parameter sets");
  for (size_t i = 0; i < prefs.size(); ++i) {
    auto& p = prefs[i].mat->data;
    auto& g = grefs[i].mat->data;
    auto& m = mrefs[i].mat->data;
    auto& v = vrefs[i].mat->data;
    if (p.size() != g.size()) throw std::invalid_argument("adamw_step: gradient shape mismatch");
    const bool decay = prefs[i].decays && cfg.weight_decay > 0;
    for (size_t j = 0; j < p.size(); ++j) {
      double gj = g[j];
      double mj = cfg.beta1 * double(m[j]) + (1.0 - cfg.beta1) * gj;
      double vj = cfg.beta2 * double(v[j]) + (1.0 - cfg.beta2) * gj * gj;
      m[j] = static_cast<float>(mj);
      v[j] = static_cast<float>(vj);
      double update = (mj / bc1) / (std::sqrt(vj / bc2) + cfg.adam_eps);
      double next = double(p[j]) - lr * update;
      if (decay) next -= lr * cfg.weight_decay * double(p[j]);
      p[j] = static_cast<float>(next);
    }
  }
  opt.step = t;
}

TrainStreams TrainStreams::make(uint64_t seed) {
  TrainStreams s;
  s.data = derive_rng(seed, "train.data");
  s.branch = derive_rng(seed, "train.branch");
  s.shuffle = derive_rng(seed, "train.shuffle");
  s.cond_drop = derive_rng(seed, "train.cond_drop");
  return s;
}

namespace {

struct SampleDraw {
  Permutation order;
  std::optional<int> label;
  bool random = false;
};

}  // namespace

template <bool kFixedRaster>
StepMetrics train_step(ModelParams<float>& params, OptState& opt,
                       std::span<const TokenGrid> dataset, std::span<const int> batch_indices,
                       const TrainConfig& cfg, const Permutation& canonical,
                       TrainStreams& streams, int64_t steps_per_epoch, int threads) {
  const ModelConfig& mc = params.config;
  const int B = static_cast<int>(batch_indices.size());
  if (B < 1) throw std::invalid_argument("train_step: empty batch");
  if (canonical.size() != mc.seq_len)
    throw std::invalid_argument("train_step: canonical order length mismatch");

  StepMetrics metrics;
  metrics.step = opt.step;
  metrics.epoch = double(opt.step) / double(steps_per_epoch);
  metrics.lr = lr_at(opt.step, steps_per_epoch, cfg);
  metrics.r = kFixedRaster ? 0.0 : anneal_probability(metrics.epoch, cfg.anneal);

  // All stream draws happen serially up front, in batch order, so the
  // consumed stream state never depends on the worker count.
  std::vector<SampleDraw> draws(B);
  const Permutation identity = identity_perm(mc.seq_len);
  for (int s = 0; s < B; ++s) {
    const int idx = batch_indices[s];
    if (idx < 0 || idx >= static_cast<int>(dataset.size()))
      throw std::invalid_argument("train_step: batch index out of range");
    if constexpr (kFixedRaster) {
      draws[s].order = identity;
      draws[s].random = false;
    } else {
      bool random = false;
      draws[s].order = sample_order(streams.branch, streams.shuffle, metrics.r, canonical, &random);
      draws[s].random = random;
    }
    const TokenGrid& g = dataset[idx];
    if (g.label < 0 || g.label >= mc.num_classes)
      throw std::invalid_argument("train_step: grid label out of range");
    bool drop = streams.cond_drop.next_double() < cfg.cond_dropout;
    draws[s].label = drop ? std::optional<int>() : std::optional<int>(g.label);
    metrics.frac_random += draws[s].random ? 1.0 : 0.0;
  }
  metrics.frac_random /= B;

  // Per-worker gradient buffers, reduced in worker order.
  threads = std::min(std::max(threads, 1), B);
  std::vector<ModelParams<float>> partial;
  partial.reserve(threads);
  for (int t = 0; t < threads; ++t) partial.push_back(shaped_params<float>(mc));
  std::vector<double> losses(threads, 0.0);
  const int chunk = (B + threads - 1) / threads;
  parallel_for(threads, threads, [&](int t0, int t1) {
    for (int t = t0; t < t1; ++t) {
      const int begin = t * chunk, end = std::min(B, begin + chunk);
      for (int s = begin; s < end; ++s) {
        const TokenGrid& g = dataset[batch_indices[s]];
        losses[t] += loss_and_grad(params, std::span<const uint16_t>(g.tokens), draws[s].order,
                                   draws[s].label, partial[t]);
      }
    }
  });

  ModelParams<float>& grads = partial[0];
  for (int t = 1; t < threads; ++t) {
    auto dst = tensor_refs(grads);
    auto src = tensor_refs(partial[t]);
    for (size_t i = 0; i < dst.size(); ++i)
      for (size_t j = 0; j < dst[i].mat->data.size(); ++j)
        dst[i].mat->data[j] += src[i].mat->data[j];
  }
  double loss = 0.0;
  for (int t = 0; t < threads; ++t) loss += losses[t];
  metrics.loss = loss / B;

  const float inv_b = 1.0f / static_cast<float>(B);
  for (const auto& ref : tensor_refs(grads))
    for (float& g : ref.mat->data) g *= inv_b;

  metrics.grad_norm = clip_gradients(grads, cfg.max_grad_norm);
  adamw_step(params, grads, opt, metrics.lr, cfg);
  return metrics;
}

template StepMetrics train_step<false>(ModelParams<float>&, OptState&, std::span<const TokenGrid>,
                                       std::span<const int>, const TrainConfig&,
                                       const Permutation&, TrainStreams&, int64_t, int);
template StepMetrics train_step<true>(ModelParams<float>&, OptState&, std::span<const TokenGrid>,
                                      std::span<const int>, const TrainConfig&, const Permutation&,
                                      TrainStreams&, int64_t, int);

void run_training(ModelParams<float>& params, OptState& opt,
                  const std::vector<TokenGrid>& dataset, const TrainConfig& cfg,
                  TrainStreams& streams, const TrainHooks& hooks, int start_epoch, int threads) {
  cfg.validate();
  const int64_t steps_per_epoch = static_cast<int64_t>(dataset.size()) / cfg.batch_size;
  if (steps_per_epoch < 1)
    throw std::invalid_argument("run_training: dataset smaller than one batch");
  const int grid_h = dataset[0].height, grid_w = dataset[0].width;
  if (grid_h * grid_w != params.config.seq_len)
    throw std::invalid_argument("run_training: grid shape does not match model seq_len");
  const Permutation canonical = canonical_scan(cfg.canonical, grid_h, grid_w);
  std::vector<int> indices(dataset.size());
  for (int epoch = start_epoch; epoch < cfg.total_epochs; ++epoch) {
    // Fisher-Yates over dataset indices from the data stream. Rebuilt from
    // the identity every epoch so the order is a pure function of the stream
    // state at the epoch boundary; a resumed run replays it exactly.
    for (size_t i = 0; i < indices.size(); ++i) indices[i] = static_cast<int>(i);
    for (int i = static_cast<int>(indices.size()) - 1; i > 0; --i) {
      int j = static_cast<int>(streams.data.next_below(static_cast<uint64_t>(i) + 1));
      std::swap(indices[i], indices[j]);
    }
    for (int64_t b = 0; b < steps_per_epoch; ++b) {
      std::span<const int> batch(indices.data() + b * cfg.batch_size, cfg.batch_size);
      StepMetrics m = train_step<false>(params, opt, std::span<const TokenGrid>(dataset), batch,
                                        cfg, canonical, streams, steps_per_epoch, threads);
      if (hooks.on_step) hooks.on_step(m);
    }
    if (hooks.on_epoch) hooks.on_epoch(epoch);
  }
}

namespace {
constexpr char kTrainStateMagic[8] = {'R', 'A', 'R', 'T', 'R', 'S', 'T', '1'};
constexpr uint32_t kTrainStateVersion = 1;

void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<uint32_t>(s.size()));
  os.write(s.data(), s.size());
}

std::string read_string(std::istream& is, uint32_t max_len) {
  uint32_t len = read_u32(is);
  if (len > max_len) throw std::runtime_error("train state: implausible string length");
  std::string s(len, '\0');
  if (!is.read(s.data(), len)) throw std::runtime_error("train state: truncated string");
  return s;
}

void write_tensor_block(std::ostream& os, ModelParams<float>& params) {
  for (const auto& ref : tensor_refs(params)) {
    write_u64(os, ref.mat->data.size());
    for (float v : ref.mat->data) write_f32(os, v);
  }
}

void read_tensor_block(std::istream& is, ModelParams<float>& params) {
  for (const auto& ref : tensor_refs(params)) {
    uint64_t count = read_u64(is);
    if (count != ref.mat->data.size())
      throw std::runtime_error("train state: tensor size mismatch for " + ref.name);
    for (auto& v : ref.mat->data) v = read_f32(is);
  }
}
}  // namespace

void save_train_state(const std::string& path, const OptState& opt, const TrainStreams& streams,
                      const TrainConfig& cfg, int next_epoch) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  os.write(kTrainStateMagic, 8);
  write_u32(os, kTrainStateVersion);
  write_u64(os, static_cast<uint64_t>(opt.step));
  write_u32(os, static_cast<uint32_t>(next_epoch));
  write_string(os, cfg.canonical_json());
  write_tensor_block(os, const_cast<ModelParams<float>&>(opt.m));
  write_tensor_block(os, const_cast<ModelParams<float>&>(opt.v));
  write_string(os, streams.data.state());
  write_string(os, streams.branch.state());
  write_string(os, streams.shuffle.state());
  write_string(os, streams.cond_drop.state());
  if (!os) throw std::runtime_error("write failed: " + path);
}

TrainState load_train_state(const std::string& path, const ModelConfig& model_config) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path);
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kTrainStateMagic, 8) != 0)
    throw std::runtime_error(path + ": not a train state file");
  uint32_t version = read_u32(is);
  if (version != kTrainStateVersion)
    throw std::runtime_error(path + ": unsupported train state version");
  TrainState st;
  st.opt = make_opt_state(model_config);
  st.opt.step = static_cast<int64_t>(read_u64(is));
  st.next_epoch = static_cast<int>(read_u32(is));
  st.config = TrainConfig::from_json_text(read_string(is, 1u << 20));
  read_tensor_block(is, st.opt.m);
  read_tensor_block(is, st.opt.v);
  st.streams.data.restore(read_string(is, 1u << 16));
  st.streams.branch.restore(read_string(is, 1u << 16));
  st.streams.shuffle.restore(read_string(is, 1u << 16));
  st.streams.cond_drop.restore(read_string(is, 1u << 16));
  if (is.peek() != EOF) throw std::runtime_error(path + ": trailing bytes");
  return st;
}

}  // namespace rar
