// SPDX-License-Identifier: Apache-2.0
#include "rar/sample.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace rar {

GuidanceSchedule guidance_schedule_from_string(const std::string& name) {
  if (name == "none") return GuidanceSchedule::none;
  if (name == "linear") return GuidanceSchedule::linear;
  if (name == "power_cosine") return GuidanceSchedule::power_cosine;
  throw std::invalid_argument("unknown guidance schedule: " + name);
}

std::string to_string(GuidanceSchedule schedule) {
  switch (schedule) {
    case GuidanceSchedule::none: return "none";
    case GuidanceSchedule::linear: return "linear";
    case GuidanceSchedule::power_cosine: return "power_cosine";
  }
  throw std::logic_error("to_string: bad GuidanceSchedule");
}

void SampleConfig::validate() const {
  if (!greedy && !(temperature > 0))
    throw std::invalid_argument("SampleConfig: temperature must be positive");
  if (guidance_scale < 0) throw std::invalid_argument("SampleConfig: negative guidance scale");
  if (schedule == GuidanceSchedule::power_cosine && !(schedule_power > 0))
    throw std::invalid_argument("SampleConfig: schedule_power must be positive");
}

double guidance_scale_at(int t, int total_steps, const SampleConfig& cfg) {
  if (t < 0 || t >= total_steps) throw std::invalid_argument("guidance_scale_at: step out of range");
  const double frac = double(t + 1) / double(total_steps);
  switch (cfg.schedule) {
    case GuidanceSchedule::none: return cfg.guidance_scale;
    case GuidanceSchedule::linear: return cfg.guidance_scale * frac;
    case GuidanceSchedule::power_cosine:
      return cfg.guidance_scale * (1.0 - std::cos(M_PI * std::pow(frac, cfg.schedule_power))) / 2.0;
  }
  throw std::logic_error("guidance_scale_at: bad schedule");
}

std::vector<float> guided_logits(std::span<const float> cond, std::span<const float> uncond,
                                 double scale) {
  if (cond.size() != uncond.size())
    throw std::invalid_argument("guided_logits: vocabulary size mismatch");
  std::vector<float> out(cond.size());
  const float s = static_cast<float>(scale);
  for (size_t i = 0; i < cond.size(); ++i) out[i] = uncond[i] + s * (cond[i] - uncond[i]);
  return out;
}

namespace {

uint16_t pick_token(std::span<const float> logits, const SampleConfig& cfg, Rng& rng) {
  const int V = static_cast<int>(logits.size());
  if (cfg.greedy) {
    int best = 0;
    for (int j = 1; j < V; ++j)
      if (logits[j] > logits[best]) best = j;
    return static_cast<uint16_t>(best);
  }
  std::vector<double> probs(V);
  const double inv_t = 1.0 / cfg.temperature;
  double m = -std::numeric_limits<double>::infinity();
  for (int j = 0; j < V; ++j) {
    probs[j] = double(logits[j]) * inv_t;
    m = std::max(m, probs[j]);
  }
  double total = 0.0;
  for (int j = 0; j < V; ++j) {
    probs[j] = std::exp(probs[j] - m);
    total += probs[j];
  }
  for (int j = 0; j < V; ++j) probs[j] /= total;
  return static_cast<uint16_t>(draw_categorical(rng, probs));
}

}  // namespace

TokenGrid generate(const ModelParams<float>& params, std::optional<int> label, int height,
                   int width, const Permutation& order, const SampleConfig& cfg, Rng& rng) {
  cfg.validate();
  const ModelConfig& mc = params.config;
  const int T = mc.seq_len;
  if (height < 1 || width < 1 || height * width != T)
    throw std::invalid_argument("generate: grid shape does not match model seq_len");
  if (order.size() != T) throw std::invalid_argument("generate: order length mismatch");
  order.validate();
  if (label && (*label < 0 || *label >= mc.num_classes))
    throw std::invalid_argument("generate: label out of range");
  const bool guide = cfg.guidance_active();
  if (guide && !label)
    throw std::invalid_argument("generate: guidance requires a class label");

  KvCache<float> cond_cache(mc);
  std::optional<KvCache<float>> uncond_cache;
  if (guide) uncond_cache.emplace(mc);

  std::vector<float> cond_logits =
      forward_row(params, cond_cache, embed_cond_row(params, label, order.order[0]));
  std::vector<float> uncond_logits;
  if (guide)
    uncond_logits = forward_row(params, *uncond_cache,
                                embed_cond_row(params, std::nullopt, order.order[0]));

  TokenGrid grid;
  grid.height = height;
  grid.width = width;
  grid.label = label.value_or(-1);
  grid.tokens.assign(static_cast<size_t>(T), 0);

  for (int t = 0; t < T; ++t) {
    std::vector<float> step_logits =
        guide ? guided_logits(cond_logits, uncond_logits, guidance_scale_at(t, T, cfg))
              : cond_logits;
    uint16_t v = pick_token(step_logits, cfg, rng);
    grid.tokens[order.order[t]] = v;
    if (t + 1 < T) {
      const int cell = order.order[t];
      const int next = order.order[t + 1];
      std::vector<float> row = embed_token_row(params, v, cell, next);
      cond_logits = forward_row(params, cond_cache, row);
      if (guide) uncond_logits = forward_row(params, *uncond_cache, row);
    }
  }
  return grid;
}

}  // namespace rar
