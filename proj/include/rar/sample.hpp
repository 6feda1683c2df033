// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rar/gridtok.hpp"
#include "rar/model.hpp"

namespace rar {

enum class GuidanceSchedule { none, linear, power_cosine };

GuidanceSchedule guidance_schedule_from_string(const std::string& name);
std::string to_string(GuidanceSchedule schedule);

struct SampleConfig {
  double temperature = 1.0;
  bool greedy = false;
  double guidance_scale = 1.0;
  GuidanceSchedule schedule = GuidanceSchedule::none;
  double schedule_power = 2.5;  // exponent of the power_cosine ramp

  // Guidance is off exactly when the schedule is none and the scale is one;
  // only then is the unconditional pass skipped.
  bool guidance_active() const {
    return !(schedule == GuidanceSchedule::none && guidance_scale == 1.0);
  }
  void validate() const;
};

// Effective guidance scale at generation step t of T.
double guidance_scale_at(int t, int total_steps, const SampleConfig& cfg);

// guided = uncond + s * (cond - uncond), elementwise over the vocabulary.
std::vector<float> guided_logits(std::span<const float> cond, std::span<const float> uncond,
                                 double scale);

// Draws one grid under the given visiting order with two KV caches when
// guidance is active (conditional and null-condition passes share the same
// embedded input rows). Temperature applies after guidance.
TokenGrid generate(const ModelParams<float>& params, std::optional<int> label, int height,
                   int width, const Permutation& order, const SampleConfig& cfg, Rng& rng);

}  // namespace rar
