// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rar/common.hpp"
#include "rar/permute.hpp"
#include "rar/rng.hpp"

namespace rar {

// Layer-norm epsilon shared by every normalization in the model.
inline constexpr double kLnEps = 1e-5;

struct ModelConfig {
  int depth = 0;
  int width = 0;
  int mlp_dim = 0;
  int heads = 0;
  int vocab_size = 0;
  int seq_len = 0;      // grid tokens per sample; the input adds one condition row
  int num_classes = 0;  // class-embedding table carries one extra null row
  bool qk_norm = true;
  bool merged = false;  // target embeddings folded into position/class tables

  int head_dim() const { return heads > 0 ? width / heads : 0; }
  void validate() const;
  std::string canonical_json() const;
  static ModelConfig from_json_text(const std::string& text);
};

// Known layer geometries; vocab_size, seq_len, and num_classes come from the
// data. micro and small are desk-scale; b/l/xl/xxl follow the published
// image-generation stack.
ModelConfig preset_config(const std::string& name, int vocab_size, int seq_len, int num_classes);

int64_t param_count(const ModelConfig& config);

template <typename S>
struct BlockParams {
  Mat<S> ln1_g, ln1_b;
  Mat<S> w_qkv, b_qkv;    // width x 3*width, fused q|k|v
  Mat<S> q_gain, k_gain;  // 1 x head_dim, shared across heads; empty without qk_norm
  Mat<S> w_o, b_o;
  Mat<S> ln2_g, ln2_b;
  Mat<S> w_fc1, b_fc1;
  Mat<S> w_fc2, b_fc2;
};

template <typename S>
struct ModelParams {
  ModelConfig config;
  Mat<S> tok_emb;  // vocab x width
  Mat<S> pos_emb;  // seq_len x width, indexed by grid cell
  Mat<S> tgt_emb;  // seq_len x width, indexed by grid cell; empty when merged
  Mat<S> cls_emb;  // (num_classes + 1) x width; last row is the null condition
  std::vector<BlockParams<S>> blocks;
  Mat<S> lnf_g, lnf_b;  // absent when depth == 0
  Mat<S> head;          // width x vocab, no bias
};

// Stable registry of every tensor: checkpoint order, serialized rank,
// whether weight decay applies, and whether init randomizes it.
template <typename S>
struct TensorRef {
  std::string name;
  Mat<S>* mat;
  int rank;
  bool decays;       // weight decay applies (weight matrices only)
  bool random_init;  // truncated-normal at init; otherwise zeros or ones
  bool ones_init;    // norm and attention gains start at one
};
template <typename S>
std::vector<TensorRef<S>> tensor_refs(ModelParams<S>& params);

// Allocates all tensors to the shapes implied by config, zero-filled.
template <typename S>
ModelParams<S> shaped_params(const ModelConfig& config);

// Truncated-normal(0.02, clipped at two sigma) for embeddings and weight
// matrices, zeros for biases and the output head, ones for gains. Draws are
// consumed in tensor_refs order, random tensors only.
template <typename S>
ModelParams<S> init_params(const ModelConfig& config, Rng& rng);

template <typename To, typename From>
ModelParams<To> convert_params(const ModelParams<From>& params);

// Input embedding. Row 0 carries the target embedding of the first generated
// cell (the condition embedding is added inside forward); row k >= 1 carries
// token y_{k-1} as tok + (pos[order[k-1]] + tgt[order[k]]), the final row
// omitting the target term. Merged params require the identity order.
template <typename S>
Mat<S> embed_with_targets(const ModelParams<S>& params, std::span<const uint16_t> permuted_tokens,
                          const Permutation& order);

// Single-row embeddings for incremental decoding; next_cell < 0 means none.
template <typename S>
std::vector<S> embed_token_row(const ModelParams<S>& params, uint16_t token, int cell,
                               int next_cell);
template <typename S>
std::vector<S> embed_cond_row(const ModelParams<S>& params, std::optional<int> label,
                              int first_cell);

template <typename S>
struct KvCache {
  explicit KvCache(const ModelConfig& config);
  void reset() { len = 0; }

  ModelConfig config;
  int len = 0;
  std::vector<Mat<S>> k_post;  // per block, (seq_len + 1) x width
  std::vector<Mat<S>> v;
};

template <typename S>
struct BlockActs {
  Mat<S> ln1_hat, ln1_out;
  std::vector<S> ln1_rstd;
  Mat<S> q_hat, k_hat;  // normalized pre-gain; empty without qk_norm
  std::vector<S> q_rstd, k_rstd;
  Mat<S> q_post;
  std::vector<Mat<S>> probs;  // per head, lower-triangular n x n
  Mat<S> ctx, res1;
  Mat<S> ln2_hat, ln2_out;
  std::vector<S> ln2_rstd;
  Mat<S> h_pre, h_act, res2;
};

// Everything backward() needs. cache holds per-block post-norm keys and
// values; the rest is recorded per row as forward() walks the sequence.
template <typename S>
struct Activations {
  explicit Activations(const ModelConfig& config, int n_rows);
  Mat<S> x0;
  KvCache<S> cache;
  std::vector<BlockActs<S>> blocks;
  Mat<S> lnf_hat, lnf_out;
  std::vector<S> lnf_rstd;
  Mat<S> logits;
};

// Appends one embedded row to the cache and returns its logits row. The full
// forward pass below is a loop over this same code path, which is what makes
// cached decoding bit-identical to teacher forcing.
template <typename S>
std::vector<S> forward_row(const ModelParams<S>& params, KvCache<S>& cache,
                           std::span<const S> x_row);

// Deduction helper: span<const S> cannot be deduced from a vector argument.
template <typename S>
std::vector<S> forward_row(const ModelParams<S>& params, KvCache<S>& cache,
                           const std::vector<S>& x_row) {
  return forward_row(params, cache, std::span<const S>(x_row));
}

// Teacher-forced pass over [condition, y_0 .. y_{T-1}]; returns (T+1) x vocab
// logits. nullopt label selects the learned null condition row.
template <typename S>
Mat<S> forward(const ModelParams<S>& params, std::span<const uint16_t> permuted_tokens,
               const Permutation& order, std::optional<int> label,
               Activations<S>* acts = nullptr);

// Mean next-token cross entropy with a one-step shift: logits row t scores
// labels[t + 1]; labels[0] is a placeholder and the final row is unused.
// dlogits, when given, receives d(loss)/d(logits) at matching shape.
template <typename S>
S shifted_cross_entropy(const Mat<S>& logits, std::span<const uint16_t> labels,
                        Mat<S>* dlogits = nullptr);

// Accumulates parameter gradients (and the embedding scatter) into grads.
template <typename S>
void backward(const ModelParams<S>& params, const Activations<S>& acts, const Mat<S>& dlogits,
              std::span<const uint16_t> permuted_tokens, const Permutation& order,
              std::optional<int> label, ModelParams<S>& grads);

// Embed, forward, loss, backward in one call; returns the sample loss.
template <typename S>
S loss_and_grad(const ModelParams<S>& params, std::span<const uint16_t> grid_tokens,
                const Permutation& order, std::optional<int> label, ModelParams<S>& grads);

// Folds target embeddings into the position and class tables for raster-only
// decoding: pos'[i] = pos[i] + tgt[i+1], cls'[c] = cls[c] + tgt[0]. Logits
// are bit-identical to the unmerged model under the identity order.
template <typename S>
ModelParams<S> merge_positional(const ModelParams<S>& params);

void save_checkpoint(const std::string& path, const ModelParams<float>& params);
ModelParams<float> load_checkpoint(const std::string& path);

}  // namespace rar
