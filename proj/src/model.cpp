// SPDX-License-Identifier: Apache-2.0
#include "rar/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>

#include "json.hpp"

namespace rar {

using nlohmann::json;

void ModelConfig::validate() const {
  if (depth < 0) throw std::invalid_argument("ModelConfig: negative depth");
  if (width < 1 || mlp_dim < 1 || heads < 1)
    throw std::invalid_argument("ModelConfig: width, mlp_dim, heads must be positive");
  if (width % heads != 0) throw std::invalid_argument("ModelConfig: width not divisible by heads");
  if (vocab_size < 2) throw std::invalid_argument("ModelConfig: vocab_size must be at least 2");
  if (vocab_size > 65536) throw std::invalid_argument("ModelConfig: vocab_size exceeds token width");
  if (seq_len < 1) throw std::invalid_argument("ModelConfig: seq_len must be positive");
  if (num_classes < 1) throw std::invalid_argument("ModelConfig: need at least one class");
}

std::string ModelConfig::canonical_json() const {
  json j;
  j["depth"] = depth;
  j["width"] = width;
  j["mlp_dim"] = mlp_dim;
  j["heads"] = heads;
  j["vocab_size"] = vocab_size;
  j["seq_len"] = seq_len;
  j["num_classes"] = num_classes;
  j["qk_norm"] = qk_norm;
  j["merged"] = merged;
  return j.dump();
}

ModelConfig ModelConfig::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("ModelConfig: invalid JSON: ") + e.what());
  }
  ModelConfig c;
  try {
    c.depth = j.at("depth").get<int>();
    c.width = j.at("width").get<int>();
    c.mlp_dim = j.at("mlp_dim").get<int>();
    c.heads = j.at("heads").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.seq_len = j.at("seq_len").get<int>();
    c.num_classes = j.at("num_classes").get<int>();
    c.qk_norm = j.at("qk_norm").get<bool>();
    c.merged = j.value("merged", false);
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("ModelConfig: missing or mistyped key: ") + e.what());
  }
  c.validate();
  return c;
}

ModelConfig preset_config(const std::string& name, int vocab_size, int seq_len, int num_classes) {
  ModelConfig c;
  if (name == "micro") {
    c.depth = 2, c.width = 8, c.heads = 2, c.mlp_dim = 32;
  } else if (name == "small") {
    c.depth = 4, c.width = 64, c.heads = 4, c.mlp_dim = 256;
  } else if (name == "b") {
    c.depth = 24, c.width = 768, c.heads = 16, c.mlp_dim = 3072;
  } else if (name == "l") {
    c.depth = 24, c.width = 1024, c.heads = 16, c.mlp_dim = 4096;
  } else if (name == "xl") {
    c.depth = 32, c.width = 1280, c.heads = 16, c.mlp_dim = 5120;
  } else if (name == "xxl") {
    c.depth = 40, c.width = 1408, c.heads = 16, c.mlp_dim = 6144;
  } else {
    throw std::invalid_argument("unknown model preset: " + name);
  }
  c.vocab_size = vocab_size;
  c.seq_len = seq_len;
  c.num_classes = num_classes;
  c.validate();
  return c;
}

int64_t param_count(const ModelConfig& c) {
  c.validate();
  const int64_t W = c.width, M = c.mlp_dim, V = c.vocab_size, T = c.seq_len;
  const int64_t hd = c.head_dim();
  int64_t emb = V * W + T * W + (c.merged ? 0 : T * W) + (int64_t(c.num_classes) + 1) * W;
  int64_t block = 2 * W                    // ln1
                  + W * 3 * W + 3 * W      // qkv
                  + (c.qk_norm ? 2 * hd : 0)
                  + W * W + W              // attention projection
                  + 2 * W                  // ln2
                  + W * M + M + M * W + W; // mlp
  int64_t final_part = (c.depth > 0 ? 2 * W : 0) + W * V;
  return emb + c.depth * block + final_part;
}

template <typename S>
std::vector<TensorRef<S>> tensor_refs(ModelParams<S>& p) {
  std::vector<TensorRef<S>> refs;
  auto add = [&](std::string name, Mat<S>& m, int rank, bool decays, bool random_init,
                 bool ones_init = false) {
    refs.push_back({std::move(name), &m, rank, decays, random_init, ones_init});
  };
  add("tok_emb", p.tok_emb, 2, false, true);
  add("pos_emb", p.pos_emb, 2, false, true);
  if (!p.config.merged) add("tgt_emb", p.tgt_emb, 2, false, true);
  add("cls_emb", p.cls_emb, 2, false, true);
  for (int b = 0; b < p.config.depth; ++b) {
    std::string prefix = "blocks." + std::to_string(b) + ".";
    auto& blk = p.blocks[b];
    add(prefix + "ln1_g", blk.ln1_g, 1, false, false, true);
    add(prefix + "ln1_b", blk.ln1_b, 1, false, false);
    add(prefix + "w_qkv", blk.w_qkv, 2, true, true);
    add(prefix + "b_qkv", blk.b_qkv, 1, false, false);
    if (p.config.qk_norm) {
      add(prefix + "q_gain", blk.q_gain, 1, false, false, true);
      add(prefix + "k_gain", blk.k_gain, 1, false, false, true);
    }
    add(prefix + "w_o", blk.w_o, 2, true, true);
    add(prefix + "b_o", blk.b_o, 1, false, false);
    add(prefix + "ln2_g", blk.ln2_g, 1, false, false, true);
    add(prefix + "ln2_b", blk.ln2_b, 1, false, false);
    add(prefix + "w_fc1", blk.w_fc1, 2, true, true);
    add(prefix + "b_fc1", blk.b_fc1, 1, false, false);
    add(prefix + "w_fc2", blk.w_fc2, 2, true, true);
    add(prefix + "b_fc2", blk.b_fc2, 1, false, false);
  }
  if (p.config.depth > 0) {
    add("lnf_g", p.lnf_g, 1, false, false, true);
    add("lnf_b", p.lnf_b, 1, false, false);
  }
  // The head starts at zero so the first loss is exactly log(vocab_size).
  add("head", p.head, 2, true, false);
  return refs;
}

template <typename S>
ModelParams<S> shaped_params(const ModelConfig& config) {
  config.validate();
  ModelParams<S> p;
  p.config = config;
  const int W = config.width, M = config.mlp_dim, hd = config.head_dim();
  p.tok_emb = Mat<S>(config.vocab_size, W);
  p.pos_emb = Mat<S>(config.seq_len, W);
  if (!config.merged) p.tgt_emb = Mat<S>(config.seq_len, W);
  p.cls_emb = Mat<S>(config.num_classes + 1, W);
  p.blocks.resize(config.depth);
  for (auto& blk : p.blocks) {
    blk.ln1_g = Mat<S>(1, W);
    blk.ln1_b = Mat<S>(1, W);
    blk.w_qkv = Mat<S>(W, 3 * W);
    blk.b_qkv = Mat<S>(1, 3 * W);
    if (config.qk_norm) {
      blk.q_gain = Mat<S>(1, hd);
      blk.k_gain = Mat<S>(1, hd);
    }
    blk.w_o = Mat<S>(W, W);
    blk.b_o = Mat<S>(1, W);
    blk.ln2_g = Mat<S>(1, W);
    blk.ln2_b = Mat<S>(1, W);
    blk.w_fc1 = Mat<S>(W, M);
    blk.b_fc1 = Mat<S>(1, M);
    blk.w_fc2 = Mat<S>(M, W);
    blk.b_fc2 = Mat<S>(1, W);
  }
  if (config.depth > 0) {
    p.lnf_g = Mat<S>(1, W);
    p.lnf_b = Mat<S>(1, W);
  }
  p.head = Mat<S>(W, config.vocab_size);
  return p;
}

template <typename S>
ModelParams<S> init_params(const ModelConfig& config, Rng& rng) {
  ModelParams<S> p = shaped_params<S>(config);
  for (auto& ref : tensor_refs(p)) {
    if (ref.random_init) {
      for (auto& v : ref.mat->data) v = static_cast<S>(rng.next_trunc_normal(0.02));
    } else if (ref.ones_init) {
      std::fill(ref.mat->data.begin(), ref.mat->data.end(), S(1));
    }
  }
  return p;
}

template <typename To, typename From>
ModelParams<To> convert_params(const ModelParams<From>& params) {
  ModelParams<To> out = shaped_params<To>(params.config);
  auto src = tensor_refs(const_cast<ModelParams<From>&>(params));
  auto dst = tensor_refs(out);
  for (size_t i = 0; i < src.size(); ++i)
    for (size_t j = 0; j < src[i].mat->data.size(); ++j)
      dst[i].mat->data[j] = static_cast<To>(src[i].mat->data[j]);
  return out;
}

namespace {

// In-place row add: out = a + b.
template <typename S>
inline void add_rows(const S* a, const S* b, S* out, int n) {
  for (int i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

template <typename S>
inline void layer_norm_row(const S* x, int n, const S* g, const S* b, S* hat, S* out, S* rstd) {
  S mean = S(0);
  for (int i = 0; i < n; ++i) mean += x[i];
  mean /= S(n);
  S var = S(0);
  for (int i = 0; i < n; ++i) {
    S d = x[i] - mean;
    var += d * d;
  }
  var /= S(n);
  S r = S(1) / std::sqrt(var + S(kLnEps));
  *rstd = r;
  for (int i = 0; i < n; ++i) {
    hat[i] = (x[i] - mean) * r;
    out[i] = (b ? b[i] : S(0)) + g[i] * hat[i];
  }
}

// dx, dg, db from upstream dout given hat and rstd; dg/db accumulate.
template <typename S>
void layer_norm_backward_row(const S* dout, const S* hat, S rstd, const S* g, int n, S* dx,
                             S* dg_acc, S* db_acc) {
  S m1 = S(0), m2 = S(0);
  for (int i = 0; i < n; ++i) {
    S dhat = dout[i] * g[i];
    m1 += dhat;
    m2 += dhat * hat[i];
  }
  m1 /= S(n);
  m2 /= S(n);
  for (int i = 0; i < n; ++i) {
    S dhat = dout[i] * g[i];
    dx[i] = rstd * (dhat - m1 - hat[i] * m2);
    if (dg_acc) dg_acc[i] += dout[i] * hat[i];
    if (db_acc) db_acc[i] += dout[i];
  }
}

template <typename S>
inline S gelu(S x) {
  return S(0.5) * x * (S(1) + std::erf(x * S(M_SQRT1_2)));
}

template <typename S>
inline S gelu_grad(S x) {
  const S kInvSqrt2Pi = S(0.3989422804014326779);
  return S(0.5) * (S(1) + std::erf(x * S(M_SQRT1_2))) + x * kInvSqrt2Pi * std::exp(S(-0.5) * x * x);
}

template <typename S>
void accumulate_colsum(const Mat<S>& src, Mat<S>& dst) {
  for (int i = 0; i < src.rows; ++i) {
    const S* row = src.row(i);
    S* out = dst.row(0);
    for (int j = 0; j < src.cols; ++j) out[j] += row[j];
  }
}

}  // namespace

template <typename S>
Mat<S> embed_with_targets(const ModelParams<S>& p, std::span<const uint16_t> permuted_tokens,
                          const Permutation& order) {
  const ModelConfig& c = p.config;
  const int T = c.seq_len, W = c.width;
  if (static_cast<int>(permuted_tokens.size()) != T || order.size() != T)
    throw std::invalid_argument("embed_with_targets: sequence length mismatch");
  if (c.merged && !order.is_identity())
    throw std::invalid_argument("embed_with_targets: merged params support only the raster order");
  Mat<S> x(T + 1, W);
  std::vector<S> tmp(W);
  if (!c.merged)
    std::copy(p.tgt_emb.row(order.order[0]), p.tgt_emb.row(order.order[0]) + W, x.row(0));
  for (int k = 1; k <= T; ++k) {
    uint16_t tok = permuted_tokens[k - 1];
    if (tok >= c.vocab_size) throw std::invalid_argument("embed_with_targets: token out of range");
    const int cell = order.order[k - 1];
    const S* pos = p.pos_emb.row(cell);
    const S* extra = pos;
    if (!c.merged && k <= T - 1) {
      add_rows(pos, p.tgt_emb.row(order.order[k]), tmp.data(), W);
      extra = tmp.data();
    }
    add_rows(p.tok_emb.row(tok), extra, x.row(k), W);
  }
  return x;
}

template <typename S>
std::vector<S> embed_token_row(const ModelParams<S>& p, uint16_t token, int cell, int next_cell) {
  const ModelConfig& c = p.config;
  const int W = c.width;
  if (token >= c.vocab_size) throw std::invalid_argument("embed_token_row: token out of range");
  if (cell < 0 || cell >= c.seq_len) throw std::invalid_argument("embed_token_row: bad cell");
  if (next_cell >= c.seq_len) throw std::invalid_argument("embed_token_row: bad next cell");
  if (c.merged) {
    bool raster_next = (next_cell == cell + 1 && cell + 1 < c.seq_len) ||
                       (next_cell < 0 && cell == c.seq_len - 1);
    if (!raster_next)
      throw std::invalid_argument("embed_token_row: merged params support only the raster order");
  }
  std::vector<S> out(W);
  std::vector<S> tmp(W);
  const S* pos = p.pos_emb.row(cell);
  const S* extra = pos;
  if (!c.merged && next_cell >= 0) {
    add_rows(pos, p.tgt_emb.row(next_cell), tmp.data(), W);
    extra = tmp.data();
  }
  add_rows(p.tok_emb.row(token), extra, out.data(), W);
  return out;
}

template <typename S>
std::vector<S> embed_cond_row(const ModelParams<S>& p, std::optional<int> label, int first_cell) {
  const ModelConfig& c = p.config;
  if (label && (*label < 0 || *label >= c.num_classes))
    throw std::invalid_argument("embed_cond_row: label out of range");
  if (first_cell < 0 || first_cell >= c.seq_len)
    throw std::invalid_argument("embed_cond_row: bad first cell");
  if (c.merged && first_cell != 0)
    throw std::invalid_argument("embed_cond_row: merged params support only the raster order");
  const int idx = label ? *label : c.num_classes;
  std::vector<S> out(c.width);
  if (c.merged) {
    std::copy(p.cls_emb.row(idx), p.cls_emb.row(idx) + c.width, out.begin());
  } else {
    add_rows(p.tgt_emb.row(first_cell), p.cls_emb.row(idx), out.data(), c.width);
  }
  return out;
}

template <typename S>
KvCache<S>::KvCache(const ModelConfig& cfg) : config(cfg) {
  config.validate();
  const int cap = config.seq_len + 1;
  k_post.reserve(config.depth);
  v.reserve(config.depth);
  for (int b = 0; b < config.depth; ++b) {
    k_post.emplace_back(cap, config.width);
    v.emplace_back(cap, config.width);
  }
}

template <typename S>
Activations<S>::Activations(const ModelConfig& config, int n_rows) : cache(config) {
  const int W = config.width, M = config.mlp_dim, n = n_rows;
  x0 = Mat<S>(n, W);
  blocks.resize(config.depth);
  for (auto& blk : blocks) {
    blk.ln1_hat = Mat<S>(n, W);
    blk.ln1_out = Mat<S>(n, W);
    blk.ln1_rstd.assign(n, S(0));
    if (config.qk_norm) {
      blk.q_hat = Mat<S>(n, W);
      blk.k_hat = Mat<S>(n, W);
      blk.q_rstd.assign(static_cast<size_t>(n) * config.heads, S(0));
      blk.k_rstd.assign(static_cast<size_t>(n) * config.heads, S(0));
    }
    blk.q_post = Mat<S>(n, W);
    blk.probs.assign(config.heads, Mat<S>(n, n));
    blk.ctx = Mat<S>(n, W);
    blk.res1 = Mat<S>(n, W);
    blk.ln2_hat = Mat<S>(n, W);
    blk.ln2_out = Mat<S>(n, W);
    blk.ln2_rstd.assign(n, S(0));
    blk.h_pre = Mat<S>(n, M);
    blk.h_act = Mat<S>(n, M);
    blk.res2 = Mat<S>(n, W);
  }
  if (config.depth > 0) {
    lnf_hat = Mat<S>(n, W);
    lnf_out = Mat<S>(n, W);
    lnf_rstd.assign(n, S(0));
  }
  logits = Mat<S>(n, config.vocab_size);
}

namespace {

// Processes one sequence row through every block, appending this row's keys
// and values to the cache. When acts is given, every intermediate lands in
// acts at row index cache.len. This is the only attention implementation;
// teacher forcing and cached decoding both run through it.
template <typename S>
std::vector<S> forward_row_impl(const ModelParams<S>& p, KvCache<S>& cache,
                                std::span<const S> x_row, Activations<S>* acts) {
  const ModelConfig& c = p.config;
  const int W = c.width, M = c.mlp_dim, H = c.heads, hd = c.head_dim();
  const S alpha = S(1) / std::sqrt(static_cast<S>(hd));
  if (static_cast<int>(x_row.size()) != W)
    throw std::invalid_argument("forward_row: row width mismatch");
  if (static_cast<int>(cache.k_post.size()) != c.depth)
    throw std::invalid_argument("forward_row: cache depth mismatch");
  if (cache.len >= c.seq_len + 1) throw std::runtime_error("forward_row: sequence full");
  const int i = cache.len;

  std::vector<S> x(x_row.begin(), x_row.end());
  if (acts) std::copy(x.begin(), x.end(), acts->x0.row(i));

  std::vector<S> hat(W), ln_out(W), qkv(3 * W), ctx(W), attn(W), scratch(W);
  std::vector<S> h_pre(M), h_act(M), hq(hd), hk(hd);
  std::vector<S> scores, probs;
  scores.reserve(i + 1);
  probs.reserve(i + 1);

  for (int b = 0; b < c.depth; ++b) {
    const auto& blk = p.blocks[b];
    S rstd;
    layer_norm_row(x.data(), W, blk.ln1_g.row(0), blk.ln1_b.row(0), hat.data(), ln_out.data(),
                   &rstd);
    if (acts) {
      auto& ab = acts->blocks[b];
      std::copy(hat.begin(), hat.end(), ab.ln1_hat.row(i));
      std::copy(ln_out.begin(), ln_out.end(), ab.ln1_out.row(i));
      ab.ln1_rstd[i] = rstd;
    }

    std::copy(blk.b_qkv.row(0), blk.b_qkv.row(0) + 3 * W, qkv.begin());
    matvec_acc(ln_out.data(), blk.w_qkv, qkv.data());
    S* q = qkv.data();
    S* k = qkv.data() + W;
    S* vv = qkv.data() + 2 * W;

    // Gain-only normalization over each head's query/key slice.
    if (c.qk_norm) {
      for (int h = 0; h < H; ++h) {
        S q_rstd, k_rstd;
        S* qh = q + h * hd;
        S* kh = k + h * hd;
        layer_norm_row(qh, hd, blk.q_gain.row(0), static_cast<const S*>(nullptr), hq.data(),
                       scratch.data(), &q_rstd);
        std::copy(scratch.data(), scratch.data() + hd, qh);
        layer_norm_row(kh, hd, blk.k_gain.row(0), static_cast<const S*>(nullptr), hk.data(),
                       scratch.data(), &k_rstd);
        std::copy(scratch.data(), scratch.data() + hd, kh);
        if (acts) {
          auto& ab = acts->blocks[b];
          std::copy(hq.begin(), hq.end(), ab.q_hat.row(i) + h * hd);
          std::copy(hk.begin(), hk.end(), ab.k_hat.row(i) + h * hd);
          ab.q_rstd[static_cast<size_t>(i) * H + h] = q_rstd;
          ab.k_rstd[static_cast<size_t>(i) * H + h] = k_rstd;
        }
      }
    }
    std::copy(k, k + W, cache.k_post[b].row(i));
    std::copy(vv, vv + W, cache.v[b].row(i));
    if (acts) std::copy(q, q + W, acts->blocks[b].q_post.row(i));

    for (int h = 0; h < H; ++h) {
      const S* qh = q + h * hd;
      scores.assign(i + 1, S(0));
      S m = -std::numeric_limits<S>::infinity();
      for (int j = 0; j <= i; ++j) {
        scores[j] = alpha * dot(qh, cache.k_post[b].row(j) + h * hd, hd);
        m = std::max(m, scores[j]);
      }
      probs.assign(i + 1, S(0));
      S total = S(0);
      for (int j = 0; j <= i; ++j) {
        probs[j] = std::exp(scores[j] - m);
        total += probs[j];
      }
      S* ch = ctx.data() + h * hd;
      std::fill(ch, ch + hd, S(0));
      for (int j = 0; j <= i; ++j) {
        probs[j] /= total;
        const S* vj = cache.v[b].row(j) + h * hd;
        for (int d = 0; d < hd; ++d) ch[d] += probs[j] * vj[d];
      }
      if (acts) std::copy(probs.begin(), probs.end(), acts->blocks[b].probs[h].row(i));
    }

    std::copy(blk.b_o.row(0), blk.b_o.row(0) + W, attn.begin());
    matvec_acc(ctx.data(), blk.w_o, attn.data());
    for (int d = 0; d < W; ++d) x[d] += attn[d];
    if (acts) {
      std::copy(ctx.begin(), ctx.end(), acts->blocks[b].ctx.row(i));
      std::copy(x.begin(), x.end(), acts->blocks[b].res1.row(i));
    }

    layer_norm_row(x.data(), W, blk.ln2_g.row(0), blk.ln2_b.row(0), hat.data(), ln_out.data(),
                   &rstd);
    if (acts) {
      auto& ab = acts->blocks[b];
      std::copy(hat.begin(), hat.end(), ab.ln2_hat.row(i));
      std::copy(ln_out.begin(), ln_out.end(), ab.ln2_out.row(i));
      ab.ln2_rstd[i] = rstd;
    }
    std::copy(blk.b_fc1.row(0), blk.b_fc1.row(0) + M, h_pre.begin());
    matvec_acc(ln_out.data(), blk.w_fc1, h_pre.data());
    for (int d = 0; d < M; ++d) h_act[d] = gelu(h_pre[d]);
    std::copy(blk.b_fc2.row(0), blk.b_fc2.row(0) + W, scratch.begin());
    matvec_acc(h_act.data(), blk.w_fc2, scratch.data());
    for (int d = 0; d < W; ++d) x[d] += scratch[d];
    if (acts) {
      auto& ab = acts->blocks[b];
      std::copy(h_pre.begin(), h_pre.end(), ab.h_pre.row(i));
      std::copy(h_act.begin(), h_act.end(), ab.h_act.row(i));
      std::copy(x.begin(), x.end(), ab.res2.row(i));
    }
  }

  const S* head_in = x.data();
  if (c.depth > 0) {
    S rstd;
    layer_norm_row(x.data(), W, p.lnf_g.row(0), p.lnf_b.row(0), hat.data(), ln_out.data(), &rstd);
    if (acts) {
      std::copy(hat.begin(), hat.end(), acts->lnf_hat.row(i));
      std::copy(ln_out.begin(), ln_out.end(), acts->lnf_out.row(i));
      acts->lnf_rstd[i] = rstd;
    }
    head_in = ln_out.data();
  }
  std::vector<S> logits(c.vocab_size, S(0));
  matvec_acc(head_in, p.head, logits.data());
  if (acts) std::copy(logits.begin(), logits.end(), acts->logits.row(i));

  cache.len = i + 1;
  return logits;
}

}  // namespace

template <typename S>
std::vector<S> forward_row(const ModelParams<S>& params, KvCache<S>& cache,
                           std::span<const S> x_row) {
  return forward_row_impl(params, cache, x_row, static_cast<Activations<S>*>(nullptr));
}

template <typename S>
Mat<S> forward(const ModelParams<S>& p, std::span<const uint16_t> permuted_tokens,
               const Permutation& order, std::optional<int> label, Activations<S>* acts) {
  const ModelConfig& c = p.config;
  if (label && (*label < 0 || *label >= c.num_classes))
    throw std::invalid_argument("forward: label out of range");
  Mat<S> x = embed_with_targets(p, permuted_tokens, order);
  const int idx = label ? *label : c.num_classes;
  const S* cls = p.cls_emb.row(idx);
  if (c.merged)
    std::copy(cls, cls + c.width, x.row(0));
  else
    for (int d = 0; d < c.width; ++d) x.at(0, d) += cls[d];

  const int n = x.rows;
  Mat<S> logits(n, c.vocab_size);
  KvCache<S> local_cache(c);
  KvCache<S>* cache = acts ? &acts->cache : &local_cache;
  if (acts && acts->x0.rows != n)
    throw std::invalid_argument("forward: activations sized for a different sequence");
  cache->reset();
  for (int i = 0; i < n; ++i) {
    std::vector<S> row = forward_row_impl(p, *cache, std::span<const S>(x.row(i), c.width), acts);
    std::copy(row.begin(), row.end(), logits.row(i));
  }
  return logits;
}

template <typename S>
S shifted_cross_entropy(const Mat<S>& logits, std::span<const uint16_t> labels, Mat<S>* dlogits) {
  const int n = logits.rows, V = logits.cols;
  if (static_cast<int>(labels.size()) != n)
    throw std::invalid_argument("shifted_cross_entropy: label count must match rows");
  if (n < 2) throw std::invalid_argument("shifted_cross_entropy: need at least two rows");
  if (dlogits) {
    if (!dlogits->same_shape(logits))
      throw std::invalid_argument("shifted_cross_entropy: dlogits shape mismatch");
    dlogits->zero();
  }
  const int scored = n - 1;
  S loss = S(0);
  std::vector<S> prob(V);
  for (int t = 0; t < scored; ++t) {
    uint16_t y = labels[t + 1];
    if (y >= V) throw std::invalid_argument("shifted_cross_entropy: label out of range");
    const S* row = logits.row(t);
    S m = row[0];
    for (int j = 1; j < V; ++j) m = std::max(m, row[j]);
    S total = S(0);
    for (int j = 0; j < V; ++j) {
      prob[j] = std::exp(row[j] - m);
      total += prob[j];
    }
    loss += std::log(total) + m - row[y];
    if (dlogits) {
      S* drow = dlogits->row(t);
      for (int j = 0; j < V; ++j) drow[j] = prob[j] / total / S(scored);
      drow[y] -= S(1) / S(scored);
    }
  }
  return loss / S(scored);
}

template <typename S>
void backward(const ModelParams<S>& p, const Activations<S>& acts, const Mat<S>& dlogits,
              std::span<const uint16_t> permuted_tokens, const Permutation& order,
              std::optional<int> label, ModelParams<S>& grads) {
  const ModelConfig& c = p.config;
  const int W = c.width, M = c.mlp_dim, H = c.heads, hd = c.head_dim(), V = c.vocab_size;
  const int n = acts.logits.rows;
  const int T = c.seq_len;
  const S alpha = S(1) / std::sqrt(static_cast<S>(hd));
  if (n != T + 1) throw std::invalid_argument("backward: activation rows do not match seq_len");
  if (!dlogits.same_shape(acts.logits))
    throw std::invalid_argument("backward: dlogits shape mismatch");

  // Head and final norm.
  Mat<S> dx(n, W);
  const Mat<S>& head_in = c.depth > 0 ? acts.lnf_out : acts.x0;
  matmul_at_acc(head_in, dlogits, grads.head);
  Mat<S> d_head_in(n, W);
  matmul_bt_acc(dlogits, p.head, d_head_in);
  if (c.depth > 0) {
    for (int i = 0; i < n; ++i)
      layer_norm_backward_row(d_head_in.row(i), acts.lnf_hat.row(i), acts.lnf_rstd[i],
                              p.lnf_g.row(0), W, dx.row(i), grads.lnf_g.row(0),
                              grads.lnf_b.row(0));
  } else {
    dx = d_head_in;
  }

  Mat<S> dres1(n, W), dtmp(n, W), dh_act(n, M), dh_pre(n, M);
  Mat<S> dctx(n, W), dq_post(n, W), dk_post(n, W), dv(n, W), dqkv(n, 3 * W);

  for (int b = c.depth - 1; b >= 0; --b) {
    const auto& blk = p.blocks[b];
    auto& gblk = grads.blocks[b];
    const auto& ab = acts.blocks[b];

    // MLP branch; dx currently holds d(res2).
    matmul_at_acc(ab.h_act, dx, gblk.w_fc2);
    accumulate_colsum(dx, gblk.b_fc2);
    dh_act.zero();
    matmul_bt_acc(dx, blk.w_fc2, dh_act);
    for (int i = 0; i < n; ++i) {
      const S* hp = ab.h_pre.row(i);
      const S* da = dh_act.row(i);
      S* dp = dh_pre.row(i);
      for (int j = 0; j < M; ++j) dp[j] = da[j] * gelu_grad(hp[j]);
    }
    matmul_at_acc(ab.ln2_out, dh_pre, gblk.w_fc1);
    accumulate_colsum(dh_pre, gblk.b_fc1);
    dtmp.zero();
    matmul_bt_acc(dh_pre, blk.w_fc1, dtmp);
    for (int i = 0; i < n; ++i) {
      layer_norm_backward_row(dtmp.row(i), ab.ln2_hat.row(i), ab.ln2_rstd[i], blk.ln2_g.row(0), W,
                              dres1.row(i), gblk.ln2_g.row(0), gblk.ln2_b.row(0));
      const S* direct = dx.row(i);
      S* acc = dres1.row(i);
      for (int j = 0; j < W; ++j) acc[j] += direct[j];
    }

    // Attention branch; dres1 holds d(res1).
    matmul_at_acc(ab.ctx, dres1, gblk.w_o);
    accumulate_colsum(dres1, gblk.b_o);
    dctx.zero();
    matmul_bt_acc(dres1, blk.w_o, dctx);

    dq_post.zero();
    dk_post.zero();
    dv.zero();
    const Mat<S>& k_post = acts.cache.k_post[b];
    const Mat<S>& v_rows = acts.cache.v[b];
    std::vector<S> dp(n), ds(n);
    for (int h = 0; h < H; ++h) {
      const Mat<S>& probs = ab.probs[h];
      for (int i = 0; i < n; ++i) {
        const S* dctx_i = dctx.row(i) + h * hd;
        const S* prow = probs.row(i);
        S tmp = S(0);
        for (int j = 0; j <= i; ++j) {
          dp[j] = dot(dctx_i, v_rows.row(j) + h * hd, hd);
          tmp += dp[j] * prow[j];
        }
        const S* q_i = ab.q_post.row(i) + h * hd;
        S* dq_i = dq_post.row(i) + h * hd;
        for (int j = 0; j <= i; ++j) {
          ds[j] = prow[j] * (dp[j] - tmp);
          const S* k_j = k_post.row(j) + h * hd;
          S* dk_j = dk_post.row(j) + h * hd;
          S* dv_j = dv.row(j) + h * hd;
          const S a_ds = alpha * ds[j];
          for (int d = 0; d < hd; ++d) {
            dq_i[d] += a_ds * k_j[d];
            dk_j[d] += a_ds * q_i[d];
            dv_j[d] += prow[j] * dctx_i[d];
          }
        }
      }
    }

    // Through the query/key normalization into the fused qkv projection.
    if (c.qk_norm) {
      for (int i = 0; i < n; ++i) {
        for (int h = 0; h < H; ++h) {
          layer_norm_backward_row(dq_post.row(i) + h * hd, ab.q_hat.row(i) + h * hd,
                                  ab.q_rstd[static_cast<size_t>(i) * H + h], blk.q_gain.row(0), hd,
                                  dqkv.row(i) + h * hd, gblk.q_gain.row(0),
                                  static_cast<S*>(nullptr));
          layer_norm_backward_row(dk_post.row(i) + h * hd, ab.k_hat.row(i) + h * hd,
                                  ab.k_rstd[static_cast<size_t>(i) * H + h], blk.k_gain.row(0), hd,
                                  dqkv.row(i) + W + h * hd, gblk.k_gain.row(0),
                                  static_cast<S*>(nullptr));
        }
      }
    } else {
      for (int i = 0; i < n; ++i) {
        std::copy(dq_post.row(i), dq_post.row(i) + W, dqkv.row(i));
        std::copy(dk_post.row(i), dk_post.row(i) + W, dqkv.row(i) + W);
      }
    }
    for (int i = 0; i < n; ++i) std::copy(dv.row(i), dv.row(i) + W, dqkv.row(i) + 2 * W);

    matmul_at_acc(ab.ln1_out, dqkv, gblk.w_qkv);
    accumulate_colsum(dqkv, gblk.b_qkv);
    dtmp.zero();
    matmul_bt_acc(dqkv, blk.w_qkv, dtmp);
    for (int i = 0; i < n; ++i) {
      layer_norm_backward_row(dtmp.row(i), ab.ln1_hat.row(i), ab.ln1_rstd[i], blk.ln1_g.row(0), W,
                              dx.row(i), gblk.ln1_g.row(0), gblk.ln1_b.row(0));
      const S* direct = dres1.row(i);
      S* acc = dx.row(i);
      for (int j = 0; j < W; ++j) acc[j] += direct[j];
    }
  }

  // Scatter into the embedding tables.
  if (static_cast<int>(permuted_tokens.size()) != T || order.size() != T)
    throw std::invalid_argument("backward: sequence length mismatch");
  const int cls_idx = label ? *label : c.num_classes;
  {
    const S* d0 = dx.row(0);
    S* cg = grads.cls_emb.row(cls_idx);
    for (int j = 0; j < W; ++j) cg[j] += d0[j];
    if (!c.merged) {
      S* tg = grads.tgt_emb.row(order.order[0]);
      for (int j = 0; j < W; ++j) tg[j] += d0[j];
    }
  }
  for (int k = 1; k <= T; ++k) {
    const S* dk = dx.row(k);
    uint16_t tok = permuted_tokens[k - 1];
    if (tok >= V) throw std::invalid_argument("backward: token out of range");
    S* tg = grads.tok_emb.row(tok);
    S* pg = grads.pos_emb.row(order.order[k - 1]);
    for (int j = 0; j < W; ++j) {
      tg[j] += dk[j];
      pg[j] += dk[j];
    }
    if (!c.merged && k <= T - 1) {
      S* eg = grads.tgt_emb.row(order.order[k]);
      for (int j = 0; j < W; ++j) eg[j] += dk[j];
    }
  }
}

template <typename S>
S loss_and_grad(const ModelParams<S>& p, std::span<const uint16_t> grid_tokens,
                const Permutation& order, std::optional<int> label, ModelParams<S>& grads) {
  const int T = p.config.seq_len;
  if (static_cast<int>(grid_tokens.size()) != T)
    throw std::invalid_argument("loss_and_grad: token count mismatch");
  std::vector<uint16_t> permuted = apply_permutation(grid_tokens, order);
  Activations<S> acts(p.config, T + 1);
  forward(p, std::span<const uint16_t>(permuted), order, label, &acts);
  std::vector<uint16_t> labels(T + 1, 0);
  std::copy(permuted.begin(), permuted.end(), labels.begin() + 1);
  Mat<S> dlogits(T + 1, p.config.vocab_size);
  S loss = shifted_cross_entropy(acts.logits, std::span<const uint16_t>(labels), &dlogits);
  backward(p, acts, dlogits, std::span<const uint16_t>(permuted), order, label, grads);
  return loss;
}

template <typename S>
ModelParams<S> merge_positional(const ModelParams<S>& params) {
  if (params.config.merged) throw std::invalid_argument("merge_positional: already merged");
  ModelParams<S> out = convert_params<S, S>(params);
  const int T = params.config.seq_len, W = params.config.width;
  for (int i = 0; i + 1 < T; ++i)
    add_rows(out.pos_emb.row(i), params.tgt_emb.row(i + 1), out.pos_emb.row(i), W);
  for (int r = 0; r < out.cls_emb.rows; ++r)
    add_rows(out.cls_emb.row(r), params.tgt_emb.row(0), out.cls_emb.row(r), W);
  out.tgt_emb = Mat<S>();
  out.config.merged = true;
  return out;
}

namespace {
constexpr char kCkptMagic[8] = {'R', 'A', 'R', 'C', 'K', 'P', 'T', '1'};
constexpr uint32_t kCkptVersion = 1;
}  // namespace

void save_checkpoint(const std::string& path, const ModelParams<float>& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  os.write(kCkptMagic, 8);
  write_u32(os, kCkptVersion);
  std::string cfg = params.config.canonical_json();
  write_u32(os, static_cast<uint32_t>(cfg.size()));
  os.write(cfg.data(), cfg.size());
  auto refs = tensor_refs(const_cast<ModelParams<float>&>(params));
  for (const auto& ref : refs) {
    if (ref.name.size() > 65535) throw std::logic_error("tensor name too long");
    write_u16(os, static_cast<uint16_t>(ref.name.size()));
    os.write(ref.name.data(), ref.name.size());
    write_u8(os, static_cast<uint8_t>(ref.rank));
    if (ref.rank == 1) {
      write_u64(os, static_cast<uint64_t>(ref.mat->cols));
    } else {
      write_u64(os, static_cast<uint64_t>(ref.mat->rows));
      write_u64(os, static_cast<uint64_t>(ref.mat->cols));
    }
    for (float v : ref.mat->data) write_f32(os, v);
  }
  if (!os) throw std::runtime_error("write failed: " + path);
}

ModelParams<float> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path);
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kCkptMagic, 8) != 0)
    throw std::runtime_error(path + ": not a checkpoint file");
  uint32_t version = read_u32(is);
  if (version != kCkptVersion)
    throw std::runtime_error(path + ": unsupported checkpoint version " + std::to_string(version));
  uint32_t cfg_len = read_u32(is);
  if (cfg_len > (1u << 20)) throw std::runtime_error(path + ": implausible config length");
  std::string cfg_text(cfg_len, '\0');
  if (!is.read(cfg_text.data(), cfg_len)) throw std::runtime_error(path + ": truncated config");
  ModelConfig config = ModelConfig::from_json_text(cfg_text);

  struct Stored {
    int rank;
    std::vector<uint64_t> dims;
    std::vector<float> data;
  };
  std::map<std::string, Stored> tensors;
  while (is.peek() != EOF) {
    uint16_t name_len = read_u16(is);
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) throw std::runtime_error(path + ": truncated tensor name");
    Stored st;
    st.rank = read_u8(is);
    if (st.rank < 1 || st.rank > 2)
      throw std::runtime_error(path + ": tensor " + name + " has unsupported rank");
    uint64_t count = 1;
    for (int d = 0; d < st.rank; ++d) {
      uint64_t dim = read_u64(is);
      if (dim == 0 || dim > (uint64_t(1) << 32))
        throw std::runtime_error(path + ": tensor " + name + " has implausible dims");
      st.dims.push_back(dim);
      count *= dim;
    }
    if (count > (uint64_t(1) << 34))
      throw std::runtime_error(path + ": tensor " + name + " too large");
    st.data.resize(count);
    for (auto& v : st.data) v = read_f32(is);
    if (!tensors.emplace(name, std::move(st)).second)
      throw std::runtime_error(path + ": duplicate tensor " + name);
  }

  ModelParams<float> params = shaped_params<float>(config);
  auto refs = tensor_refs(params);
  for (auto& ref : refs) {
    auto it = tensors.find(ref.name);
    if (it == tensors.end()) throw std::runtime_error(path + ": missing tensor " + ref.name);
    const Stored& st = it->second;
    bool shape_ok;
    if (ref.rank == 1)
      shape_ok = st.rank == 1 && st.dims[0] == static_cast<uint64_t>(ref.mat->cols) &&
                 ref.mat->rows == 1;
    else
      shape_ok = st.rank == 2 && st.dims[0] == static_cast<uint64_t>(ref.mat->rows) &&
                 st.dims[1] == static_cast<uint64_t>(ref.mat->cols);
    if (!shape_ok) throw std::runtime_error(path + ": tensor " + ref.name + " has wrong shape");
    std::copy(st.data.begin(), st.data.end(), ref.mat->data.begin());
    tensors.erase(it);
  }
  if (!tensors.empty())
    throw std::runtime_error(path + ": unexpected tensor " + tensors.begin()->first);
  return params;
}

// Explicit instantiations: float for training and inference, double for the
// finite-difference harness.
template std::vector<TensorRef<float>> tensor_refs(ModelParams<float>&);
template std::vector<TensorRef<double>> tensor_refs(ModelParams<double>&);
template ModelParams<float> shaped_params<float>(const ModelConfig&);
template ModelParams<double> shaped_params<double>(const ModelConfig&);
template ModelParams<float> init_params<float>(const ModelConfig&, Rng&);
template ModelParams<double> init_params<double>(const ModelConfig&, Rng&);
template ModelParams<float> convert_params<float, float>(const ModelParams<float>&);
template ModelParams<double> convert_params<double, float>(const ModelParams<float>&);
template ModelParams<float> convert_params<float, double>(const ModelParams<double>&);
template ModelParams<double> convert_params<double, double>(const ModelParams<double>&);
template Mat<float> embed_with_targets(const ModelParams<float>&, std::span<const uint16_t>,
                                       const Permutation&);
template Mat<double> embed_with_targets(const ModelParams<double>&, std::span<const uint16_t>,
                                        const Permutation&);
template std::vector<float> embed_token_row(const ModelParams<float>&, uint16_t, int, int);
template std::vector<double> embed_token_row(const ModelParams<double>&, uint16_t, int, int);
template std::vector<float> embed_cond_row(const ModelParams<float>&, std::optional<int>, int);
template std::vector<double> embed_cond_row(const ModelParams<double>&, std::optional<int>, int);
template struct KvCache<float>;
template struct KvCache<double>;
template struct Activations<float>;
template struct Activations<double>;
template std::vector<float> forward_row(const ModelParams<float>&, KvCache<float>&,
                                        std::span<const float>);
template std::vector<double> forward_row(const ModelParams<double>&, KvCache<double>&,
                                         std::span<const double>);
template Mat<float> forward(const ModelParams<float>&, std::span<const uint16_t>,
                            const Permutation&, std::optional<int>, Activations<float>*);
template Mat<double> forward(const ModelParams<double>&, std::span<const uint16_t>,
                             const Permutation&, std::optional<int>, Activations<double>*);
template float shifted_cross_entropy(const Mat<float>&, std::span<const uint16_t>, Mat<float>*);
template double shifted_cross_entropy(const Mat<double>&, std::span<const uint16_t>, Mat<double>*);
template void backward(const ModelParams<float>&, const Activations<float>&, const Mat<float>&,
                       std::span<const uint16_t>, const Permutation&, std::optional<int>,
                       ModelParams<float>&);
template void backward(const ModelParams<double>&, const Activations<double>&, const Mat<double>&,
                       std::span<const uint16_t>, const Permutation&, std::optional<int>,
                       ModelParams<double>&);
template float loss_and_grad(const ModelParams<float>&, std::span<const uint16_t>,
                             const Permutation&, std::optional<int>, ModelParams<float>&);
template double loss_and_grad(const ModelParams<double>&, std::span<const uint16_t>,
                              const Permutation&, std::optional<int>, ModelParams<double>&);
template ModelParams<float> merge_positional(const ModelParams<float>&);
template ModelParams<double> merge_positional(const ModelParams<double>&);

}  // namespace rar
