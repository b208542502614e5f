#pragma once

// Attention kernels over [batch, tokens, dim] tensors. All kernels are pure:
// inputs are expected pre-normalized, residual wiring lives in the model.
//
// The bi-directional kernel is the core primitive: one similarity buffer is
// computed from reference projections of both streams, then read twice, with
// a row softmax for latent updates and a column softmax for token updates.
// Each stream therefore needs only a reference/value projection pair instead
// of separate query/key/value sets, and only the latent stream carries an
// output projection; the token delta is the head-merged aggregation itself.

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "bixt/tensor.hpp"

namespace bixt {

template <class S>
struct Linear {
  Tensor<S> w;  // [in, out]
  Tensor<S> b;  // [out]

  static Linear init(int64_t in, int64_t out, Rng& rng, double stddev = 0.02) {
    Linear l;
    l.w = Tensor<S>::trunc_normal({in, out}, rng, stddev, true);
    l.b = Tensor<S>::zeros({out}, true);
    return l;
  }

  int64_t param_count() const { return w.size() + b.size(); }

  template <class F>
  void visit(const std::string& prefix, F&& f) const {
    f(prefix + ".w", w);
    f(prefix + ".b", b);
  }
};

template <class S>
Tensor<S> apply(const Linear<S>& l, const Tensor<S>& x) {
  return add(matmul(x, l.w), l.b);
}

template <class S>
struct Norm {
  Tensor<S> g;  // scale, ones at init
  Tensor<S> b;  // shift, zeros at init

  static Norm init(int64_t dim) {
    Norm n;
    n.g = Tensor<S>::full({dim}, S(1), true);
    n.b = Tensor<S>::zeros({dim}, true);
    return n;
  }

  int64_t param_count() const { return g.size() + b.size(); }

  template <class F>
  void visit(const std::string& prefix, F&& f) const {
    f(prefix + ".g", g);
    f(prefix + ".b", b);
  }
};

template <class S>
Tensor<S> apply(const Norm<S>& n, const Tensor<S>& x) {
  return layer_norm(x, n.g, n.b);
}

// Two-layer GELU MLP; hidden width = round(dim * ratio).
template <class S>
struct Ffn {
  Linear<S> l1, l2;

  static Ffn init(int64_t dim, double ratio, Rng& rng, double stddev = 0.02) {
    const int64_t hidden =
        std::max<int64_t>(1, std::llround(double(dim) * ratio));
    Ffn f;
    f.l1 = Linear<S>::init(dim, hidden, rng, stddev);
    f.l2 = Linear<S>::init(hidden, dim, rng, stddev);
    return f;
  }

  int64_t param_count() const { return l1.param_count() + l2.param_count(); }

  template <class F>
  void visit(const std::string& prefix, F&& f) const {
    l1.visit(prefix + ".l1", f);
    l2.visit(prefix + ".l2", f);
  }
};

template <class S>
Tensor<S> apply(const Ffn<S>& f, const Tensor<S>& x) {
  return apply(f.l2, gelu(apply(f.l1, x)));
}

// [B, T, D] -> [B, H, T, D/H]
template <class S>
Tensor<S> split_heads(const Tensor<S>& x, int64_t heads) {
  const int64_t B = x.dim(0), T = x.dim(1), D = x.dim(2);
  if (D % heads != 0)
    throw ShapeError("split_heads: dim " + std::to_string(D) +
                     " not divisible by " + std::to_string(heads) + " heads");
  return permute(reshape(x, {B, T, heads, D / heads}), {0, 2, 1, 3});
}

// [B, H, T, dh] -> [B, T, H*dh]
template <class S>
Tensor<S> merge_heads(const Tensor<S>& x) {
  const int64_t B = x.dim(0), H = x.dim(1), T = x.dim(2), dh = x.dim(3);
  return reshape(permute(x, {0, 2, 1, 3}), {B, T, H * dh});
}

namespace detail {

template <class S>
void check_stream(const char* kernel, const Tensor<S>& x, int64_t heads) {
  if (x.rank() != 3)
    throw ShapeError(std::string(kernel) + ": expected [B, T, D], got " +
                     shape_str(x.shape()));
  if (heads < 1 || x.dim(2) % heads != 0)
    throw ShapeError(std::string(kernel) + ": dim " + std::to_string(x.dim(2)) +
                     " not divisible by " + std::to_string(heads) + " heads");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Scaled dot-product attention on plain (already projected) streams:
// q [.., M, d] attends into k/v [.., N, d]. The multi-head kernels feed this
// shape per head; callers can also use it directly on unsplit tensors.

template <class S>
Tensor<S> scaled_dot_attention(const Tensor<S>& q, const Tensor<S>& k,
                               const Tensor<S>& v,
                               const TokenMask* mask = nullptr) {
  if (q.rank() < 2 || k.rank() < 2 || v.rank() < 2)
    throw ShapeError("scaled_dot_attention: rank-2+ operands required, got " +
                     shape_str(q.shape()) + " / " + shape_str(k.shape()) +
                     " / " + shape_str(v.shape()));
  if (q.dim(-1) != k.dim(-1) || k.dim(-2) != v.dim(-2))
    throw ShapeError("scaled_dot_attention: q " + shape_str(q.shape()) +
                     " vs k " + shape_str(k.shape()) + " vs v " +
                     shape_str(v.shape()));
  const int64_t d = q.dim(-1);
  auto sim = scale(matmul(q, transpose(k)), S(1.0 / std::sqrt(double(d))));
  if (mask) sim = mask_token_axis(sim, *mask);
  return matmul(softmax(sim, -1), v);
}

// ---------------------------------------------------------------------------
// Multi-head self-attention, used on the latent stream and by the baseline
// token transformer. `mask` hides padded key positions.

template <class S>
struct MhsaParams {
  Linear<S> q, k, v, o;

  static MhsaParams init(int64_t dim, Rng& rng, double stddev = 0.02) {
    MhsaParams p;
    p.q = Linear<S>::init(dim, dim, rng, stddev);
    p.k = Linear<S>::init(dim, dim, rng, stddev);
    p.v = Linear<S>::init(dim, dim, rng, stddev);
    p.o = Linear<S>::init(dim, dim, rng, stddev);
    return p;
  }

  int64_t param_count() const {
    return q.param_count() + k.param_count() + v.param_count() +
           o.param_count();
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) const {
    q.visit(prefix + ".q", f);
    k.visit(prefix + ".k", f);
    v.visit(prefix + ".v", f);
    o.visit(prefix + ".o", f);
  }
};

template <class S>
Tensor<S> multi_head_self_attention(const Tensor<S>& x, const MhsaParams<S>& p,
                                    int64_t heads,
                                    const TokenMask* mask = nullptr) {
  detail::check_stream("multi_head_self_attention", x, heads);
  const int64_t dh = x.dim(2) / heads;
  auto qh = split_heads(apply(p.q, x), heads);
  auto kh = split_heads(apply(p.k, x), heads);
  auto vh = split_heads(apply(p.v, x), heads);
  auto sim = scale(matmul(qh, transpose(kh)), S(1.0 / std::sqrt(double(dh))));
  if (mask) sim = mask_token_axis(sim, *mask);
  auto attn = softmax(sim, -1);
  return apply(p.o, merge_heads(matmul(attn, vh)));
}

// ---------------------------------------------------------------------------
// One-directional cross-attention: `qx` queries into `kv`. Building block of
// the sequential baseline.

template <class S>
struct CrossAttentionParams {
  Linear<S> q, k, v, o;

  static CrossAttentionParams init(int64_t dim, Rng& rng,
                                   double stddev = 0.02) {
    CrossAttentionParams p;
    p.q = Linear<S>::init(dim, dim, rng, stddev);
    p.k = Linear<S>::init(dim, dim, rng, stddev);
    p.v = Linear<S>::init(dim, dim, rng, stddev);
    p.o = Linear<S>::init(dim, dim, rng, stddev);
    return p;
  }

  int64_t param_count() const {
    return q.param_count() + k.param_count() + v.param_count() +
           o.param_count();
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) const {
    q.visit(prefix + ".q", f);
    k.visit(prefix + ".k", f);
    v.visit(prefix + ".v", f);
    o.visit(prefix + ".o", f);
  }
};

template <class S>
struct CrossAttentionResult {
  Tensor<S> out;  // [B, M, D]
  Tensor<S> sim;  // [B, H, M, N] pre-softmax, post-mask
};

template <class S>
CrossAttentionResult<S> cross_attention(const Tensor<S>& qx,
                                        const Tensor<S>& kv,
                                        const CrossAttentionParams<S>& p,
                                        int64_t heads,
                                        const TokenMask* mask = nullptr) {
  detail::check_stream("cross_attention", qx, heads);
  detail::check_stream("cross_attention", kv, heads);
  if (qx.dim(0) != kv.dim(0) || qx.dim(2) != kv.dim(2))
    throw ShapeError("cross_attention: stream shapes " + shape_str(qx.shape()) +
                     " vs " + shape_str(kv.shape()) + " disagree");
  const int64_t dh = qx.dim(2) / heads;
  auto qh = split_heads(apply(p.q, qx), heads);
  auto kh = split_heads(apply(p.k, kv), heads);
  auto vh = split_heads(apply(p.v, kv), heads);
  auto sim = scale(matmul(qh, transpose(kh)), S(1.0 / std::sqrt(double(dh))));
  if (mask) sim = mask_token_axis(sim, *mask);
  auto attn = softmax(sim, -1);
  CrossAttentionResult<S> r;
  r.out = apply(p.o, merge_heads(matmul(attn, vh)));
  r.sim = sim;
  return r;
}

// ---------------------------------------------------------------------------
// Bi-directional cross-attention.

template <class S>
struct BiDirParams {
  Linear<S> lat_ref, lat_val;  // latent stream reference / value
  Linear<S> tok_ref, tok_val;  // token stream reference / value
  Linear<S> lat_out;           // output projection, latent side only

  static BiDirParams init(int64_t dim, Rng& rng, double stddev = 0.02) {
    BiDirParams p;
    p.lat_ref = Linear<S>::init(dim, dim, rng, stddev);
    p.lat_val = Linear<S>::init(dim, dim, rng, stddev);
    p.tok_ref = Linear<S>::init(dim, dim, rng, stddev);
    p.tok_val = Linear<S>::init(dim, dim, rng, stddev);
    p.lat_out = Linear<S>::init(dim, dim, rng, stddev);
    return p;
  }

  // The per-stream input projections that feed the similarity buffer and the
  // aggregations. Four pairs here against six for the sequential pairing.
  int64_t input_projection_params() const {
    return lat_ref.param_count() + lat_val.param_count() +
           tok_ref.param_count() + tok_val.param_count();
  }

  int64_t param_count() const {
    return input_projection_params() + lat_out.param_count();
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) const {
    lat_ref.visit(prefix + ".lat_ref", f);
    lat_val.visit(prefix + ".lat_val", f);
    tok_ref.visit(prefix + ".tok_ref", f);
    tok_val.visit(prefix + ".tok_val", f);
    lat_out.visit(prefix + ".lat_out", f);
  }
};

template <class S>
struct BiDirResult {
  Tensor<S> latent_delta;    // [B, M, D]
  Tensor<S> token_delta;     // [B, N, D], head-merged aggregation, unprojected
  Tensor<S> sim;             // [B, H, M, N] shared pre-softmax buffer
  Tensor<S> latent_weights;  // softmax over tokens (rows)
  Tensor<S> token_weights;   // softmax over latents (columns)
  // Data buffers each softmax actually read; both must alias sim.
  const void* latent_softmax_src = nullptr;
  const void* token_softmax_src = nullptr;
};

template <class S>
BiDirResult<S> bi_directional_cross_attention(const Tensor<S>& lat,
                                              const Tensor<S>& tok,
                                              const BiDirParams<S>& p,
                                              int64_t heads,
                                              const TokenMask* mask = nullptr) {
  detail::check_stream("bi_directional_cross_attention", lat, heads);
  detail::check_stream("bi_directional_cross_attention", tok, heads);
  if (lat.dim(0) != tok.dim(0) || lat.dim(2) != tok.dim(2))
    throw ShapeError("bi_directional_cross_attention: stream shapes " +
                     shape_str(lat.shape()) + " vs " + shape_str(tok.shape()) +
                     " disagree");
  const int64_t dh = lat.dim(2) / heads;
  auto rl = split_heads(apply(p.lat_ref, lat), heads);  // [B,H,M,dh]
  auto rt = split_heads(apply(p.tok_ref, tok), heads);  // [B,H,N,dh]
  auto vl = split_heads(apply(p.lat_val, lat), heads);
  auto vt = split_heads(apply(p.tok_val, tok), heads);

  // The single similarity computation both directions share.
  auto sim = scale(matmul(rl, transpose(rt)), S(1.0 / std::sqrt(double(dh))));
  if (mask) sim = mask_token_axis(sim, *mask);

  BiDirResult<S> r;
  r.sim = sim;
  r.latent_weights = softmax(sim, -1);
  r.latent_softmax_src = sim.ptr().get();
  // Column softmax on the same buffer. Fully masked columns come out uniform
  // over the latents; the resulting token rows are dead padding that callers
  // never read.
  r.token_weights = softmax(sim, -2);
  r.token_softmax_src = sim.ptr().get();

  r.latent_delta = apply(p.lat_out, merge_heads(matmul(r.latent_weights, vt)));
  r.token_delta = merge_heads(matmul(transpose(r.token_weights), vl));
  return r;
}

// ---------------------------------------------------------------------------
// Sequential pairing: two one-directional passes with separate buffers.
// With `sequential_updates` the token-side pass attends into the already
// updated latents (the natural layered form); without it both passes read the
// pre-update streams, which makes the two directions exactly symmetric in
// their inputs.

template <class S>
struct SequentialParams {
  CrossAttentionParams<S> lat_from_tok;  // latents query tokens
  CrossAttentionParams<S> tok_from_lat;  // tokens query latents

  static SequentialParams init(int64_t dim, Rng& rng, double stddev = 0.02) {
    SequentialParams p;
    p.lat_from_tok = CrossAttentionParams<S>::init(dim, rng, stddev);
    p.tok_from_lat = CrossAttentionParams<S>::init(dim, rng, stddev);
    return p;
  }

  int64_t input_projection_params() const {
    return lat_from_tok.q.param_count() + lat_from_tok.k.param_count() +
           lat_from_tok.v.param_count() + tok_from_lat.q.param_count() +
           tok_from_lat.k.param_count() + tok_from_lat.v.param_count();
  }

  int64_t param_count() const {
    return lat_from_tok.param_count() + tok_from_lat.param_count();
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) const {
    lat_from_tok.visit(prefix + ".lat_from_tok", f);
    tok_from_lat.visit(prefix + ".tok_from_lat", f);
  }
};

template <class S>
struct SequentialResult {
  Tensor<S> latent_delta;  // [B, M, D]
  Tensor<S> token_delta;   // [B, N, D]
  Tensor<S> sim_lat;       // [B, H, M, N]
  Tensor<S> sim_tok;       // [B, H, N, M]
};

template <class S>
SequentialResult<S> sequential_cross_attention(
    const Tensor<S>& lat, const Tensor<S>& tok, const SequentialParams<S>& p,
    int64_t heads, const TokenMask* mask = nullptr,
    bool sequential_updates = true) {
  auto first = cross_attention(lat, tok, p.lat_from_tok, heads, mask);
  SequentialResult<S> r;
  r.latent_delta = first.out;
  r.sim_lat = first.sim;
  const Tensor<S> lat_source =
      sequential_updates ? add(lat, first.out) : lat;
  // Token queries into latents; every latent is valid so no mask here.
  auto second = cross_attention(tok, lat_source, p.tok_from_lat, heads);
  r.token_delta = second.out;
  r.sim_tok = second.sim;
  return r;
}

// ---------------------------------------------------------------------------
// Iterative latent-bottleneck baseline. Each block is a pre-norm one-way
// cross-attention (latents query the raw tokens) with its own FFN, followed
// by sa_count self-attention units on the latents. Tokens are never updated;
// callers feed the same input tokens to every block. Cross-attention
// parameters can be shared across blocks: all of them, or all but the first
// block's own set. Self-attention units are never shared.

enum class ShareScheme { none = 0, all = 1, all_but_first = 2 };

inline ShareScheme parse_share_scheme(const std::string& s) {
  if (s == "none") return ShareScheme::none;
  if (s == "all") return ShareScheme::all;
  if (s == "all_but_first") return ShareScheme::all_but_first;
  throw ConfigError("unknown share scheme '" + s +
                    "', expected none, all or all_but_first");
}

inline const char* share_scheme_name(ShareScheme s) {
  switch (s) {
    case ShareScheme::none:
      return "none";
    case ShareScheme::all:
      return "all";
    case ShareScheme::all_but_first:
      return "all_but_first";
  }
  throw ConfigError("invalid share scheme value " +
                    std::to_string(static_cast<int>(s)));
}

template <class S>
struct IterativeCaUnit {
  Norm<S> lat_norm, tok_norm;
  CrossAttentionParams<S> attn;
  Norm<S> ffn_norm;
  Ffn<S> ffn;

  static IterativeCaUnit init(int64_t dim, double mlp_ratio, Rng& rng,
                              double stddev = 0.02) {
    IterativeCaUnit u;
    u.lat_norm = Norm<S>::init(dim);
    u.tok_norm = Norm<S>::init(dim);
    u.attn = CrossAttentionParams<S>::init(dim, rng, stddev);
    u.ffn_norm = Norm<S>::init(dim);
    u.ffn = Ffn<S>::init(dim, mlp_ratio, rng, stddev);
    return u;
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) const {
    lat_norm.visit(prefix + ".lat_norm", f);
    tok_norm.visit(prefix + ".tok_norm", f);
    attn.visit(prefix + ".attn", f);
    ffn_norm.visit(prefix + ".ffn_norm", f);
    ffn.visit(prefix + ".ffn", f);
  }
};

template <class S>
struct IterativeSaUnit {
  Norm<S> attn_norm;
  MhsaParams<S> attn;
  Norm<S> ffn_norm;
  Ffn<S> ffn;

  static IterativeSaUnit init(int64_t dim, double mlp_ratio, Rng& rng,
                              double stddev = 0.02) {
    IterativeSaUnit u;
    u.attn_norm = Norm<S>::init(dim);
    u.attn = MhsaParams<S>::init(dim, rng, stddev);
    u.ffn_norm = Norm<S>::init(dim);
    u.ffn = Ffn<S>::init(dim, mlp_ratio, rng, stddev);
    return u;
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) const {
    attn_norm.visit(prefix + ".attn_norm", f);
    attn.visit(prefix + ".attn", f);
    ffn_norm.visit(prefix + ".ffn_norm", f);
    ffn.visit(prefix + ".ffn", f);
  }
};

template <class S>
struct IterativeBlock {
  IterativeCaUnit<S> ca;
  std::vector<IterativeSaUnit<S>> sa;

  template <class F>
  void visit(const std::string& prefix, F&& f) const {
    ca.visit(prefix + ".ca", f);
    for (size_t i = 0; i < sa.size(); ++i)
      sa[i].visit(prefix + ".sa." + std::to_string(i), f);
  }
};

template <class S>
struct IterativeParams {
  std::vector<IterativeBlock<S>> blocks;

  // Sharing copies the tensor handles, so shared blocks alias one parameter
  // set rather than holding equal-valued clones.
  static IterativeParams init(int64_t depth, int64_t sa_count, int64_t dim,
                              double mlp_ratio, ShareScheme scheme, Rng& rng,
                              double stddev = 0.02) {
    if (depth < 1)
      throw ConfigError("iterative params: depth " + std::to_string(depth) +
                        " < 1");
    if (sa_count < 0)
      throw ConfigError("iterative params: negative sa_count " +
                        std::to_string(sa_count));
    IterativeParams p;
    for (int64_t i = 0; i < depth; ++i) {
      IterativeBlock<S> blk;
      if (scheme == ShareScheme::all && i > 0)
        blk.ca = p.blocks[0].ca;
      else if (scheme == ShareScheme::all_but_first && i > 1)
        blk.ca = p.blocks[1].ca;
      else
        blk.ca = IterativeCaUnit<S>::init(dim, mlp_ratio, rng, stddev);
      for (int64_t s = 0; s < sa_count; ++s)
        blk.sa.push_back(IterativeSaUnit<S>::init(dim, mlp_ratio, rng, stddev));
      p.blocks.push_back(std::move(blk));
    }
    return p;
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) const {
    for (size_t i = 0; i < blocks.size(); ++i)
      blocks[i].visit(prefix + ".blocks." + std::to_string(i), f);
  }

  // Shared tensors counted once.
  int64_t param_count() const {
    std::unordered_set<const void*> seen;
    int64_t n = 0;
    visit("p", [&](const std::string&, const Tensor<S>& t) {
      if (seen.insert(t.ptr().get()).second) n += t.size();
    });
    return n;
  }
};

template <class S>
Tensor<S> iterative_cross_attention_block(const Tensor<S>& lat,
                                          const Tensor<S>& tok,
                                          const IterativeBlock<S>& p,
                                          int64_t heads, int64_t sa_count,
                                          ShareScheme scheme,
                                          const TokenMask* mask = nullptr,
                                          CrossAttentionResult<S>* ca_out =
                                              nullptr) {
  const int scheme_value = static_cast<int>(scheme);
  if (scheme_value < 0 || scheme_value > 2)
    throw ConfigError(
        "iterative_cross_attention_block: invalid share scheme value " +
        std::to_string(scheme_value));
  if (sa_count != int64_t(p.sa.size()))
    throw ConfigError("iterative_cross_attention_block: sa_count " +
                      std::to_string(sa_count) + " but block holds " +
                      std::to_string(p.sa.size()) + " self-attention units");
  auto ca = cross_attention(apply(p.ca.lat_norm, lat),
                            apply(p.ca.tok_norm, tok), p.ca.attn, heads, mask);
  if (ca_out) *ca_out = ca;
  auto x = add(lat, ca.out);
  x = add(x, apply(p.ca.ffn, apply(p.ca.ffn_norm, x)));
  for (const auto& u : p.sa) {
    x = add(x, multi_head_self_attention(apply(u.attn_norm, x), u.attn, heads));
    x = add(x, apply(u.ffn, apply(u.ffn_norm, x)));
  }
  return x;
}

}  // namespace bixt
