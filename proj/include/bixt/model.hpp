#pragma once

// The ladder model: L layers that refine M latent vectors and N tokens in
// parallel through bi-directional cross-attention, plus the baseline stacks
// (sequential two-way CA, iterative latent bottleneck, plain token
// self-attention), input adapters, heads, parameter registry and counting.
//
// Per layer (bi-directional): pre-norm CA updates both streams from the
// pre-layer states, per-stream FFNs, then the latent stream alone gets one
// self-attention and a second FFN. Tokens optionally pass through a
// refinement hook (identity unless installed).

#include <algorithm>
#include <cstring>
#include <functional>
#include <map>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "bixt/attention.hpp"
#include "bixt/tensor.hpp"
#include "bixt/tokenizer.hpp"

namespace bixt {

enum class AttentionVariant {
  bidirectional = 0,
  sequential = 1,
  iterative = 2,
  full_self_attention = 3,
};

inline AttentionVariant parse_attention_variant(const std::string& s) {
  if (s == "bidirectional") return AttentionVariant::bidirectional;
  if (s == "sequential") return AttentionVariant::sequential;
  if (s == "iterative") return AttentionVariant::iterative;
  if (s == "full_self_attention") return AttentionVariant::full_self_attention;
  throw ConfigError("unknown attention variant '" + s + "'");
}

inline const char* attention_variant_name(AttentionVariant v) {
  switch (v) {
    case AttentionVariant::bidirectional:
      return "bidirectional";
    case AttentionVariant::sequential:
      return "sequential";
    case AttentionVariant::iterative:
      return "iterative";
    case AttentionVariant::full_self_attention:
      return "full_self_attention";
  }
  throw ConfigError("invalid attention variant value " +
                    std::to_string(static_cast<int>(v)));
}

enum class HeadType { classify_mean_latent = 0, dense_token_linear = 1, none = 2 };

inline HeadType parse_head_type(const std::string& s) {
  if (s == "classify_mean_latent") return HeadType::classify_mean_latent;
  if (s == "dense_token_linear") return HeadType::dense_token_linear;
  if (s == "none") return HeadType::none;
  throw ConfigError("unknown head type '" + s + "'");
}

inline const char* head_type_name(HeadType h) {
  switch (h) {
    case HeadType::classify_mean_latent:
      return "classify_mean_latent";
    case HeadType::dense_token_linear:
      return "dense_token_linear";
    case HeadType::none:
      return "none";
  }
  throw ConfigError("invalid head type value " +
                    std::to_string(static_cast<int>(h)));
}

enum class InputKind { id = 0, patch = 1 };

inline InputKind parse_input_kind(const std::string& s) {
  if (s == "id") return InputKind::id;
  if (s == "patch") return InputKind::patch;
  throw ConfigError("unknown input kind '" + s + "'");
}

inline const char* input_kind_name(InputKind k) {
  switch (k) {
    case InputKind::id:
      return "id";
    case InputKind::patch:
      return "patch";
  }
  throw ConfigError("invalid input kind value " +
                    std::to_string(static_cast<int>(k)));
}

struct ModelConfig {
  int64_t layers = 12;
  int64_t latents = 64;
  int64_t dim = 192;
  int64_t heads = 6;
  double mlp_ratio = 4.0;
  AttentionVariant attention_variant = AttentionVariant::bidirectional;
  int64_t sa_count = 6;                          // iterative only
  ShareScheme share_scheme = ShareScheme::all;   // iterative only
  HeadType head = HeadType::classify_mean_latent;
  int64_t num_classes = 1000;
  double drop_path = 0.0;

  InputKind input = InputKind::id;
  int64_t vocab = 32;     // id input
  int64_t max_len = 128;  // id input
  PatchSpec patch;        // patch input

  void validate() const {
    if (layers < 1)
      throw ConfigError("config: layers " + std::to_string(layers) + " < 1");
    if (latents < 1)
      throw ConfigError("config: latents " + std::to_string(latents) + " < 1");
    if (dim < 1 || heads < 1 || dim % heads != 0)
      throw ConfigError("config: dim " + std::to_string(dim) +
                        " not divisible by heads " + std::to_string(heads));
    if (mlp_ratio <= 0)
      throw ConfigError("config: mlp_ratio must be positive");
    if (drop_path < 0 || drop_path >= 1)
      throw ConfigError("config: drop_path " + std::to_string(drop_path) +
                        " outside [0, 1)");
    if (head != HeadType::none && num_classes < 1)
      throw ConfigError("config: head needs num_classes >= 1");
    if (attention_variant == AttentionVariant::iterative && sa_count < 0)
      throw ConfigError("config: negative sa_count");
    share_scheme_name(share_scheme);  // rejects cast garbage
    if (input == InputKind::id) {
      if (vocab < 1 || max_len < 1)
        throw ConfigError("config: id input needs vocab and max_len >= 1");
    } else {
      patch.validate();
    }
  }

  int64_t posenc_axes() const { return input == InputKind::id ? 1 : 2; }

  // Token count of one input under this config (padded length for ids).
  int64_t token_count() const {
    return input == InputKind::id ? max_len : patch.tokens();
  }
};

// ---------------------------------------------------------------------------
// Per-variant layer stacks.

template <class S>
struct BidirLayer {
  Norm<S> lat_ca_n, tok_ca_n;
  BiDirParams<S> ca;
  Norm<S> tok_ffn_n;
  Ffn<S> tok_ffn;
  Norm<S> lat_ffn_n;
  Ffn<S> lat_ffn;
  Norm<S> lat_sa_n;
  MhsaParams<S> sa;
  Norm<S> lat_ffn2_n;
  Ffn<S> lat_ffn2;

  static BidirLayer init(int64_t dim, double ratio, Rng& rng) {
    BidirLayer l;
    l.lat_ca_n = Norm<S>::init(dim);
    l.tok_ca_n = Norm<S>::init(dim);
    l.ca = BiDirParams<S>::init(dim, rng);
    l.tok_ffn_n = Norm<S>::init(dim);
    l.tok_ffn = Ffn<S>::init(dim, ratio, rng);
    l.lat_ffn_n = Norm<S>::init(dim);
    l.lat_ffn = Ffn<S>::init(dim, ratio, rng);
    l.lat_sa_n = Norm<S>::init(dim);
    l.sa = MhsaParams<S>::init(dim, rng);
    l.lat_ffn2_n = Norm<S>::init(dim);
    l.lat_ffn2 = Ffn<S>::init(dim, ratio, rng);
    return l;
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) const {
    lat_ca_n.visit(prefix + ".lat_ca_n", f);
    tok_ca_n.visit(prefix + ".tok_ca_n", f);
    ca.visit(prefix + ".ca", f);
    tok_ffn_n.visit(prefix + ".tok_ffn_n", f);
    tok_ffn.visit(prefix + ".tok_ffn", f);
    lat_ffn_n.visit(prefix + ".lat_ffn_n", f);
    lat_ffn.visit(prefix + ".lat_ffn", f);
    lat_sa_n.visit(prefix + ".lat_sa_n", f);
    sa.visit(prefix + ".sa", f);
    lat_ffn2_n.visit(prefix + ".lat_ffn2_n", f);
    lat_ffn2.visit(prefix + ".lat_ffn2", f);
  }
};

template <class S>
struct SequentialLayer {
  Norm<S> lat_ca_n, tok_ca_n;
  SequentialParams<S> ca;
  Norm<S> tok_ffn_n;
  Ffn<S> tok_ffn;
  Norm<S> lat_ffn_n;
  Ffn<S> lat_ffn;
  Norm<S> lat_sa_n;
  MhsaParams<S> sa;
  Norm<S> lat_ffn2_n;
  Ffn<S> lat_ffn2;

  static SequentialLayer init(int64_t dim, double ratio, Rng& rng) {
    SequentialLayer l;
    l.lat_ca_n = Norm<S>::init(dim);
    l.tok_ca_n = Norm<S>::init(dim);
    l.ca = SequentialParams<S>::init(dim, rng);
    l.tok_ffn_n = Norm<S>::init(dim);
    l.tok_ffn = Ffn<S>::init(dim, ratio, rng);
    l.lat_ffn_n = Norm<S>::init(dim);
    l.lat_ffn = Ffn<S>::init(dim, ratio, rng);
    l.lat_sa_n = Norm<S>::init(dim);
    l.sa = MhsaParams<S>::init(dim, rng);
    l.lat_ffn2_n = Norm<S>::init(dim);
    l.lat_ffn2 = Ffn<S>::init(dim, ratio, rng);
    return l;
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) const {
    lat_ca_n.visit(prefix + ".lat_ca_n", f);
    tok_ca_n.visit(prefix + ".tok_ca_n", f);
    ca.visit(prefix + ".ca", f);
    tok_ffn_n.visit(prefix + ".tok_ffn_n", f);
    tok_ffn.visit(prefix + ".tok_ffn", f);
    lat_ffn_n.visit(prefix + ".lat_ffn_n", f);
    lat_ffn.visit(prefix + ".lat_ffn", f);
    lat_sa_n.visit(prefix + ".lat_sa_n", f);
    sa.visit(prefix + ".sa", f);
    lat_ffn2_n.visit(prefix + ".lat_ffn2_n", f);
    lat_ffn2.visit(prefix + ".lat_ffn2", f);
  }
};

template <class S>
struct EncoderLayer {
  Norm<S> sa_n;
  MhsaParams<S> sa;
  Norm<S> ffn_n;
  Ffn<S> ffn;

  static EncoderLayer init(int64_t dim, double ratio, Rng& rng) {
    EncoderLayer l;
    l.sa_n = Norm<S>::init(dim);
    l.sa = MhsaParams<S>::init(dim, rng);
    l.ffn_n = Norm<S>::init(dim);
    l.ffn = Ffn<S>::init(dim, ratio, rng);
    return l;
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) const {
    sa_n.visit(prefix + ".sa_n", f);
    sa.visit(prefix + ".sa", f);
    ffn_n.visit(prefix + ".ffn_n", f);
    ffn.visit(prefix + ".ffn", f);
  }
};

// ---------------------------------------------------------------------------
// Stochastic depth: per-sample, per-branch Bernoulli gates on residual
// deltas, rescaled by the keep probability. Only active when a training
// context hands in an rng.

template <class S>
struct DropPath {
  Rng rng;
  double rate = 0.0;

  Tensor<S> gate(const Tensor<S>& delta) {
    if (rate <= 0.0) return delta;
    const int64_t B = delta.dim(0);
    std::vector<S> coef(static_cast<size_t>(B));
    for (int64_t b = 0; b < B; ++b) {
      const bool keep = rng.uniform() >= rate;
      coef[static_cast<size_t>(b)] = keep ? S(1.0 / (1.0 - rate)) : S(0);
    }
    return scale_per_sample(delta, coef);
  }
};

namespace detail {

template <class S>
Tensor<S> gated(DropPath<S>* dp, const Tensor<S>& delta) {
  return dp ? dp->gate(delta) : delta;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// One ladder layer. Both CA deltas are computed from the pre-layer states;
// the latent self-attention then runs on the updated latent stream.

template <class S>
struct LayerResult {
  Tensor<S> latents;
  Tensor<S> tokens;
  BiDirResult<S> ca;
};

template <class S>
LayerResult<S> bixt_layer_forward(const BidirLayer<S>& L, const Tensor<S>& lat,
                                  const Tensor<S>& tok, int64_t heads,
                                  const TokenMask* mask = nullptr,
                                  DropPath<S>* dp = nullptr) {
  LayerResult<S> r;
  r.ca = bi_directional_cross_attention(apply(L.lat_ca_n, lat),
                                        apply(L.tok_ca_n, tok), L.ca, heads,
                                        mask);
  auto lat2 = add(lat, detail::gated(dp, r.ca.latent_delta));
  auto tok2 = add(tok, detail::gated(dp, r.ca.token_delta));
  tok2 = add(tok2,
             detail::gated(dp, apply(L.tok_ffn, apply(L.tok_ffn_n, tok2))));
  lat2 = add(lat2,
             detail::gated(dp, apply(L.lat_ffn, apply(L.lat_ffn_n, lat2))));
  lat2 = add(lat2, detail::gated(dp, multi_head_self_attention(
                                         apply(L.lat_sa_n, lat2), L.sa, heads)));
  lat2 = add(lat2,
             detail::gated(dp, apply(L.lat_ffn2, apply(L.lat_ffn2_n, lat2))));
  r.latents = lat2;
  r.tokens = tok2;
  return r;
}

template <class S>
LayerResult<S> sequential_layer_forward(const SequentialLayer<S>& L,
                                        const Tensor<S>& lat,
                                        const Tensor<S>& tok, int64_t heads,
                                        const TokenMask* mask = nullptr,
                                        DropPath<S>* dp = nullptr,
                                        Tensor<S>* sim_lat = nullptr,
                                        Tensor<S>* sim_tok = nullptr) {
  auto ca = sequential_cross_attention(apply(L.lat_ca_n, lat),
                                       apply(L.tok_ca_n, tok), L.ca, heads,
                                       mask);
  if (sim_lat) *sim_lat = ca.sim_lat;
  if (sim_tok) *sim_tok = ca.sim_tok;
  LayerResult<S> r;
  auto lat2 = add(lat, detail::gated(dp, ca.latent_delta));
  auto tok2 = add(tok, detail::gated(dp, ca.token_delta));
  tok2 = add(tok2,
             detail::gated(dp, apply(L.tok_ffn, apply(L.tok_ffn_n, tok2))));
  lat2 = add(lat2,
             detail::gated(dp, apply(L.lat_ffn, apply(L.lat_ffn_n, lat2))));
  lat2 = add(lat2, detail::gated(dp, multi_head_self_attention(
                                         apply(L.lat_sa_n, lat2), L.sa, heads)));
  lat2 = add(lat2,
             detail::gated(dp, apply(L.lat_ffn2, apply(L.lat_ffn2_n, lat2))));
  r.latents = lat2;
  r.tokens = tok2;
  return r;
}

// ---------------------------------------------------------------------------
// Canonical-order latent pooling. The head's mean must be bitwise invariant
// under latent reordering, so the summands are sorted by value before
// accumulation; the gradient (1/M per summand) does not depend on order.

template <class S>
Tensor<S> mean_latents(const Tensor<S>& x) {
  if (x.rank() != 3)
    throw ShapeError("mean_latents: expected [B, M, D], got " +
                     shape_str(x.shape()));
  const int64_t B = x.dim(0), M = x.dim(1), D = x.dim(2);
  auto out = Tensor<S>::zeros({B, D});
  std::vector<S> bucket(static_cast<size_t>(M));
  for (int64_t b = 0; b < B; ++b)
    for (int64_t d = 0; d < D; ++d) {
      for (int64_t m = 0; m < M; ++m)
        bucket[static_cast<size_t>(m)] = x.data()[(b * M + m) * D + d];
      std::sort(bucket.begin(), bucket.end());
      S acc = 0;
      for (S v : bucket) acc += v;
      out.data()[b * D + d] = acc / S(M);
    }
  check_finite("mean_latents", out.values());

  if (tracing<S>({&x})) {
    out = make_traced(std::move(out));
    auto xd = x.ptr();
    auto od = out.ptr();
    Tape<S>::active()->record(out, [=](Tape<S>& tp) {
      const std::vector<S>* og = tp.grad_of(od.get());
      if (!og) return;
      std::vector<S>& gx = tp.grad_buffer(xd);
      for (int64_t b = 0; b < B; ++b)
        for (int64_t m = 0; m < M; ++m)
          for (int64_t d = 0; d < D; ++d)
            gx[static_cast<size_t>((b * M + m) * D + d)] +=
                (*og)[static_cast<size_t>(b * D + d)] / S(M);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Attention records retained per layer when export mode is on.

template <class S>
struct AttnRecord {
  Tensor<S> sim;             // [B, H, M, N] pre-softmax, latent direction
  Tensor<S> latent_weights;  // [B, H, M, N] post-softmax rows
  Tensor<S> sim_tok;         // [B, H, N, M] pre-softmax; sequential only
};

template <class S>
struct ForwardResult {
  Tensor<S> latents;  // [B, M, D]; empty for the full self-attention stack
  Tensor<S> tokens;   // [B, N, D]
  Tensor<S> logits;   // [B, C], or [B, N, C] for the dense head
  std::vector<AttnRecord<S>> records;
};

struct ForwardOptions {
  const TokenMask* mask = nullptr;
  bool export_attention = false;
  // Training-only stochastic depth stream; leave null for eval.
  Rng* drop_rng = nullptr;
};

// ---------------------------------------------------------------------------

template <class S>
struct Model {
  ModelConfig cfg;

  Tensor<S> embed_table;  // id input: [vocab, D]
  Linear<S> patch_proj;   // patch input: [P*P*C, D]
  Linear<S> pos_proj;     // [32*axes, D]
  Tensor<S> latents;      // [M, D]; unused by full_self_attention

  std::vector<BidirLayer<S>> bidir_layers;
  std::vector<SequentialLayer<S>> seq_layers;
  IterativeParams<S> iter;
  std::vector<EncoderLayer<S>> enc_layers;

  Norm<S> final_norm;
  Linear<S> head;  // [D, num_classes]

  // Optional per-layer token refinement; identity when empty.
  std::function<Tensor<S>(const Tensor<S>&, int64_t)> token_hook;

  // name -> tensor, deduplicated (shared iterative CA sets appear once).
  std::vector<std::pair<std::string, Tensor<S>>> named;

  static Model init(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    Rng rng(seed, "model");
    const int64_t D = cfg.dim;

    if (cfg.input == InputKind::id)
      m.embed_table =
          Tensor<S>::trunc_normal({cfg.vocab, D}, rng, 0.02, true);
    else
      m.patch_proj = Linear<S>::init(cfg.patch.patch_values(), D, rng);
    m.pos_proj =
        Linear<S>::init(cfg.posenc_axes() * kPosDimsPerAxis, D, rng);

    const bool has_latents =
        cfg.attention_variant != AttentionVariant::full_self_attention;
    if (has_latents)
      m.latents = Tensor<S>::trunc_normal({cfg.latents, D}, rng, 0.02, true);

    switch (cfg.attention_variant) {
      case AttentionVariant::bidirectional:
        for (int64_t i = 0; i < cfg.layers; ++i)
          m.bidir_layers.push_back(BidirLayer<S>::init(D, cfg.mlp_ratio, rng));
        break;
      case AttentionVariant::sequential:
        for (int64_t i = 0; i < cfg.layers; ++i)
          m.seq_layers.push_back(
              SequentialLayer<S>::init(D, cfg.mlp_ratio, rng));
        break;
      case AttentionVariant::iterative:
        m.iter = IterativeParams<S>::init(cfg.layers, cfg.sa_count, D,
                                          cfg.mlp_ratio, cfg.share_scheme, rng);
        break;
      case AttentionVariant::full_self_attention:
        for (int64_t i = 0; i < cfg.layers; ++i)
          m.enc_layers.push_back(EncoderLayer<S>::init(D, cfg.mlp_ratio, rng));
        break;
    }

    m.final_norm = Norm<S>::init(D);
    if (cfg.head != HeadType::none) {
      m.head.w = Tensor<S>::zeros({D, cfg.num_classes}, true);
      m.head.b = Tensor<S>::zeros({cfg.num_classes}, true);
    }
    m.build_registry();
    return m;
  }

  void build_registry() {
    named.clear();
    std::unordered_set<const void*> seen;
    auto reg = [&](const std::string& name, const Tensor<S>& t) {
      if (t.size() == 0) return;
      if (!seen.insert(t.ptr().get()).second) return;
      named.emplace_back(name, t);
      named.back().second.set_name(name);
    };
    if (cfg.input == InputKind::id)
      reg("embed.table", embed_table);
    else
      patch_proj.visit("patch_proj", reg);
    pos_proj.visit("pos_proj", reg);
    if (latents.size() > 0) reg("latents", latents);
    for (size_t i = 0; i < bidir_layers.size(); ++i)
      bidir_layers[i].visit("layers." + std::to_string(i), reg);
    for (size_t i = 0; i < seq_layers.size(); ++i)
      seq_layers[i].visit("layers." + std::to_string(i), reg);
    for (size_t i = 0; i < iter.blocks.size(); ++i)
      iter.blocks[i].visit("layers." + std::to_string(i), reg);
    for (size_t i = 0; i < enc_layers.size(); ++i)
      enc_layers[i].visit("layers." + std::to_string(i), reg);
    final_norm.visit("final_norm", reg);
    if (cfg.head != HeadType::none) head.visit("head", reg);
  }

  const Tensor<S>* find(const std::string& name) const {
    for (const auto& [n, t] : named)
      if (n == name) return &t;
    return nullptr;
  }

  // -------------------------------------------------------------------------
  // Input adapters.

  // Positions are fixed per config, so eval-time forwards reuse the projected
  // encodings; the cache rechecks the projection bytes so any parameter
  // mutation (an optimizer step, a surgical test) invalidates it, and taped
  // forwards recompute so gradients reach the projection.
  Tensor<S> positional(int64_t n) {
    std::vector<double> coords;
    if (cfg.input == InputKind::id)
      coords = line_coords(n, cfg.max_len);
    else
      coords = grid_coords(cfg.patch.grid_h(), cfg.patch.grid_w());
    if (Tape<S>::active())
      return sinusoidal_posenc(coords, n, cfg.posenc_axes(), pos_proj);
    if (pos_cache_.n == n && pos_cache_.w == pos_proj.w.values() &&
        pos_cache_.b == pos_proj.b.values())
      return pos_cache_.value;
    pos_cache_.value =
        sinusoidal_posenc(coords, n, cfg.posenc_axes(), pos_proj);
    pos_cache_.n = n;
    pos_cache_.w = pos_proj.w.values();
    pos_cache_.b = pos_proj.b.values();
    return pos_cache_.value;
  }

  // [B, N, D] token states for a batch of id sequences, plus padding mask.
  IdTokens<S> tokenize_ids(const std::vector<std::vector<int64_t>>& ids,
                           int64_t pad_to = -1) {
    if (cfg.input != InputKind::id)
      throw ConfigError("model input is not id-based");
    int64_t longest = 1;
    for (const auto& s : ids)
      longest = std::max<int64_t>(longest, int64_t(s.size()));
    const int64_t T = pad_to < 0 ? longest : pad_to;
    IdTokens<S> toks;
    {
      // Content embedding without the library's posenc so the projected
      // encoding can come from the cache.
      const int64_t B = int64_t(ids.size());
      std::vector<int64_t> flat(static_cast<size_t>(B * T), 0);
      TokenMask mask{B, T,
                     std::vector<uint8_t>(static_cast<size_t>(B * T), 0)};
      for (int64_t b = 0; b < B; ++b) {
        const auto& s = ids[static_cast<size_t>(b)];
        if (int64_t(s.size()) > cfg.max_len)
          throw ConfigError("sequence of " + std::to_string(s.size()) +
                            " ids exceeds max_len " +
                            std::to_string(cfg.max_len));
        for (int64_t t = 0; t < int64_t(s.size()); ++t) {
          flat[static_cast<size_t>(b * T + t)] = s[static_cast<size_t>(t)];
          mask.valid[static_cast<size_t>(b * T + t)] = 1;
        }
      }
      toks.tokens = add(embedding(embed_table, flat, B, T), positional(T));
      toks.mask = std::move(mask);
    }
    return toks;
  }

  // [1, N, D] token states for a single image.
  Tensor<S> tokenize_image(const Tensor<S>& image) {
    if (cfg.input != InputKind::patch)
      throw ConfigError("model input is not patch-based");
    auto pe = patch_embed(image, cfg.patch, patch_proj);
    auto toks = add(pe.tokens, positional(pe.grid_h * pe.grid_w));
    return reshape(toks, {1, cfg.patch.tokens(), cfg.dim});
  }

  // -------------------------------------------------------------------------

  ForwardResult<S> forward_tokens(const Tensor<S>& tokens,
                                  const ForwardOptions& opts = {}) {
    if (tokens.rank() != 3 || tokens.dim(2) != cfg.dim)
      throw ShapeError("forward: tokens " + shape_str(tokens.shape()) +
                       " do not match dim " + std::to_string(cfg.dim));
    const int64_t B = tokens.dim(0);
    DropPath<S> dp{opts.drop_rng ? opts.drop_rng->stream("drop_path")
                                 : Rng(0, "unused"),
                   cfg.drop_path};
    DropPath<S>* dpp =
        (opts.drop_rng && cfg.drop_path > 0.0) ? &dp : nullptr;

    ForwardResult<S> r;
    Tensor<S> tok = tokens;
    const bool has_latents =
        cfg.attention_variant != AttentionVariant::full_self_attention;
    Tensor<S> lat;
    if (has_latents) lat = tile_batch(latents, B);

    switch (cfg.attention_variant) {
      case AttentionVariant::bidirectional: {
        for (size_t i = 0; i < bidir_layers.size(); ++i) {
          auto lr = bixt_layer_forward(bidir_layers[i], lat, tok, cfg.heads,
                                       opts.mask, dpp);
          lat = lr.latents;
          tok = lr.tokens;
          if (token_hook) tok = token_hook(tok, int64_t(i));
          if (opts.export_attention)
            r.records.push_back(
                {lr.ca.sim, lr.ca.latent_weights, Tensor<S>()});
        }
        break;
      }
      case AttentionVariant::sequential: {
        for (size_t i = 0; i < seq_layers.size(); ++i) {
          Tensor<S> sim_lat, sim_tok;
          auto lr = sequential_layer_forward(seq_layers[i], lat, tok,
                                             cfg.heads, opts.mask, dpp,
                                             &sim_lat, &sim_tok);
          lat = lr.latents;
          tok = lr.tokens;
          if (token_hook) tok = token_hook(tok, int64_t(i));
          if (opts.export_attention)
            r.records.push_back({sim_lat, softmax(sim_lat, -1), sim_tok});
        }
        break;
      }
      case AttentionVariant::iterative: {
        // Every block attends the unrefined input tokens.
        for (size_t i = 0; i < iter.blocks.size(); ++i) {
          CrossAttentionResult<S> ca;
          lat = iterative_cross_attention_block(
              lat, tok, iter.blocks[i], cfg.heads, cfg.sa_count,
              cfg.share_scheme, opts.mask, opts.export_attention ? &ca : nullptr);
          if (opts.export_attention)
            r.records.push_back({ca.sim, softmax(ca.sim, -1), Tensor<S>()});
        }
        break;
      }
      case AttentionVariant::full_self_attention: {
        for (auto& L : enc_layers) {
          tok = add(tok, detail::gated(dpp, multi_head_self_attention(
                                                apply(L.sa_n, tok), L.sa,
                                                cfg.heads, opts.mask)));
          tok = add(tok,
                    detail::gated(dpp, apply(L.ffn, apply(L.ffn_n, tok))));
        }
        break;
      }
    }

    r.latents = lat;
    r.tokens = tok;

    switch (cfg.head) {
      case HeadType::classify_mean_latent: {
        Tensor<S> pooled;
        if (has_latents)
          pooled = mean_latents(lat);
        else if (opts.mask)
          pooled = masked_mean_tokens(tok, *opts.mask);
        else
          pooled = mean_axis(tok, 1);
        r.logits = apply(head, apply(final_norm, pooled));
        break;
      }
      case HeadType::dense_token_linear:
        r.logits = apply(head, apply(final_norm, tok));
        break;
      case HeadType::none:
        break;
    }
    return r;
  }

  ForwardResult<S> forward_ids(const std::vector<std::vector<int64_t>>& ids,
                               ForwardOptions opts = {}, int64_t pad_to = -1) {
    auto toks = tokenize_ids(ids, pad_to);
    opts.mask = &toks.mask;
    return forward_tokens(toks.tokens, opts);
  }

  ForwardResult<S> forward_image(const Tensor<S>& image,
                                 const ForwardOptions& opts = {}) {
    return forward_tokens(tokenize_image(image), opts);
  }

  // Dense grid predictions for one sample, bilinearly upsampled.
  Tensor<S> upsample_dense(const Tensor<S>& dense, int64_t out_h,
                           int64_t out_w) {
    if (cfg.input != InputKind::patch)
      throw ConfigError("upsample_dense: token grid unknown for non-patch input");
    const int64_t gh = cfg.patch.grid_h(), gw = cfg.patch.grid_w();
    const int64_t C = dense.dim(-1);
    if (dense.size() != gh * gw * C)
      throw ShapeError("upsample_dense: " + shape_str(dense.shape()) +
                       " is not one " + std::to_string(gh) + "x" +
                       std::to_string(gw) + " grid of predictions");
    return bilinear_upsample(reshape(dense, {gh, gw, C}), out_h, out_w);
  }

 private:
  struct PosCache {
    int64_t n = -1;
    std::vector<S> w, b;
    Tensor<S> value;
  };
  PosCache pos_cache_;
};

// ---------------------------------------------------------------------------
// Stock configurations.

// Tiny ladder for 224x224 images, 16x16 patches.
inline ModelConfig bixt_ti16() {
  ModelConfig c;
  c.layers = 12;
  c.latents = 64;
  c.dim = 192;
  c.heads = 6;
  c.mlp_ratio = 4.0;
  c.attention_variant = AttentionVariant::bidirectional;
  c.head = HeadType::classify_mean_latent;
  c.num_classes = 1000;
  c.drop_path = 0.1;
  c.input = InputKind::patch;
  c.patch = PatchSpec{};
  return c;
}

// Long-sequence classification ladder for bracketed list expressions.
inline ModelConfig bixt_lra_listops() {
  ModelConfig c;
  c.layers = 2;
  c.latents = 32;
  c.dim = 64;
  c.heads = 2;
  c.mlp_ratio = 2.0;
  c.attention_variant = AttentionVariant::bidirectional;
  c.head = HeadType::classify_mean_latent;
  c.num_classes = 10;
  c.drop_path = 0.0;
  c.input = InputKind::id;
  c.vocab = 32;
  c.max_len = 2048;
  return c;
}

// Plain self-attention encoder with the same widths, as the quadratic
// reference point.
inline ModelConfig transformer_lra_listops() {
  ModelConfig c = bixt_lra_listops();
  c.attention_variant = AttentionVariant::full_self_attention;
  return c;
}

inline ModelConfig preset_config(const std::string& name) {
  if (name == "bixt_ti16") return bixt_ti16();
  if (name == "bixt_lra_listops") return bixt_lra_listops();
  if (name == "transformer_lra_listops") return transformer_lra_listops();
  throw ConfigError("unknown preset '" + name +
                    "'; expected bixt_ti16, bixt_lra_listops or "
                    "transformer_lra_listops");
}

// ---------------------------------------------------------------------------
// Parameter accounting over the deduplicated registry.

struct ParamGroup {
  std::string name;
  int64_t count = 0;
};

struct ParamBreakdown {
  std::vector<ParamGroup> groups;
  int64_t total = 0;
};

template <class S>
ParamBreakdown count_parameters(const Model<S>& m) {
  ParamBreakdown r;
  std::map<std::string, int64_t> acc;
  std::vector<std::string> order;
  for (const auto& [name, t] : m.named) {
    // Group by the layer for stack entries, else by the leading segment.
    std::string key;
    if (name.rfind("layers.", 0) == 0) {
      const size_t dot = name.find('.', 7);
      key = name.substr(0, dot);
    } else {
      key = name.substr(0, name.find('.'));
    }
    if (acc.find(key) == acc.end()) order.push_back(key);
    acc[key] += t.size();
    r.total += t.size();
  }
  for (const auto& k : order) r.groups.push_back({k, acc[k]});
  return r;
}

}  // namespace bixt
