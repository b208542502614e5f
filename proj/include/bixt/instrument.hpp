#pragma once

// Analytic cost accounting (MACs, parameters, activation footprints), the
// attention degrees-of-freedom calculator, scaling tables over input shapes,
// attention-symmetry measurement and attention-map export.
//
// Conventions, fixed here and relied on by the reports:
//  - One multiply-accumulate = one FLOP. Only matmuls count; softmax, norms
//    and activations do not.
//  - `linear` holds weight matmuls (projections, FFNs, patch embed, head),
//    `attention` holds similarity and aggregation matmuls. Embedding lookups
//    are gathers and cost nothing.
//  - The positional encoding projection is position-fixed and cached after
//    the first forward, so it amortizes to zero.
//  - Activations count the per-sample values materialized on the forward
//    path (stream tensors, FFN hiddens, post-softmax maps), no gradients.

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "bixt/model.hpp"

namespace bixt {

struct LayerCost {
  int64_t linear = 0;
  int64_t attention = 0;
  int64_t activations = 0;
};

struct CostReport {
  int64_t linear = 0;
  int64_t attention = 0;
  int64_t params = 0;
  int64_t activations = 0;
  int64_t flops() const { return linear + attention; }

  LayerCost stem;                // tokenizer projection and head
  std::vector<LayerCost> layers; // one entry per layer / block
};

namespace detail {

inline int64_t ffn_hidden(int64_t d, double ratio) {
  return std::max<int64_t>(1, llround(double(d) * ratio));
}

inline int64_t linear_param_count(int64_t in, int64_t out) {
  return in * out + out;
}

}  // namespace detail

// Exact parameter count from the config alone; must agree with the built
// model's registry for every valid config.
inline int64_t analytic_params(const ModelConfig& cfg) {
  const int64_t D = cfg.dim;
  const int64_t h = detail::ffn_hidden(D, cfg.mlp_ratio);
  const int64_t proj = detail::linear_param_count(D, D);
  const int64_t ffn =
      detail::linear_param_count(D, h) + detail::linear_param_count(h, D);
  const int64_t norm = 2 * D;

  int64_t stack = 0;
  switch (cfg.attention_variant) {
    case AttentionVariant::bidirectional:
      stack = cfg.layers * (9 * proj + 3 * ffn + 6 * norm);
      break;
    case AttentionVariant::sequential:
      stack = cfg.layers * (12 * proj + 3 * ffn + 6 * norm);
      break;
    case AttentionVariant::iterative: {
      const int64_t ca_unit = 4 * proj + ffn + 3 * norm;
      const int64_t sa_unit = 4 * proj + ffn + 2 * norm;
      int64_t ca_copies = cfg.layers;
      if (cfg.share_scheme == ShareScheme::all)
        ca_copies = 1;
      else if (cfg.share_scheme == ShareScheme::all_but_first)
        ca_copies = std::min<int64_t>(cfg.layers, 2);
      stack = ca_copies * ca_unit + cfg.layers * cfg.sa_count * sa_unit;
      break;
    }
    case AttentionVariant::full_self_attention:
      stack = cfg.layers * (4 * proj + ffn + 2 * norm);
      break;
  }

  int64_t extras = 0;
  if (cfg.input == InputKind::id)
    extras += cfg.vocab * D;
  else
    extras += detail::linear_param_count(cfg.patch.patch_values(), D);
  extras +=
      detail::linear_param_count(cfg.posenc_axes() * kPosDimsPerAxis, D);
  if (cfg.attention_variant != AttentionVariant::full_self_attention)
    extras += cfg.latents * D;
  extras += norm;  // final norm
  if (cfg.head != HeadType::none)
    extras += detail::linear_param_count(D, cfg.num_classes);
  return stack + extras;
}

// MAC and activation counts for one forward pass over n_tokens tokens.
// Accepts layers = 0 (tokenizer and head only), which no buildable model
// allows, so the light checks here stand in for ModelConfig::validate.
inline CostReport flop_count(const ModelConfig& cfg, int64_t n_tokens) {
  if (cfg.layers < 0 || cfg.latents < 1 || cfg.dim < 1 || cfg.heads < 1 ||
      cfg.dim % cfg.heads != 0)
    throw ConfigError("flop_count: invalid dims in config");
  if (n_tokens < 1)
    throw ConfigError("flop_count: n_tokens " + std::to_string(n_tokens) +
                      " < 1");
  const int64_t N = n_tokens, M = cfg.latents, D = cfg.dim, H = cfg.heads;
  const int64_t h = detail::ffn_hidden(D, cfg.mlp_ratio);
  const int64_t D2 = D * D, Dh = D * h;

  CostReport r;
  r.params = analytic_params(cfg);

  LayerCost unit;
  switch (cfg.attention_variant) {
    case AttentionVariant::bidirectional:
      // Linear: token ref/val + token FFN; latent ref/val/out + two FFNs +
      // self-attention. Attention: one similarity, two aggregations, latent
      // self-attention pair.
      unit.linear = N * (2 * D2 + 2 * Dh) + M * (7 * D2 + 4 * Dh);
      unit.attention = 3 * M * N * D + 2 * M * M * D;
      // Tokens: norm, ref, val, delta, FFN norm/out (6 widths) + hidden.
      // Latents: CA 5, FFN1 3, MHSA 6, FFN2 3 widths (h separate), plus the
      // two post-softmax cross maps and the self-attention pair.
      unit.activations = N * (6 * D + h) + 2 * M * N * H +
                         M * (15 * D + 2 * h) + 2 * M * M * H;
      break;
    case AttentionVariant::sequential:
      unit.linear = N * (4 * D2 + 2 * Dh) + M * (8 * D2 + 4 * Dh);
      unit.attention = 4 * M * N * D + 2 * M * M * D;
      unit.activations = N * (8 * D + h) + 2 * M * N * H +
                         M * (17 * D + 2 * h) + 2 * M * M * H;
      break;
    case AttentionVariant::iterative:
      if (cfg.sa_count < 0) throw ConfigError("flop_count: negative sa_count");
      unit.linear = N * 2 * D2 + M * (2 * D2 + 2 * Dh) +
                    cfg.sa_count * M * (4 * D2 + 2 * Dh);
      unit.attention =
          2 * M * N * D + cfg.sa_count * 2 * M * M * D;
      unit.activations = N * 3 * D + M * N * H + M * (6 * D + h) +
                         cfg.sa_count * (M * (8 * D + h) + 2 * M * M * H);
      break;
    case AttentionVariant::full_self_attention:
      unit.linear = N * (4 * D2 + 2 * Dh);
      unit.attention = 2 * N * N * D;
      unit.activations = N * (8 * D + h) + 2 * N * N * H;
      break;
  }
  r.layers.assign(size_t(cfg.layers), unit);

  if (cfg.input == InputKind::patch) {
    r.stem.linear += N * cfg.patch.patch_values() * D;
    r.stem.activations += N * 2 * D;  // projected patch + added encoding
  } else {
    r.stem.activations += N * 2 * D;  // embedded id + added encoding
  }
  switch (cfg.head) {
    case HeadType::classify_mean_latent:
      r.stem.linear += D * cfg.num_classes;
      r.stem.activations += D + cfg.num_classes;
      break;
    case HeadType::dense_token_linear:
      r.stem.linear += N * D * cfg.num_classes;
      r.stem.activations += N * (D + cfg.num_classes);
      break;
    case HeadType::none:
      break;
  }

  r.linear = r.stem.linear;
  r.attention = r.stem.attention;
  r.activations = r.stem.activations;
  for (const auto& l : r.layers) {
    r.linear += l.linear;
    r.attention += l.attention;
    r.activations += l.activations;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Attention degrees of freedom: an M x N stochastic exchange spends MN-1 free
// values; sharing one buffer between directions keeps (M-1)(N-1) of them
// common, leaving M+N-2 direction-specific ones.

struct DofReport {
  int64_t total = 0;
  int64_t shared = 0;
  int64_t unique = 0;
};

inline DofReport dof_calc(int64_t m, int64_t n) {
  if (m < 1 || n < 1)
    throw ConfigError("dof_calc: need M, N >= 1, got " + std::to_string(m) +
                      ", " + std::to_string(n));
  DofReport r;
  r.total = m * n - 1;
  r.shared = (m - 1) * (n - 1);
  r.unique = m + n - 2;
  return r;
}

// ---------------------------------------------------------------------------
// Scaling tables. A shape is either a plain token count ("2048") or an
// image side with an embedding stride ("384/p8": 384 x 384 input, patches
// placed every 8 pixels, patch size from the config).

struct InputShape {
  std::string label;
  int64_t image = 0;   // 0 for raw token counts
  int64_t stride = 0;
  int64_t n_tokens = 0;
};

inline InputShape parse_input_shape(const std::string& s,
                                    const PatchSpec& patch) {
  InputShape r;
  r.label = s;
  const size_t slash = s.find('/');
  try {
    if (slash == std::string::npos) {
      size_t used = 0;
      r.n_tokens = std::stoll(s, &used);
      if (used != s.size() || r.n_tokens < 1) throw std::invalid_argument(s);
      return r;
    }
    if (slash + 2 > s.size() || s[slash + 1] != 'p')
      throw std::invalid_argument(s);
    size_t used = 0;
    r.image = std::stoll(s.substr(0, slash), &used);
    if (used != slash) throw std::invalid_argument(s);
    r.stride = std::stoll(s.substr(slash + 2), &used);
    if (slash + 2 + used != s.size()) throw std::invalid_argument(s);
  } catch (const std::exception&) {
    throw ConfigError("cannot parse shape '" + s +
                      "'; expected a token count like '2048' or side/stride "
                      "like '384/p8'");
  }
  if (r.image < 1 || r.stride < 1)
    throw ConfigError("shape '" + s + "' needs positive side and stride");
  PatchSpec p = patch;
  p.height = p.width = r.image;
  p.stride = r.stride;
  p.validate();
  r.n_tokens = p.tokens();
  return r;
}

struct ScalingRow {
  std::string label;
  int64_t n_tokens = 0;
  int64_t flops = 0;
  int64_t activations = 0;
  double flop_ratio = 0;
  double act_ratio = 0;
};

// First shape is the baseline; ratios are taken against it.
inline std::vector<ScalingRow> scaling_table(
    const ModelConfig& cfg, const std::vector<std::string>& shapes) {
  if (shapes.empty())
    throw ConfigError("scaling_table: need at least the baseline shape");
  std::vector<ScalingRow> rows;
  for (const auto& s : shapes) {
    const InputShape shape = parse_input_shape(s, cfg.patch);
    ModelConfig c = cfg;
    if (shape.image > 0) {
      if (c.input != InputKind::patch)
        throw ConfigError("scaling_table: image shape '" + s +
                          "' for a non-patch config");
      c.patch.height = c.patch.width = shape.image;
      c.patch.stride = shape.stride;
    }
    const CostReport cost = flop_count(c, shape.n_tokens);
    ScalingRow row;
    row.label = shape.label;
    row.n_tokens = shape.n_tokens;
    row.flops = cost.flops();
    row.activations = cost.activations;
    rows.push_back(row);
  }
  for (auto& row : rows) {
    row.flop_ratio = double(row.flops) / double(rows.front().flops);
    row.act_ratio =
        double(row.activations) / double(rows.front().activations);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Attention symmetry. For a sequential model the two directions own separate
// similarity buffers; the score is the per-head Pearson correlation between
// the latent-side map and the transposed token-side map, computed on the
// pre-softmax similarities. Bi-directional models share one buffer, so their
// correlation is 1 by construction and only flagged.

struct HeadCorrelation {
  int64_t layer = 0;
  int64_t head = 0;
  double r = 0;
};

struct SymmetryReport {
  std::vector<HeadCorrelation> entries;
  double mean_r = 0;
  double min_r = 0;
  double max_r = 0;
  bool trivial = false;  // shared-buffer model: 1.0 by construction
};

namespace detail {

inline void finish_symmetry(SymmetryReport& r) {
  if (r.entries.empty()) return;
  double sum = 0;
  r.min_r = r.entries.front().r;
  r.max_r = r.entries.front().r;
  for (const auto& e : r.entries) {
    sum += e.r;
    r.min_r = std::min(r.min_r, e.r);
    r.max_r = std::max(r.max_r, e.r);
  }
  r.mean_r = sum / double(r.entries.size());
}

}  // namespace detail

template <class S>
SymmetryReport symmetry_score(Model<S>& model, const Tensor<S>& tokens,
                              const TokenMask* mask = nullptr) {
  const auto variant = model.cfg.attention_variant;
  if (variant != AttentionVariant::sequential &&
      variant != AttentionVariant::bidirectional)
    throw ConfigError(
        "symmetry_score: model exposes no two-way similarity pair");

  ForwardOptions opts;
  opts.mask = mask;
  opts.export_attention = true;
  auto fwd = model.forward_tokens(tokens, opts);

  SymmetryReport report;
  const int64_t H = model.cfg.heads;
  if (variant == AttentionVariant::bidirectional) {
    report.trivial = true;
    for (int64_t l = 0; l < int64_t(fwd.records.size()); ++l)
      for (int64_t head = 0; head < H; ++head)
        report.entries.push_back({l, head, 1.0});
    detail::finish_symmetry(report);
    return report;
  }

  for (int64_t l = 0; l < int64_t(fwd.records.size()); ++l) {
    const auto& rec = fwd.records[size_t(l)];
    const int64_t B = rec.sim.dim(0), M = rec.sim.dim(2), N = rec.sim.dim(3);
    for (int64_t head = 0; head < H; ++head) {
      double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
      int64_t count = 0;
      for (int64_t b = 0; b < B; ++b)
        for (int64_t m = 0; m < M; ++m)
          for (int64_t n = 0; n < N; ++n) {
            if (mask && !mask->at(b, n)) continue;
            const double x =
                double(rec.sim.data()[((b * H + head) * M + m) * N + n]);
            const double y =
                double(rec.sim_tok.data()[((b * H + head) * N + n) * M + m]);
            sx += x;
            sy += y;
            sxx += x * x;
            syy += y * y;
            sxy += x * y;
            ++count;
          }
      const double cx = sxx - sx * sx / double(count);
      const double cy = syy - sy * sy / double(count);
      const double cxy = sxy - sx * sy / double(count);
      const double denom = std::sqrt(cx * cy);
      report.entries.push_back(
          {l, head, denom > 0 ? cxy / denom : 0.0});
    }
  }
  detail::finish_symmetry(report);
  return report;
}

// ---------------------------------------------------------------------------
// Attention export. One CSV per (layer, head) with the M x N post-softmax
// latent-side rows of batch sample 0; with grid dimensions, additionally one
// P5 PGM per (layer, head, latent) rendering that latent's row over the
// token grid, normalized to its own maximum.

struct ExportPaths {
  std::vector<std::string> csv;
  std::vector<std::string> pgm;
};

namespace detail {

inline std::string two_digits(int64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%02" PRId64, v);
  return buf;
}

}  // namespace detail

template <class S>
ExportPaths export_attention(const std::vector<AttnRecord<S>>& records,
                             const std::string& dir, int64_t grid_h = 0,
                             int64_t grid_w = 0) {
  ExportPaths out;
  for (int64_t l = 0; l < int64_t(records.size()); ++l) {
    const auto& w = records[size_t(l)].latent_weights;
    if (w.rank() != 4)
      throw ConfigError("export_attention: record " + std::to_string(l) +
                        " holds no [B, H, M, N] weights; was export mode on?");
    const int64_t H = w.dim(1), M = w.dim(2), N = w.dim(3);
    if (grid_h > 0 && grid_h * grid_w != N)
      throw ConfigError("export_attention: grid " + std::to_string(grid_h) +
                        "x" + std::to_string(grid_w) + " does not tile " +
                        std::to_string(N) + " tokens");
    for (int64_t head = 0; head < H; ++head) {
      const S* rows = w.data() + (0 * H + head) * M * N;
      const std::string base =
          dir + "/layer" + detail::two_digits(l) + "_head" +
          detail::two_digits(head);
      {
        std::ofstream f(base + ".csv", std::ios::binary | std::ios::trunc);
        if (!f)
          throw IoError("cannot open '" + base + ".csv' for writing");
        char buf[64];
        for (int64_t m = 0; m < M; ++m) {
          for (int64_t n = 0; n < N; ++n) {
            std::snprintf(buf, sizeof(buf), "%.9g", double(rows[m * N + n]));
            f << buf << (n + 1 < N ? "," : "\n");
          }
        }
        f.flush();
        if (!f) throw IoError("short write to '" + base + ".csv'");
        out.csv.push_back(base + ".csv");
      }
      if (grid_h > 0) {
        for (int64_t m = 0; m < M; ++m) {
          const std::string path =
              base + "_latent" + detail::two_digits(m) + ".pgm";
          std::ofstream f(path, std::ios::binary | std::ios::trunc);
          if (!f) throw IoError("cannot open '" + path + "' for writing");
          f << "P5\n" << grid_w << " " << grid_h << "\n255\n";
          S vmax = 0;
          for (int64_t n = 0; n < N; ++n)
            vmax = std::max(vmax, rows[m * N + n]);
          std::vector<unsigned char> bytes(size_t(N), 0);
          if (vmax > 0)
            for (int64_t n = 0; n < N; ++n)
              bytes[size_t(n)] = static_cast<unsigned char>(
                  llround(255.0 * double(rows[m * N + n]) / double(vmax)));
          f.write(reinterpret_cast<const char*>(bytes.data()),
                  std::streamsize(bytes.size()));
          f.flush();
          if (!f) throw IoError("short write to '" + path + "'");
          out.pgm.push_back(path);
        }
      }
    }
  }
  return out;
}

}  // namespace bixt
