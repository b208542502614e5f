#pragma once

// Input adapters: strided patch embedding, n-axis sinusoidal positional
// encodings with a trainable projection, a raw-coordinate point tokenizer,
// and an id-sequence tokenizer with padding masks.
//
// Positional encodings are computed from coordinates normalized to [0, 1]
// per axis; callers pass raw grid indices or point coordinates and the
// helpers here normalize against the fixed extent of the config (not the
// batch), so the encoding of a position never depends on what it is batched
// with.

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "bixt/attention.hpp"
#include "bixt/tensor.hpp"

namespace bixt {

constexpr int64_t kPosFreqPairs = 16;
constexpr int64_t kPosDimsPerAxis = 2 * kPosFreqPairs;  // sin/cos interleaved

// ---------------------------------------------------------------------------
// Patch grid geometry. Stride may undercut the patch size for overlap; the
// grid is ceil(extent / stride) per axis with symmetric zero padding, so a
// stride of half the patch size quadruples the token count.

struct PatchSpec {
  int64_t patch = 16;
  int64_t stride = 16;
  int64_t height = 224;
  int64_t width = 224;
  int64_t channels = 3;

  void validate() const {
    if (stride < 1 || patch < stride)
      throw ConfigError("patch spec: need patch >= stride >= 1, got patch " +
                        std::to_string(patch) + " stride " +
                        std::to_string(stride));
    if (height < 1 || width < 1 || channels < 1)
      throw ConfigError("patch spec: bad image extents " +
                        std::to_string(height) + "x" + std::to_string(width) +
                        "x" + std::to_string(channels));
    if (patch > height || patch > width)
      throw ConfigError("patch spec: patch " + std::to_string(patch) +
                        " exceeds image " + std::to_string(height) + "x" +
                        std::to_string(width));
  }

  int64_t grid_h() const { return (height + stride - 1) / stride; }
  int64_t grid_w() const { return (width + stride - 1) / stride; }
  int64_t tokens() const { return grid_h() * grid_w(); }
  int64_t patch_values() const { return patch * patch * channels; }

  // Total zero padding per axis; split evenly with the extra pixel trailing.
  int64_t pad_h() const {
    return std::max<int64_t>(0, (grid_h() - 1) * stride + patch - height);
  }
  int64_t pad_w() const {
    return std::max<int64_t>(0, (grid_w() - 1) * stride + patch - width);
  }
};

// ---------------------------------------------------------------------------
// Sinusoidal encodings. 16 sin/cos pairs per axis over a geometric frequency
// ladder, interleaved sin first; 32 values per axis before projection.

// coords: n * axes values, row-major, each already normalized to [0, 1]
// (or [-1, 1] for signed point clouds; only boundedness matters).
template <class S>
Tensor<S> sincos_encoding(const std::vector<double>& coords, int64_t n,
                          int64_t axes) {
  if (axes < 1 || n < 0 || int64_t(coords.size()) != n * axes)
    throw ShapeError("sincos_encoding: " + std::to_string(coords.size()) +
                     " coords for " + std::to_string(n) + "x" +
                     std::to_string(axes));
  auto out = Tensor<S>::zeros({n, axes * kPosDimsPerAxis});
  const double two_pi = 6.28318530717958647692;
  for (int64_t i = 0; i < n; ++i)
    for (int64_t a = 0; a < axes; ++a) {
      const double c = coords[static_cast<size_t>(i * axes + a)];
      S* row = out.data() + i * axes * kPosDimsPerAxis + a * kPosDimsPerAxis;
      for (int64_t k = 0; k < kPosFreqPairs; ++k) {
        const double div =
            std::pow(10000.0, double(k) / double(kPosFreqPairs));
        row[2 * k] = S(std::sin(two_pi * c / div));
        row[2 * k + 1] = S(std::cos(two_pi * c / div));
      }
    }
  return out;
}

// Row-major (y, x) grid coordinates normalized to [0, 1] per axis.
inline std::vector<double> grid_coords(int64_t grid_h, int64_t grid_w) {
  std::vector<double> c;
  c.reserve(static_cast<size_t>(grid_h * grid_w * 2));
  for (int64_t y = 0; y < grid_h; ++y)
    for (int64_t x = 0; x < grid_w; ++x) {
      c.push_back(grid_h > 1 ? double(y) / double(grid_h - 1) : 0.0);
      c.push_back(grid_w > 1 ? double(x) / double(grid_w - 1) : 0.0);
    }
  return c;
}

// 1-D positions 0..n-1 normalized against a fixed maximum length, so the
// encoding of position p is independent of how far a batch is padded.
inline std::vector<double> line_coords(int64_t n, int64_t max_len) {
  std::vector<double> c;
  c.reserve(static_cast<size_t>(n));
  for (int64_t p = 0; p < n; ++p)
    c.push_back(max_len > 1 ? double(p) / double(max_len - 1) : 0.0);
  return c;
}

template <class S>
Tensor<S> sinusoidal_posenc(const std::vector<double>& coords, int64_t n,
                            int64_t axes, const Linear<S>& proj) {
  auto enc = sincos_encoding<S>(coords, n, axes);
  if (proj.w.dim(0) != axes * kPosDimsPerAxis)
    throw ShapeError("sinusoidal_posenc: projection expects " +
                     std::to_string(proj.w.dim(0)) + " dims, encoding has " +
                     std::to_string(axes * kPosDimsPerAxis));
  return apply(proj, enc);
}

// ---------------------------------------------------------------------------
// Patch embedding: im2col over the (zero padded) grid, one matmul, raw
// tokens out. Positional encodings are added by the caller so identity
// projections stay inspectable and encodings stay cacheable.

template <class S>
struct PatchEmbedResult {
  Tensor<S> tokens;             // [N, D]
  std::vector<double> coords;   // N*2 normalized grid coords for the posenc
  int64_t grid_h = 0, grid_w = 0;
};

template <class S>
PatchEmbedResult<S> patch_embed(const Tensor<S>& image, const PatchSpec& spec,
                                const Linear<S>& proj) {
  spec.validate();
  if (image.rank() != 3 || image.dim(0) != spec.height ||
      image.dim(1) != spec.width || image.dim(2) != spec.channels)
    throw ShapeError("patch_embed: image " + shape_str(image.shape()) +
                     " does not match spec " + std::to_string(spec.height) +
                     "x" + std::to_string(spec.width) + "x" +
                     std::to_string(spec.channels));
  if (proj.w.dim(0) != spec.patch_values())
    throw ShapeError("patch_embed: projection expects " +
                     std::to_string(proj.w.dim(0)) + " inputs, patches have " +
                     std::to_string(spec.patch_values()));

  const int64_t gh = spec.grid_h(), gw = spec.grid_w();
  const int64_t P = spec.patch, C = spec.channels;
  const int64_t top = spec.pad_h() / 2, left = spec.pad_w() / 2;

  auto cols = Tensor<S>::zeros({gh * gw, spec.patch_values()});
  for (int64_t gy = 0; gy < gh; ++gy)
    for (int64_t gx = 0; gx < gw; ++gx) {
      S* row = cols.data() + (gy * gw + gx) * spec.patch_values();
      const int64_t y0 = gy * spec.stride - top;
      const int64_t x0 = gx * spec.stride - left;
      for (int64_t py = 0; py < P; ++py) {
        const int64_t y = y0 + py;
        if (y < 0 || y >= spec.height) continue;  // stays zero
        for (int64_t px = 0; px < P; ++px) {
          const int64_t x = x0 + px;
          if (x < 0 || x >= spec.width) continue;
          for (int64_t ch = 0; ch < C; ++ch)
            row[(py * P + px) * C + ch] =
                image.data()[(y * spec.width + x) * C + ch];
        }
      }
    }

  PatchEmbedResult<S> r;
  r.tokens = apply(proj, cols);
  r.coords = grid_coords(gh, gw);
  r.grid_h = gh;
  r.grid_w = gw;
  return r;
}

// ---------------------------------------------------------------------------
// Point tokenizer: tokens are the projected encodings of the raw 3- or
// 6-channel coordinates, no separate content embedding.

template <class S>
Tensor<S> point_tokenizer(const Tensor<S>& points, const Linear<S>& proj) {
  if (points.rank() != 2 || (points.dim(1) != 3 && points.dim(1) != 6))
    throw ShapeError("point_tokenizer: expected [N, 3] or [N, 6] points, got " +
                     shape_str(points.shape()));
  const int64_t n = points.dim(0), axes = points.dim(1);
  std::vector<double> coords(points.values().begin(), points.values().end());
  return sinusoidal_posenc(coords, n, axes, proj);
}

// ---------------------------------------------------------------------------
// Id-sequence tokenizer: embedding lookup plus 1-D positional encoding,
// padded to a common length with the padding flagged invalid.

template <class S>
struct IdTokens {
  Tensor<S> tokens;  // [B, T, D]
  TokenMask mask;
};

template <class S>
IdTokens<S> id_tokenizer(const std::vector<std::vector<int64_t>>& ids,
                         const Tensor<S>& table, int64_t max_len,
                         const Linear<S>& pos_proj, int64_t pad_to = -1) {
  if (table.rank() != 2)
    throw ShapeError("id_tokenizer: embedding table " +
                     shape_str(table.shape()));
  const int64_t B = int64_t(ids.size());
  if (B < 1) throw ShapeError("id_tokenizer: empty batch");
  const int64_t V = table.dim(0);
  int64_t longest = 1;
  for (const auto& s : ids) {
    if (int64_t(s.size()) > max_len)
      throw ConfigError("id_tokenizer: sequence of " +
                        std::to_string(s.size()) + " ids exceeds max_len " +
                        std::to_string(max_len));
    for (int64_t id : s)
      if (id < 0 || id >= V)
        throw ConfigError("id_tokenizer: id " + std::to_string(id) +
                          " outside vocab of " + std::to_string(V));
    longest = std::max<int64_t>(longest, int64_t(s.size()));
  }
  const int64_t T = pad_to < 0 ? longest : pad_to;
  if (T < longest || T > max_len)
    throw ConfigError("id_tokenizer: pad_to " + std::to_string(T) +
                      " outside [" + std::to_string(longest) + ", " +
                      std::to_string(max_len) + "]");

  std::vector<int64_t> flat(static_cast<size_t>(B * T), 0);
  TokenMask mask{B, T, std::vector<uint8_t>(static_cast<size_t>(B * T), 0)};
  for (int64_t b = 0; b < B; ++b)
    for (int64_t t = 0; t < int64_t(ids[size_t(b)].size()); ++t) {
      flat[static_cast<size_t>(b * T + t)] = ids[size_t(b)][size_t(t)];
      mask.valid[static_cast<size_t>(b * T + t)] = 1;
    }

  auto content = embedding(table, flat, B, T);
  auto pos = sinusoidal_posenc(line_coords(T, max_len), T, 1, pos_proj);
  IdTokens<S> r;
  r.tokens = add(content, pos);  // pos broadcasts over the batch
  r.mask = std::move(mask);
  return r;
}

}  // namespace bixt
