#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <set>
#include <vector>

#include "bixt/model.hpp"

using namespace bixt;

namespace {

// Closed-form parameter counts, written out independently of the registry.
int64_t linear_params(int64_t in, int64_t out) { return in * out + out; }

int64_t ffn_params(int64_t d, double ratio) {
  const int64_t h = std::max<int64_t>(1, llround(double(d) * ratio));
  return linear_params(d, h) + linear_params(h, d);
}

// One ladder layer: five CA projections, three FFNs, latent MHSA, six norms.
int64_t ladder_layer_params(int64_t d, double ratio) {
  return 5 * linear_params(d, d) + 3 * ffn_params(d, ratio) +
         4 * linear_params(d, d) + 6 * 2 * d;
}

// One latent-bottleneck CA unit / SA unit.
int64_t iter_ca_params(int64_t d, double ratio) {
  return 4 * linear_params(d, d) + ffn_params(d, ratio) + 3 * 2 * d;
}
int64_t iter_sa_params(int64_t d, double ratio) {
  return 4 * linear_params(d, d) + ffn_params(d, ratio) + 2 * 2 * d;
}

int64_t patch_extras(const ModelConfig& c) {
  return linear_params(c.patch.patch_values(), c.dim) +   // patch proj
         linear_params(2 * kPosDimsPerAxis, c.dim) +      // posenc proj
         c.latents * c.dim +                              // latent embeddings
         2 * c.dim +                                      // final norm
         linear_params(c.dim, c.num_classes);             // head
}

template <class S>
void fill_param(Tensor<S>& t, Rng& rng, double stddev) {
  for (auto& v : t.values()) v = S(rng.trunc_normal(stddev));
}

template <class S>
double max_rel_diff(const Tensor<S>& a, const Tensor<S>& b) {
  REQUIRE(a.shape() == b.shape());
  double worst = 0;
  for (int64_t i = 0; i < a.size(); ++i) {
    const double x = double(a.data()[i]), y = double(b.data()[i]);
    worst = std::max(worst,
                     std::abs(x - y) / std::max({std::abs(x), std::abs(y), 1e-9}));
  }
  return worst;
}

}  // namespace

TEST_CASE("published configurations land on the published parameter counts") {
  SUBCASE("tiny image ladder") {
    auto cfg = bixt_ti16();
    auto m = Model<float>::init(cfg, 1);
    auto pb = count_parameters(m);
    const int64_t expect = 12 * ladder_layer_params(192, 4.0) + patch_extras(cfg);
    CHECK(pb.total == expect);
    CHECK(pb.total == 15046888);
    CHECK(std::abs(double(pb.total) / 15.12e6 - 1.0) < 0.05);
  }
  SUBCASE("one extra layer at equal budget") {
    auto cfg = bixt_ti16();
    cfg.layers = 13;
    auto m = Model<float>::init(cfg, 1);
    const int64_t total = count_parameters(m).total;
    CHECK(total == 16270312);
    CHECK(std::abs(double(total) / 16.38e6 - 1.0) < 0.05);
  }
  SUBCASE("shared latent-bottleneck stack") {
    auto cfg = bixt_ti16();
    cfg.attention_variant = AttentionVariant::iterative;
    cfg.layers = 8;
    cfg.sa_count = 6;
    cfg.share_scheme = ShareScheme::all;
    cfg.drop_path = 0.0;
    auto m = Model<float>::init(cfg, 1);
    const int64_t total = count_parameters(m).total;
    const int64_t kernel =
        iter_ca_params(192, 4.0) + 48 * iter_sa_params(192, 4.0);
    CHECK(total == kernel + patch_extras(cfg));
    CHECK(total == 22164520);
    CHECK(std::abs(double(total) / 22.16e6 - 1.0) < 0.05);
  }
  SUBCASE("sequence presets") {
    auto m = Model<float>::init(bixt_lra_listops(), 1);
    CHECK(count_parameters(m).total == 182858);
    auto t = Model<float>::init(transformer_lra_listops(), 1);
    CHECK(count_parameters(t).total == 71882);
    CHECK(t.latents.size() == 0);
  }
}

TEST_CASE("parameter groups are disjoint and sum to the total") {
  auto m = Model<float>::init(bixt_ti16(), 3);
  auto pb = count_parameters(m);
  int64_t sum = 0;
  std::set<std::string> names;
  for (const auto& g : pb.groups) {
    sum += g.count;
    CHECK(names.insert(g.name).second);
  }
  CHECK(sum == pb.total);
  CHECK(names.count("patch_proj") == 1);
  CHECK(names.count("pos_proj") == 1);
  CHECK(names.count("latents") == 1);
  CHECK(names.count("layers.0") == 1);
  CHECK(names.count("layers.11") == 1);
  CHECK(names.count("final_norm") == 1);
  CHECK(names.count("head") == 1);
  for (const auto& g : pb.groups)
    if (g.name.rfind("layers.", 0) == 0)
      CHECK(g.count == ladder_layer_params(192, 4.0));
  CHECK(m.find("layers.0.ca.lat_ref.w") != nullptr);
  CHECK(m.find("layers.0.ca.lat_out.b") != nullptr);
  CHECK(m.find("no.such.param") == nullptr);
}

TEST_CASE("shared iterative blocks are counted once in the registry") {
  ModelConfig cfg;
  cfg.layers = 3;
  cfg.latents = 2;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.mlp_ratio = 2.0;
  cfg.attention_variant = AttentionVariant::iterative;
  cfg.sa_count = 1;
  cfg.num_classes = 3;
  cfg.vocab = 11;
  cfg.max_len = 7;

  cfg.share_scheme = ShareScheme::none;
  const int64_t none_total = count_parameters(Model<float>::init(cfg, 5)).total;
  cfg.share_scheme = ShareScheme::all;
  auto shared = Model<float>::init(cfg, 5);
  const int64_t all_total = count_parameters(shared).total;
  cfg.share_scheme = ShareScheme::all_but_first;
  const int64_t abf_total = count_parameters(Model<float>::init(cfg, 5)).total;

  const int64_t ca = iter_ca_params(8, 2.0);
  CHECK(none_total - all_total == 2 * ca);
  CHECK(abf_total - all_total == ca);

  // Blocks past the first contribute only their self-attention units.
  auto pb = count_parameters(shared);
  for (const auto& g : pb.groups) {
    if (g.name == "layers.0") CHECK(g.count == ca + iter_sa_params(8, 2.0));
    if (g.name == "layers.1") CHECK(g.count == iter_sa_params(8, 2.0));
    if (g.name == "layers.2") CHECK(g.count == iter_sa_params(8, 2.0));
  }
}

TEST_CASE("initialization is deterministic, seed sensitive and convention bound") {
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.latents = 3;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.num_classes = 4;
  cfg.vocab = 9;
  cfg.max_len = 6;
  auto a = Model<float>::init(cfg, 11);
  auto b = Model<float>::init(cfg, 11);
  auto c = Model<float>::init(cfg, 12);
  REQUIRE(a.named.size() == b.named.size());
  bool any_diff = false;
  for (size_t i = 0; i < a.named.size(); ++i) {
    CHECK(a.named[i].first == b.named[i].first);
    CHECK(a.named[i].second.values() == b.named[i].second.values());
    if (a.named[i].second.values() != c.named[i].second.values())
      any_diff = true;
  }
  CHECK(any_diff);

  for (float v : a.head.w.values()) CHECK(v == 0.0f);
  for (float v : a.head.b.values()) CHECK(v == 0.0f);
  const Tensor<float>* g = a.find("layers.0.lat_ca_n.g");
  REQUIRE(g != nullptr);
  for (float v : g->values()) CHECK(v == 1.0f);
}

TEST_CASE("forward is deterministic and ignores batch order per sample") {
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.latents = 3;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.mlp_ratio = 2.0;
  cfg.num_classes = 5;
  cfg.vocab = 13;
  cfg.max_len = 10;
  auto m = Model<double>::init(cfg, 21);
  std::vector<std::vector<int64_t>> abc = {{1, 2, 3}, {4, 5, 6, 7, 8}, {9}};
  std::vector<std::vector<int64_t>> cab = {{9}, {1, 2, 3}, {4, 5, 6, 7, 8}};

  auto r1 = m.forward_ids(abc, {}, 10);
  auto r2 = m.forward_ids(abc, {}, 10);
  CHECK(r1.logits.values() == r2.logits.values());

  auto r3 = m.forward_ids(cab, {}, 10);
  const int64_t C = cfg.num_classes;
  const int64_t src[3] = {1, 2, 0};  // position of each abc sample in cab
  for (int64_t b = 0; b < 3; ++b)
    for (int64_t k = 0; k < C; ++k)
      CHECK(r1.logits.data()[b * C + k] == r3.logits.data()[src[b] * C + k]);
}

TEST_CASE("padding length does not leak into the logits") {
  for (auto variant : {AttentionVariant::bidirectional,
                       AttentionVariant::sequential,
                       AttentionVariant::iterative,
                       AttentionVariant::full_self_attention}) {
    ModelConfig cfg;
    cfg.layers = 2;
    cfg.latents = 3;
    cfg.dim = 8;
    cfg.heads = 2;
    cfg.mlp_ratio = 2.0;
    cfg.attention_variant = variant;
    cfg.sa_count = 1;
    cfg.share_scheme = ShareScheme::none;
    cfg.num_classes = 4;
    cfg.vocab = 13;
    cfg.max_len = 12;
    auto m = Model<double>::init(cfg, 31);
    std::vector<std::vector<int64_t>> ids = {{5, 2, 7, 1}};
    auto tight = m.forward_ids(ids, {}, 4);
    auto loose = m.forward_ids(ids, {}, 12);
    CHECK(max_rel_diff(tight.logits, loose.logits) < 1e-12);
  }
}

TEST_CASE("pooled latent head is bitwise invariant under latent reordering") {
  Rng rng(41, "pool");
  const int64_t B = 2, M = 7, D = 6, C = 4;
  auto lat = Tensor<double>::randn({B, M, D}, rng);
  auto norm = Norm<double>::init(D);
  fill_param(norm.g, rng, 0.3);
  auto head = Linear<double>::init(D, C, rng, 0.4);

  const std::vector<int64_t> perm = {4, 0, 6, 2, 5, 1, 3};
  auto shuffled = Tensor<double>::zeros({B, M, D});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t m = 0; m < M; ++m)
      for (int64_t d = 0; d < D; ++d)
        shuffled.data()[(b * M + m) * D + d] =
            lat.data()[(b * M + perm[size_t(m)]) * D + d];

  auto base = apply(head, apply(norm, mean_latents(lat)));
  auto moved = apply(head, apply(norm, mean_latents(shuffled)));
  CHECK(base.values() == moved.values());
  CHECK(std::memcmp(base.data(), moved.data(),
                    sizeof(double) * size_t(base.size())) == 0);

  CHECK_THROWS_AS(mean_latents(Tensor<double>::zeros({3, 4})), ShapeError);
}

TEST_CASE("mean over latents matches the plain mean and passes a grad check") {
  Rng rng(43, "poolgrad");
  auto lat = Tensor<double>::randn({2, 5, 3}, rng);
  auto plain = mean_axis(lat, 1);
  CHECK(max_rel_diff(mean_latents(lat), plain) < 1e-13);

  auto p = Tensor<double>::randn({2, 5, 3}, rng, 1.0, true).set_name("lat");
  auto fn = [&]() { return sum_all(mul(mean_latents(p), mean_latents(p))); };
  auto report = grad_check(fn, {p}, 1e-6);
  CHECK(report.ok(1e-6));
}

TEST_CASE("zeroing the write-back projections turns every layer into identity") {
  ModelConfig cfg;
  cfg.layers = 3;
  cfg.latents = 4;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.mlp_ratio = 2.0;
  cfg.num_classes = 3;
  cfg.vocab = 10;
  cfg.max_len = 8;
  auto m = Model<double>::init(cfg, 51);
  for (auto& [name, t] : m.named) {
    const bool write_back = name.find(".ca.lat_out.") != std::string::npos ||
                            name.find(".ca.lat_val.") != std::string::npos ||
                            name.find(".sa.o.") != std::string::npos ||
                            name.find(".l2.") != std::string::npos;
    if (write_back)
      std::fill(t.values().begin(), t.values().end(), 0.0);
  }
  Rng rng(52, "ident");
  auto tokens = Tensor<double>::randn({2, 5, 8}, rng);
  auto r = m.forward_tokens(tokens);
  CHECK(r.tokens.values() == tokens.values());
  auto lat0 = tile_batch(m.latents, 2);
  CHECK(r.latents.values() == lat0.values());
  // The head still sees the untouched latent embeddings.
  CHECK(r.logits.rank() == 2);
}

TEST_CASE("token to token influence needs two layers of latent round trip") {
  ModelConfig cfg;
  cfg.latents = 2;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.mlp_ratio = 2.0;
  cfg.head = HeadType::none;
  cfg.vocab = 10;
  cfg.max_len = 8;

  Rng rng(61, "jacobian");
  auto tokens = Tensor<double>::randn({1, 4, 8}, rng);
  auto bumped = Tensor<double>::from(tokens.shape(), tokens.values());
  bumped.data()[3 * 8 + 2] += 0.5;  // token 3, channel 2

  cfg.layers = 1;
  auto one = Model<double>::init(cfg, 62);
  auto a1 = one.forward_tokens(tokens).tokens;
  auto b1 = one.forward_tokens(bumped).tokens;
  for (int64_t d = 0; d < 8; ++d)
    CHECK(a1.data()[d] == b1.data()[d]);  // token 0 row, bitwise

  cfg.layers = 2;
  auto two = Model<double>::init(cfg, 62);
  auto a2 = two.forward_tokens(tokens).tokens;
  auto b2 = two.forward_tokens(bumped).tokens;
  double moved = 0;
  for (int64_t d = 0; d < 8; ++d)
    moved = std::max(moved, std::abs(a2.data()[d] - b2.data()[d]));
  CHECK(moved > 1e-8);
}

TEST_CASE("a single latent makes self attention a projected value path") {
  Rng rng(71, "single");
  auto p = MhsaParams<double>::init(8, rng, 0.3);
  auto x = Tensor<double>::randn({2, 1, 8}, rng);
  auto via_attn = multi_head_self_attention(x, p, 2);
  auto direct = apply(p.o, apply(p.v, x));
  CHECK(via_attn.values() == direct.values());

  ModelConfig cfg;
  cfg.layers = 2;
  cfg.latents = 1;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.num_classes = 3;
  cfg.vocab = 9;
  cfg.max_len = 6;
  auto m = Model<double>::init(cfg, 72);
  auto r = m.forward_ids({{1, 2, 3}});
  CHECK(r.logits.rank() == 2);
  CHECK(r.latents.dim(1) == 1);
}

TEST_CASE("config validation rejects broken setups") {
  ModelConfig cfg;
  cfg.vocab = 8;
  auto expect_reject = [](ModelConfig c) {
    CHECK_THROWS_AS(c.validate(), ConfigError);
  };
  {
    auto c = cfg;
    c.layers = 0;
    expect_reject(c);
  }
  {
    auto c = cfg;
    c.latents = 0;
    expect_reject(c);
  }
  {
    auto c = cfg;
    c.dim = 10;
    c.heads = 4;
    expect_reject(c);
  }
  {
    auto c = cfg;
    c.drop_path = 1.0;
    expect_reject(c);
  }
  {
    auto c = cfg;
    c.attention_variant = AttentionVariant::iterative;
    c.sa_count = -1;
    expect_reject(c);
  }
  {
    auto c = cfg;
    c.vocab = 0;
    expect_reject(c);
  }
  {
    auto c = cfg;
    c.num_classes = 0;
    expect_reject(c);
  }
  {
    auto c = cfg;
    c.input = InputKind::patch;
    c.patch.stride = 32;
    expect_reject(c);
  }
  CHECK_THROWS_AS(parse_attention_variant("fancy"), ConfigError);
  CHECK_THROWS_AS(parse_head_type("mean"), ConfigError);
  CHECK_THROWS_AS(parse_input_kind("mesh"), ConfigError);
  CHECK_THROWS_AS(preset_config("bixt_xxl"), ConfigError);
  CHECK(parse_attention_variant("bidirectional") ==
        AttentionVariant::bidirectional);
  CHECK(std::string(attention_variant_name(AttentionVariant::sequential)) ==
        "sequential");
  CHECK(std::string(head_type_name(HeadType::none)) == "none");
  CHECK(std::string(input_kind_name(InputKind::patch)) == "patch");
}

TEST_CASE("stochastic depth gates whole branches per sample and stays off in eval") {
  SUBCASE("gate unit") {
    DropPath<double> dp{Rng(81, "dp"), 0.5};
    auto delta = Tensor<double>::full({64, 2, 3}, 1.0);
    auto gated = dp.gate(delta);
    int64_t kept = 0, dropped = 0;
    for (int64_t b = 0; b < 64; ++b) {
      const double v0 = gated.data()[b * 6];
      CHECK((v0 == 0.0 || v0 == 2.0));
      for (int64_t i = 1; i < 6; ++i) CHECK(gated.data()[b * 6 + i] == v0);
      (v0 == 0.0 ? dropped : kept)++;
    }
    CHECK(kept > 0);
    CHECK(dropped > 0);
  }
  SUBCASE("model wiring") {
    ModelConfig cfg;
    cfg.layers = 2;
    cfg.latents = 3;
    cfg.dim = 8;
    cfg.heads = 2;
    cfg.num_classes = 4;
    cfg.vocab = 9;
    cfg.max_len = 8;
    cfg.drop_path = 0.5;
    auto m = Model<double>::init(cfg, 82);
    Rng hr(83, "head");
    fill_param(m.head.w, hr, 0.3);  // zero head would hide the gating
    std::vector<std::vector<int64_t>> ids = {{1, 2, 3}, {4, 5, 6}};

    Rng r1(7, "train");
    ForwardOptions train1;
    train1.drop_rng = &r1;
    auto t1 = m.forward_ids(ids, train1);

    Rng r2(7, "train");
    ForwardOptions train2;
    train2.drop_rng = &r2;
    auto t2 = m.forward_ids(ids, train2);
    CHECK(t1.logits.values() == t2.logits.values());

    auto ev = m.forward_ids(ids);
    CHECK(t1.logits.values() != ev.logits.values());

    // Zero rate: the rng must not be consumed at all.
    cfg.drop_path = 0.0;
    auto m0 = Model<double>::init(cfg, 82);
    fill_param(m0.head.w, hr, 0.3);
    Rng r3(7, "train");
    ForwardOptions opts3;
    opts3.drop_rng = &r3;
    CHECK(m0.forward_ids(ids, opts3).logits.values() ==
          m0.forward_ids(ids).logits.values());
  }
}

TEST_CASE("dense head emits normalized per token predictions and upsamples grids") {
  ModelConfig cfg;
  cfg.layers = 1;
  cfg.latents = 2;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.mlp_ratio = 2.0;
  cfg.head = HeadType::dense_token_linear;
  cfg.num_classes = 8;
  cfg.input = InputKind::patch;
  cfg.patch = PatchSpec{4, 4, 8, 8, 3};
  auto m = Model<float>::init(cfg, 91);
  // Identity head: predictions must equal the normalized tokens.
  for (int64_t i = 0; i < 8; ++i) m.head.w.data()[i * 8 + i] = 1.0f;

  Rng rng(92, "img");
  auto img = Tensor<float>::randn({8, 8, 3}, rng);
  auto r = m.forward_image(img);
  REQUIRE(r.logits.shape() == Shape{1, 4, 8});
  auto normed = apply(m.final_norm, r.tokens);
  CHECK(r.logits.values() == normed.values());

  auto same = m.upsample_dense(r.logits, 2, 2);
  REQUIRE(same.shape() == Shape{2, 2, 8});
  CHECK(same.values() == r.logits.values());
  auto big = m.upsample_dense(r.logits, 8, 8);
  CHECK(big.shape() == Shape{8, 8, 8});

  ModelConfig seq_cfg;
  seq_cfg.vocab = 8;
  seq_cfg.dim = 8;
  seq_cfg.heads = 2;
  seq_cfg.latents = 2;
  seq_cfg.layers = 1;
  auto seq_model = Model<float>::init(seq_cfg, 93);
  CHECK_THROWS_AS(seq_model.upsample_dense(r.logits, 8, 8), ConfigError);
}

TEST_CASE("positional cache reuses eval encodings until the projection moves") {
  ModelConfig cfg;
  cfg.layers = 1;
  cfg.latents = 2;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.vocab = 9;
  cfg.max_len = 12;
  auto m = Model<double>::init(cfg, 95);
  auto p1 = m.positional(5);
  auto p2 = m.positional(5);
  CHECK(p1.ptr().get() == p2.ptr().get());
  auto p3 = m.positional(7);
  CHECK(p3.dim(0) == 7);
  m.pos_proj.w.data()[0] += 1.0;
  auto p4 = m.positional(5);
  CHECK(p4.ptr().get() != p1.ptr().get());
  CHECK(p4.values() != p1.values());

  {
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    auto p5 = m.positional(5);
    CHECK(p5.ptr().get() != p4.ptr().get());
  }
}

TEST_CASE("attention records surface the per layer maps") {
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.latents = 3;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.mlp_ratio = 2.0;
  cfg.num_classes = 3;
  cfg.vocab = 10;
  cfg.max_len = 8;
  std::vector<std::vector<int64_t>> ids = {{1, 2, 3, 4, 5}};
  ForwardOptions opts;
  opts.export_attention = true;

  for (auto variant : {AttentionVariant::bidirectional,
                       AttentionVariant::sequential,
                       AttentionVariant::iterative}) {
    cfg.attention_variant = variant;
    cfg.sa_count = 1;
    cfg.share_scheme = ShareScheme::none;
    auto m = Model<double>::init(cfg, 101);
    auto r = m.forward_ids(ids, opts);
    REQUIRE(r.records.size() == 2);
    for (const auto& rec : r.records) {
      REQUIRE(rec.sim.shape() == Shape{1, 2, 3, 5});
      REQUIRE(rec.latent_weights.shape() == Shape{1, 2, 3, 5});
      for (int64_t row = 0; row < 2 * 3; ++row) {
        double s = 0;
        for (int64_t n = 0; n < 5; ++n)
          s += rec.latent_weights.data()[row * 5 + n];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
      }
      if (variant == AttentionVariant::sequential)
        CHECK(rec.sim_tok.shape() == Shape{1, 2, 5, 3});
      else
        CHECK(rec.sim_tok.size() == 0);
    }
  }

  cfg.attention_variant = AttentionVariant::full_self_attention;
  auto plain = Model<double>::init(cfg, 101);
  auto r = plain.forward_ids(ids, opts);
  CHECK(r.records.empty());
  CHECK(r.latents.size() == 0);
  CHECK(r.logits.shape() == Shape{1, 3});
}

TEST_CASE("token refinement hook runs once per layer on the token stream") {
  ModelConfig cfg;
  cfg.layers = 3;
  cfg.latents = 2;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.head = HeadType::none;
  cfg.vocab = 9;
  cfg.max_len = 6;
  auto m = Model<double>::init(cfg, 111);
  std::vector<int64_t> seen;
  m.token_hook = [&](const Tensor<double>& t, int64_t layer) {
    seen.push_back(layer);
    return scale(t, 2.0);
  };
  Rng rng(112, "hook");
  auto tokens = Tensor<double>::randn({1, 4, 8}, rng);
  auto hooked = m.forward_tokens(tokens);
  CHECK(seen == std::vector<int64_t>{0, 1, 2});

  m.token_hook = nullptr;
  auto base = m.forward_tokens(tokens);
  CHECK(hooked.tokens.values() != base.tokens.values());
}

TEST_CASE("toy ladder gradients pass a finite difference check") {
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.latents = 2;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.mlp_ratio = 1.5;
  cfg.num_classes = 3;
  cfg.vocab = 12;
  cfg.max_len = 6;
  auto m = Model<double>::init(cfg, 121);
  Rng rng(122, "head");
  fill_param(m.head.w, rng, 0.3);
  fill_param(m.head.b, rng, 0.3);

  std::vector<std::vector<int64_t>> ids = {{3, 1, 4, 1, 5}};
  auto fn = [&]() {
    return cross_entropy(m.forward_ids(ids).logits, {2});
  };
  std::vector<Tensor<double>> params;
  for (auto& [name, t] : m.named) params.push_back(t);
  auto report = grad_check(fn, params, 1e-5);
  CHECK(report.ok(1e-4));

  bool pos_grad_moves = false;
  for (const auto& e : report.entries)
    if (e.param == "pos_proj.w" && std::abs(e.analytic) > 1e-12)
      pos_grad_moves = true;
  CHECK(pos_grad_moves);
}

TEST_CASE("sequence length changes tokens but never the parameter count") {
  auto cfg = bixt_lra_listops();
  cfg.max_len = 512;
  const int64_t p512 = count_parameters(Model<float>::init(cfg, 131)).total;
  cfg.max_len = 2048;
  const int64_t p2048 = count_parameters(Model<float>::init(cfg, 131)).total;
  CHECK(p512 == p2048);
}
