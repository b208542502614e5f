#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <functional>
#include <iterator>
#include <sstream>

#include "bixt/checkpoint.hpp"
#include "bixt/train.hpp"

using namespace bixt;

namespace {

// Stack-free interpreter over the raw text form, kept separate from the
// library's id-based evaluator so the two routes can check each other.
int64_t text_eval(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> toks{std::istream_iterator<std::string>(in), {}};
  size_t pos = 0;
  std::function<int64_t()> ev = [&]() -> int64_t {
    REQUIRE(pos < toks.size());
    const std::string t = toks[pos++];
    if (t.size() == 1 && t[0] >= '0' && t[0] <= '9') return t[0] - '0';
    std::vector<int64_t> a;
    while (toks.at(pos) != "]") a.push_back(ev());
    ++pos;
    REQUIRE(!a.empty());
    std::sort(a.begin(), a.end());
    if (t == "[MAX") return a.back();
    if (t == "[MIN") return a.front();
    if (t == "[MED") return a[(a.size() - 1) / 2];
    REQUIRE(t == "[SM");
    int64_t s = 0;
    for (int64_t v : a) s += v;
    return s % 10;
  };
  const int64_t v = ev();
  REQUIRE(pos == toks.size());
  return v;
}

struct TempFile {
  std::string path;
  explicit TempFile(const std::string& name) : path("/tmp/" + name) {}
  ~TempFile() { std::remove(path.c_str()); }
};

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

ModelConfig tiny_listops_model() {
  ModelConfig cfg;
  cfg.layers = 1;
  cfg.latents = 2;
  cfg.dim = 16;
  cfg.heads = 2;
  cfg.mlp_ratio = 1.0;
  cfg.num_classes = 10;
  cfg.vocab = 16;
  cfg.max_len = 16;
  return cfg;
}

TrainConfig tiny_run(uint64_t seed) {
  TrainConfig tc;
  tc.model = tiny_listops_model();
  tc.epochs = 2;
  tc.batch = 8;
  tc.peak_lr = 1e-3;
  tc.warmup_epochs = 1;
  tc.seed = seed;
  return tc;
}

template <class S>
void zero_linear(Linear<S>& l) {
  std::fill(l.w.values().begin(), l.w.values().end(), S(0));
  std::fill(l.b.values().begin(), l.b.values().end(), S(0));
}

template <class S>
void identity_linear(Linear<S>& l, int64_t dim) {
  zero_linear(l);
  for (int64_t i = 0; i < dim; ++i) l.w.values()[size_t(i * dim + i)] = S(1);
}

}  // namespace

TEST_CASE("generated labels agree with an independent text interpreter") {
  auto ds = listops_generate(10000, 64, 3, 7);
  REQUIRE(ds.size() == 10000);
  bool ops_seen[4] = {false, false, false, false};
  bool labels_seen[10] = {};
  for (const auto& s : ds) {
    REQUIRE(!s.ids.empty());
    REQUIRE(int64_t(s.ids.size()) <= 64);
    int64_t depth = 0;
    for (int64_t id : s.ids) {
      REQUIRE(id >= 1);
      REQUIRE(id < kListOpsVocab);
      if (id >= 1 && id <= 4) {
        ops_seen[id - 1] = true;
        ++depth;
      }
      if (id == kListOpsClose) {
        --depth;
        REQUIRE(depth >= 0);
      }
    }
    REQUIRE(depth == 0);
    if (text_eval(listops_decode(s.ids)) != s.label) {
      CAPTURE(listops_decode(s.ids));
      FAIL("label disagrees with the text interpreter");
    }
    labels_seen[size_t(s.label)] = true;
  }
  for (bool seen : ops_seen) CHECK(seen);
  for (bool seen : labels_seen) CHECK(seen);

  SUBCASE("deterministic per seed") {
    auto again = listops_generate(10000, 64, 3, 7);
    bool same = true;
    for (size_t i = 0; i < ds.size(); ++i)
      same = same && ds[i].ids == again[i].ids && ds[i].label == again[i].label;
    CHECK(same);
    auto other = listops_generate(10000, 64, 3, 8);
    bool any_diff = false;
    for (size_t i = 0; i < ds.size(); ++i)
      any_diff = any_diff || ds[i].ids != other[i].ids;
    CHECK(any_diff);
  }
  SUBCASE("bad limits") {
    CHECK_THROWS_AS(listops_generate(0, 64, 3, 1), ConfigError);
    CHECK_THROWS_AS(listops_generate(4, 0, 3, 1), ConfigError);
    CHECK_THROWS_AS(listops_generate(4, 64, 0, 1), ConfigError);
  }
}

TEST_CASE("the evaluator implements the operator semantics") {
  auto value = [](const std::string& text) {
    return listops_eval(listops_tokenize(text));
  };
  CHECK(value("[MAX 2 9 [MIN 4 7 ] 0 ]") == 9);
  CHECK(value("[SM 5 5 5 ]") == 5);
  CHECK(value("7") == 7);
  CHECK(value("[MED 1 2 3 4 ]") == 2);  // lower middle on even arity
  CHECK(value("[MED 5 1 8 ]") == 5);
  CHECK(value("[MIN 9 [SM 9 9 9 ] ]") == 7);

  CHECK_THROWS_AS(value("]"), ConfigError);
  CHECK_THROWS_AS(value("[MAX ]"), ConfigError);
  CHECK_THROWS_AS(value("[MAX 1"), ConfigError);
  CHECK_THROWS_AS(value("1 2"), ConfigError);
  CHECK_THROWS_AS(listops_tokenize("[FOO 1 ]"), ConfigError);
}

TEST_CASE("tsv files round trip and fail with line numbers") {
  TempFile f("bixt_harness_fixture.tsv");
  write_text(f.path, "[MAX 2 9 [MIN 4 7 ] 0 ]\t9\n7\t7\n");
  auto ds = load_lra_tsv(f.path);
  REQUIRE(ds.size() == 2);
  CHECK(ds[0].ids == std::vector<int64_t>{1, 8, 15, 2, 10, 13, 5, 6, 5});
  CHECK(ds[0].label == 9);
  CHECK(ds[1].ids == std::vector<int64_t>{13});
  CHECK(ds[1].label == 7);

  SUBCASE("generated datasets survive the disk round trip") {
    auto gen = listops_generate(200, 48, 3, 11);
    write_lra_tsv(gen, f.path);
    std::string warning;
    auto back = load_lra_tsv(f.path, &warning);
    CHECK(warning.empty());
    REQUIRE(back.size() == gen.size());
    bool same = true;
    for (size_t i = 0; i < gen.size(); ++i)
      same = same && back[i].ids == gen[i].ids && back[i].label == gen[i].label;
    CHECK(same);
  }
  SUBCASE("empty file warns") {
    write_text(f.path, "");
    std::string warning;
    CHECK(load_lra_tsv(f.path, &warning).empty());
    CHECK(warning.find("empty") != std::string::npos);
  }
  SUBCASE("failures name the line") {
    auto message = [&](const std::string& text) {
      write_text(f.path, text);
      try {
        load_lra_tsv(f.path);
      } catch (const IoError& e) {
        return std::string(e.what());
      }
      return std::string();
    };
    CHECK(message("7\tx").find(":1: bad label") != std::string::npos);
    CHECK(message("7\t7\n[FOO 1 ]\t1\n").find(":2: unknown token '[FOO'") !=
          std::string::npos);
    CHECK(message("7 7\n").find(":1: expected tab") != std::string::npos);
    CHECK(message("7\t11\n").find(":1: bad label") != std::string::npos);
    CHECK(message("\t3\n").find(":1: empty source") != std::string::npos);
    CHECK_THROWS_AS(load_lra_tsv("/no/such/file.tsv"), IoError);
  }
}

TEST_CASE("the schedule ramps linearly then decays on a cosine to zero") {
  CHECK(cosine_warmup(0, 100, 10, 0.5) == 0.0);
  CHECK(cosine_warmup(5, 100, 10, 0.5) == doctest::Approx(0.25));
  CHECK(cosine_warmup(10, 100, 10, 0.5) == doctest::Approx(0.5));
  CHECK(cosine_warmup(55, 100, 10, 0.5) == doctest::Approx(0.25));
  CHECK(cosine_warmup(100, 100, 10, 0.5) == 0.0);
  CHECK(cosine_warmup(120, 100, 10, 0.5) == 0.0);
  CHECK(cosine_warmup(0, 100, 0, 0.3) == doctest::Approx(0.3));

  double prev = cosine_warmup(10, 100, 10, 0.5);
  for (int64_t s = 11; s <= 100; ++s) {
    const double lr = cosine_warmup(s, 100, 10, 0.5);
    CHECK(lr < prev);
    prev = lr;
  }

  CHECK_THROWS_AS(cosine_warmup(1, 0, 0, 0.1), ConfigError);
  CHECK_THROWS_AS(cosine_warmup(1, 10, 11, 0.1), ConfigError);
  CHECK_THROWS_AS(cosine_warmup(-1, 10, 2, 0.1), ConfigError);
}

TEST_CASE("one optimizer step matches the hand computation") {
  AdamWHyper h;
  h.weight_decay = 0.5;
  std::vector<double> w = {1.0}, m = {0.0}, v = {0.0};

  // f(w) = w^2 / 2, so the gradient equals the weight.
  std::vector<double> g = {w[0]};
  adamw_step(w, g, m, v, 1, 0.1, h);
  const double m1 = 0.1 * 1.0, v1 = 0.001 * 1.0;
  const double dir1 = (m1 / 0.1) / (std::sqrt(v1 / 0.001) + 1e-8);
  const double w1 = 1.0 - 0.1 * (dir1 + 0.5 * 1.0);
  CHECK(w[0] == doctest::Approx(w1).epsilon(1e-14));
  CHECK(m[0] == doctest::Approx(m1).epsilon(1e-14));
  CHECK(v[0] == doctest::Approx(v1).epsilon(1e-14));

  g[0] = w[0];
  adamw_step(w, g, m, v, 2, 0.1, h);
  const double m2 = 0.9 * m1 + 0.1 * w1;
  const double v2 = 0.999 * v1 + 0.001 * w1 * w1;
  const double c1 = 1.0 - 0.81, c2 = 1.0 - 0.998001;
  const double dir2 = (m2 / c1) / (std::sqrt(v2 / c2) + 1e-8);
  const double w2 = w1 - 0.1 * (dir2 + 0.5 * w1);
  CHECK(w[0] == doctest::Approx(w2).epsilon(1e-14));

  SUBCASE("decay reaches the weight matrices only") {
    CHECK(adamw_decays("head.w"));
    CHECK(adamw_decays("pos_proj.w"));
    CHECK(adamw_decays("layers.0.ca.lat_ref.w"));
    CHECK_FALSE(adamw_decays("layers.0.ca.lat_ref.b"));
    CHECK_FALSE(adamw_decays("layers.0.lat_ca_n.g"));
    CHECK_FALSE(adamw_decays("embed.table"));
    CHECK_FALSE(adamw_decays("latents"));
  }
  SUBCASE("mismatched buffers are rejected") {
    std::vector<double> short_g = {};
    CHECK_THROWS_AS(adamw_step(w, short_g, m, v, 3, 0.1, h), ShapeError);
    CHECK_THROWS_AS(adamw_step(w, g, m, v, 0, 0.1, h), ConfigError);
  }
}

TEST_CASE("gradient clipping rescales to the requested global norm") {
  std::vector<std::vector<double>> g = {{3.0, 0.0}, {0.0, 4.0}};
  CHECK(clip_global_norm(g, 1.0) == doctest::Approx(5.0));
  CHECK(g[0][0] == doctest::Approx(0.6));
  CHECK(g[1][1] == doctest::Approx(0.8));
  double ss = g[0][0] * g[0][0] + g[1][1] * g[1][1];
  CHECK(std::sqrt(ss) == doctest::Approx(1.0));

  std::vector<std::vector<double>> small = {{0.1}};
  CHECK(clip_global_norm(small, 1.0) == doctest::Approx(0.1));
  CHECK(small[0][0] == 0.1);
}

TEST_CASE("zero learning rate leaves parameters bitwise untouched") {
  auto tc = tiny_run(9);
  tc.epochs = 1;
  tc.peak_lr = 0.0;
  tc.warmup_epochs = 0;
  auto data = listops_generate(16, 12, 2, 9);
  auto fresh = Model<double>::init(tc.model, tc.seed);
  auto result = train<double>(tc, data, data);
  REQUIRE(result.model.named.size() == fresh.named.size());
  for (size_t i = 0; i < fresh.named.size(); ++i) {
    const auto& a = fresh.named[i].second.values();
    const auto& b = result.model.named[i].second.values();
    if (std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) != 0) {
      CAPTURE(fresh.named[i].first);
      FAIL("parameter moved under lr 0");
    }
  }
}

TEST_CASE("same seed runs reproduce the metric history exactly") {
  auto tc = tiny_run(13);
  auto data = listops_generate(32, 12, 2, 13);
  auto val = listops_generate(16, 12, 2, 14);
  auto a = train<double>(tc, data, val);
  auto b = train<double>(tc, data, val);
  REQUIRE(a.history.size() == b.history.size());
  for (size_t i = 0; i < a.history.size(); ++i) {
    CHECK(a.history[i].lr == b.history[i].lr);
    CHECK(a.history[i].train_loss == b.history[i].train_loss);
    CHECK(a.history[i].train_acc == b.history[i].train_acc);
    CHECK(a.history[i].val_acc == b.history[i].val_acc);
  }
  for (size_t i = 0; i < a.model.named.size(); ++i)
    CHECK(a.model.named[i].second.values() ==
          b.model.named[i].second.values());
  CHECK(a.best_epoch == b.best_epoch);

  SUBCASE("a different seed moves the run") {
    auto c = train<double>(tiny_run(14), data, val);
    CHECK(a.history.back().train_loss != c.history.back().train_loss);
  }
}

TEST_CASE("length bucketing deals sorted batches in a shuffled order") {
  auto ds = listops_generate(101, 40, 3, 9);
  std::vector<int64_t> order(ds.size());
  std::iota(order.begin(), order.end(), 0);
  Rng perm(9, "perm");
  for (int64_t i = int64_t(ds.size()) - 1; i > 0; --i)
    std::swap(order[size_t(i)], order[size_t(perm.below(uint64_t(i + 1)))]);

  const int64_t batch = 16;
  Rng deal(9, "deal");
  auto dealt = detail::bucket_order(order, ds, batch, deal);

  auto sorted_dealt = dealt;
  std::sort(sorted_dealt.begin(), sorted_dealt.end());
  std::vector<int64_t> all(ds.size());
  std::iota(all.begin(), all.end(), 0);
  CHECK(sorted_dealt == all);

  auto len = [&](int64_t i) { return int64_t(ds[size_t(i)].ids.size()); };
  auto blocks_of = [&](const std::vector<int64_t>& ord) {
    std::vector<std::vector<int64_t>> out;
    for (size_t at = 0; at < ord.size(); at += size_t(batch)) {
      std::vector<int64_t> lens;
      for (size_t i = at; i < std::min(ord.size(), at + size_t(batch)); ++i)
        lens.push_back(len(ord[i]));
      std::sort(lens.begin(), lens.end());
      out.push_back(std::move(lens));
    }
    return out;
  };
  auto sorted_order = order;
  std::stable_sort(sorted_order.begin(), sorted_order.end(),
                   [&](int64_t a, int64_t b) { return len(a) < len(b); });
  auto want = blocks_of(sorted_order);
  auto got = blocks_of(dealt);
  CHECK(got.back() == want.back());
  std::sort(want.begin(), want.end());
  std::sort(got.begin(), got.end());
  CHECK(got == want);

  SUBCASE("the same deal seed reproduces the order") {
    Rng again(9, "deal");
    CHECK(detail::bucket_order(order, ds, batch, again) == dealt);
  }

  SUBCASE("bucketed training is deterministic and diverges from unbucketed") {
    auto tc = tiny_run(13);
    tc.bucket_by_length = true;
    auto data = listops_generate(32, 12, 2, 13);
    auto val = listops_generate(16, 12, 2, 14);
    auto a = train<double>(tc, data, val);
    auto b = train<double>(tc, data, val);
    REQUIRE(a.history.size() == b.history.size());
    for (size_t i = 0; i < a.history.size(); ++i)
      CHECK(a.history[i].train_loss == b.history[i].train_loss);
    for (size_t i = 0; i < a.model.named.size(); ++i)
      CHECK(a.model.named[i].second.values() ==
            b.model.named[i].second.values());
    tc.bucket_by_length = false;
    auto plain = train<double>(tc, data, val);
    CHECK(plain.history.back().train_loss != a.history.back().train_loss);
  }
}

TEST_CASE("padding inside a batch never changes a sample's logits") {
  auto m = Model<double>::init(tiny_listops_model(), 21);
  Rng hr(22, "head");
  for (auto& x : m.head.w.values()) x = hr.normal() * 0.1;
  std::vector<int64_t> a = {1, 8, 15, 5};
  std::vector<int64_t> b = {2, 10, 13, 5, 6, 5, 7, 9, 11, 5};
  auto alone = m.forward_ids({a});
  auto batched = m.forward_ids({a, b});
  for (int64_t c = 0; c < 10; ++c) {
    const double x = alone.logits.data()[c];
    const double y = batched.logits.data()[c];
    CHECK(std::abs(x - y) <= 1e-9 * std::max(1.0, std::abs(x)));
  }
}

TEST_CASE("evaluation counts classes and never mutates parameters") {
  auto cfg = tiny_listops_model();
  auto m = Model<double>::init(cfg, 25);
  // Labels 0,0,0,1,2 with a zero head: constant logits predict class 0.
  ListOpsDataset ds;
  for (int64_t label : {0, 0, 0, 1, 2}) {
    ListOpsSample s;
    s.ids = {4, kListOpsDigit0 + label, kListOpsClose};  // [SM d ]
    s.label = label;
    ds.push_back(s);
  }
  std::vector<std::vector<double>> snap;
  for (const auto& [name, t] : m.named) snap.push_back(t.values());

  auto rep = evaluate(m, ds, 2);
  CHECK(rep.n == 5);
  CHECK(rep.accuracy == doctest::Approx(0.6));
  CHECK(rep.per_class_correct[0] == 3);
  CHECK(rep.per_class_total[0] == 3);
  CHECK(rep.per_class_correct[1] == 0);
  CHECK(rep.per_class_total[1] == 1);

  auto again = evaluate(m, ds, 2);
  CHECK(again.accuracy == rep.accuracy);
  CHECK(again.per_class_correct == rep.per_class_correct);
  for (size_t i = 0; i < snap.size(); ++i)
    CHECK(m.named[i].second.values() == snap[i]);

  SUBCASE("vocabulary and label mismatches are rejected") {
    ListOpsDataset bad = ds;
    bad[0].ids[1] = 99;
    CHECK_THROWS_AS(evaluate(m, bad, 2), ConfigError);
    bad = ds;
    bad[0].label = 11;
    CHECK_THROWS_AS(evaluate(m, bad, 2), ConfigError);
  }
}

TEST_CASE("a hand built model scores a perfect fixture") {
  // One layer, one latent: with identity value and output projections and
  // every other write-back zeroed, the pooled latent is the normed token
  // embedding, so a head wired to the digit rows reads the answer off a
  // single-digit expression.
  ModelConfig cfg = tiny_listops_model();
  cfg.latents = 1;
  auto m = Model<double>::init(cfg, 27);
  std::fill(m.embed_table.values().begin(), m.embed_table.values().end(), 0.0);
  for (int64_t t = 0; t < 16; ++t)
    m.embed_table.values()[size_t(t * 16 + t)] = 1.0;
  zero_linear(m.pos_proj);
  std::fill(m.latents.values().begin(), m.latents.values().end(), 0.0);
  auto& layer = m.bidir_layers[0];
  identity_linear(layer.ca.tok_val, 16);
  identity_linear(layer.ca.lat_out, 16);
  zero_linear(layer.lat_ffn.l2);
  zero_linear(layer.sa.o);
  zero_linear(layer.lat_ffn2.l2);
  for (int64_t d = 0; d < 10; ++d)
    m.head.w.values()[size_t((6 + d) * 10 + d)] = 1.0;

  ListOpsDataset ds;
  for (int64_t d : {3, 1, 4, 1, 5}) {
    ListOpsSample s;
    s.ids = {kListOpsDigit0 + d};
    s.label = d;
    ds.push_back(s);
  }
  auto rep = evaluate(m, ds);
  CHECK(rep.accuracy == 1.0);
  CHECK(rep.per_class_correct[1] == 2);
}

TEST_CASE("training overfits the fixture and checkpoints the result") {
  TrainConfig tc;
  tc.model = bixt_lra_listops();
  tc.model.max_len = 24;
  tc.epochs = 200;
  tc.batch = 16;
  tc.peak_lr = 3e-4;
  tc.warmup_epochs = 20;
  tc.seed = 3;
  tc.data = DataSpec{24, 2, 64, 64, 0};
  auto data = listops_generate(tc.data.train_n, tc.data.max_len,
                               tc.data.max_depth, tc.seed);

  auto result = train<double>(tc, data, data);
  int64_t reached = 0;
  for (const auto& em : result.history)
    if (em.train_acc >= 0.99) {
      reached = em.epoch;
      break;
    }
  REQUIRE(reached > 0);
  CHECK(reached <= 200);

  // Five-epoch smoothed train loss falls strictly until the fit is in.
  auto smoothed = [&](int64_t i) {
    const int64_t lo = std::max<int64_t>(0, i - 4);
    double s = 0;
    for (int64_t j = lo; j <= i; ++j)
      s += result.history[size_t(j)].train_loss;
    return s / double(i - lo + 1);
  };
  for (int64_t i = 1; i < reached; ++i) CHECK(smoothed(i) < smoothed(i - 1));

  // The retained weights score at least as well as any epoch's validation.
  auto best_eval = evaluate(result.model, data);
  CHECK(best_eval.accuracy == doctest::Approx(result.best_val));
  CHECK(result.best_val >= 0.99);

  SUBCASE("checkpoint round trip preserves the accuracy bitwise") {
    TempFile ckpt("bixt_harness_overfit.ckpt");
    save_checkpoint(result.model, ckpt.path, tc.seed);
    auto loaded = load_checkpoint<double>(ckpt.path);
    auto re = evaluate(loaded, data);
    CHECK(re.accuracy == best_eval.accuracy);
    CHECK(re.per_class_correct == best_eval.per_class_correct);
    CHECK(re.per_class_total == best_eval.per_class_total);
  }
}

TEST_CASE("exploding losses abort with a placed diagnosis") {
  auto tc = tiny_run(31);
  tc.epochs = 1;
  tc.peak_lr = 1e200;
  tc.warmup_epochs = 0;
  auto data = listops_generate(16, 12, 2, 31);
  bool threw = false;
  try {
    train<double>(tc, data, data);
  } catch (const NumericError& e) {
    threw = true;
    CHECK(std::string(e.what()).find("epoch 1") != std::string::npos);
  }
  CHECK(threw);
}

TEST_CASE("train rejects invalid setups before touching the model") {
  auto tc = tiny_run(1);
  auto data = listops_generate(8, 12, 2, 1);
  CHECK_THROWS_AS(train<double>(tc, {}, data), ConfigError);
  tc.warmup_epochs = 5;
  CHECK_THROWS_AS(train<double>(tc, data, data), ConfigError);
  tc = tiny_run(1);
  tc.batch = 0;
  CHECK_THROWS_AS(train<double>(tc, data, data), ConfigError);
  tc = tiny_run(1);
  tc.clip_norm = 0.0;
  CHECK_THROWS_AS(train<double>(tc, data, data), ConfigError);
  tc = tiny_run(1);
  auto bad = data;
  bad[0].ids.push_back(77);
  CHECK_THROWS_AS(train<double>(tc, bad, data), ConfigError);
}
