#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "bixt/listops.hpp"
#include "bixt/model.hpp"

namespace bixt {

// Piecewise schedule: linear ramp over the warmup steps, then a half cosine
// down to zero at `total`.
inline double cosine_warmup(int64_t step, int64_t total, int64_t warmup,
                            double peak) {
  if (total < 1) throw ConfigError("cosine_warmup: empty schedule");
  if (warmup < 0 || warmup > total)
    throw ConfigError("cosine_warmup: warmup outside the schedule");
  if (step < 0) throw ConfigError("cosine_warmup: negative step");
  if (warmup > 0 && step < warmup) return peak * double(step) / double(warmup);
  if (step >= total) return 0.0;
  const double t = double(step - warmup) / double(total - warmup);
  return 0.5 * peak * (1.0 + std::cos(3.14159265358979323846 * t));
}

// ---------------------------------------------------------------------------

struct AdamWHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// One decoupled update over a flat array; `t` is the 1-based step count.
// Moment math runs in double no matter the parameter scalar.
template <class S>
void adamw_step(std::vector<S>& w, const std::vector<S>& g,
                std::vector<S>& m, std::vector<S>& v, int64_t t, double lr,
                const AdamWHyper& h) {
  if (g.size() != w.size() || m.size() != w.size() || v.size() != w.size())
    throw ShapeError("adamw_step: mismatched buffer sizes");
  if (t < 1) throw ConfigError("adamw_step: step count starts at 1");
  const double c1 = 1.0 - std::pow(h.beta1, double(t));
  const double c2 = 1.0 - std::pow(h.beta2, double(t));
  for (size_t i = 0; i < w.size(); ++i) {
    const double gi = double(g[i]);
    const double mi = h.beta1 * double(m[i]) + (1.0 - h.beta1) * gi;
    const double vi = h.beta2 * double(v[i]) + (1.0 - h.beta2) * gi * gi;
    m[i] = S(mi);
    v[i] = S(vi);
    const double dir = (mi / c1) / (std::sqrt(vi / c2) + h.eps);
    w[i] = S(double(w[i]) - lr * (dir + h.weight_decay * double(w[i])));
  }
}

// Decay touches the weight matrices only; biases, norm parameters, the
// embedding table and the latent array stay unregularized.
inline bool adamw_decays(const std::string& name) {
  return name.size() > 2 && name.compare(name.size() - 2, 2, ".w") == 0;
}

template <class S>
struct AdamW {
  AdamWHyper hyper;
  int64_t steps = 0;
  std::vector<std::vector<S>> m, v;

  void init(const Model<S>& model) {
    steps = 0;
    m.clear();
    v.clear();
    for (const auto& [name, t] : model.named) {
      m.emplace_back(t.size(), S(0));
      v.emplace_back(t.size(), S(0));
    }
  }

  // Applies one step from gradients staged in registry order.
  void step(Model<S>& model, const std::vector<std::vector<S>>& grads,
            double lr) {
    if (grads.size() != model.named.size())
      throw ShapeError("optimizer step: gradient list does not match model");
    ++steps;
    for (size_t i = 0; i < grads.size(); ++i) {
      AdamWHyper h = hyper;
      if (!adamw_decays(model.named[i].first)) h.weight_decay = 0.0;
      adamw_step(model.named[i].second.values(), grads[i], m[i], v[i], steps,
                 lr, h);
    }
  }
};

// Scales gradients so their global norm is at most `max_norm`; returns the
// norm seen before clipping. Accumulation runs in double.
template <class S>
double clip_global_norm(std::vector<std::vector<S>>& grads, double max_norm) {
  double ss = 0.0;
  for (const auto& g : grads)
    for (S x : g) ss += double(x) * double(x);
  const double norm = std::sqrt(ss);
  if (norm > max_norm && norm > 0.0) {
    const double k = max_norm / norm;
    for (auto& g : grads)
      for (S& x : g) x = S(double(x) * k);
  }
  return norm;
}

// ---------------------------------------------------------------------------

struct DataSpec {
  int64_t max_len = 128;
  int64_t max_depth = 3;
  int64_t train_n = 10000;
  int64_t val_n = 1000;
  int64_t test_n = 1000;
};

struct TrainConfig {
  ModelConfig model;
  int64_t epochs = 40;
  int64_t batch = 32;
  double peak_lr = 2.5e-4;
  int64_t warmup_epochs = 1;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  // Group samples of similar length into the same minibatch so short
  // sequences do not pad up to the longest in a random draw. Batch order is
  // reshuffled each epoch; off by default to keep legacy trajectories.
  bool bucket_by_length = false;
  uint64_t seed = 0;
  DataSpec data;

  void validate() const {
    model.validate();
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    if (batch < 1) throw ConfigError("batch must be at least 1");
    if (warmup_epochs < 0 || warmup_epochs > epochs)
      throw ConfigError("warmup epochs must lie within the epoch budget");
    if (peak_lr < 0.0) throw ConfigError("peak learning rate must be >= 0");
    if (weight_decay < 0.0) throw ConfigError("weight decay must be >= 0");
    if (clip_norm <= 0.0) throw ConfigError("clip norm must be positive");
  }
};

struct EpochMetrics {
  int64_t epoch = 0;  // 1-based
  double lr = 0.0;    // at the epoch's final optimizer step
  double train_loss = 0.0;
  double train_acc = 0.0;
  double val_acc = 0.0;
};

template <class S>
struct TrainResult {
  Model<S> model;  // best-validation weights
  std::vector<EpochMetrics> history;
  int64_t best_epoch = 0;
  double best_val = 0.0;
};

struct EvalReport {
  double accuracy = 0.0;
  int64_t n = 0;
  std::vector<int64_t> per_class_correct, per_class_total;
};

// ---------------------------------------------------------------------------

namespace detail {

template <class S>
void check_dataset(const ModelConfig& cfg, const ListOpsDataset& ds) {
  if (cfg.input != InputKind::id)
    throw ConfigError("the harness trains id-input models only");
  if (cfg.head != HeadType::classify_mean_latent)
    throw ConfigError("the harness needs a classification head");
  for (const auto& s : ds) {
    for (int64_t id : s.ids)
      if (id < 0 || id >= cfg.vocab)
        throw ConfigError("dataset token id " + std::to_string(id) +
                          " outside the model vocabulary " +
                          std::to_string(cfg.vocab));
    if (s.label < 0 || s.label >= cfg.num_classes)
      throw ConfigError("dataset label " + std::to_string(s.label) +
                        " outside the " + std::to_string(cfg.num_classes) +
                        " model classes");
    if (int64_t(s.ids.size()) > cfg.max_len)
      throw ConfigError("dataset sample of " + std::to_string(s.ids.size()) +
                        " tokens exceeds max_len " +
                        std::to_string(cfg.max_len));
  }
}

// Regroup a shuffled permutation into minibatches of similar-length samples:
// sort by length (stable, so the shuffle breaks ties), then deal the batch
// blocks out in a shuffled order. A short tail block stays last so the full
// blocks keep their alignment with positional batching.
inline std::vector<int64_t> bucket_order(std::vector<int64_t> order,
                                         const ListOpsDataset& ds,
                                         int64_t batch, Rng& rng) {
  const int64_t n = int64_t(order.size());
  const int64_t blocks = (n + batch - 1) / batch;
  std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
    return ds[static_cast<size_t>(a)].ids.size() <
           ds[static_cast<size_t>(b)].ids.size();
  });
  std::vector<int64_t> block(static_cast<size_t>(blocks));
  std::iota(block.begin(), block.end(), 0);
  const int64_t full = n % batch ? blocks - 1 : blocks;
  for (int64_t i = full - 1; i > 0; --i)
    std::swap(block[static_cast<size_t>(i)],
              block[static_cast<size_t>(rng.below(uint64_t(i + 1)))]);
  std::vector<int64_t> dealt;
  dealt.reserve(order.size());
  for (int64_t b : block) {
    const int64_t lo = b * batch, hi = std::min(n, lo + batch);
    for (int64_t i = lo; i < hi; ++i)
      dealt.push_back(order[static_cast<size_t>(i)]);
  }
  return dealt;
}

template <class S>
int64_t argmax_row(const Tensor<S>& logits, int64_t row) {
  const int64_t C = logits.dim(1);
  const S* p = logits.data() + row * C;
  int64_t best = 0;
  for (int64_t c = 1; c < C; ++c)
    if (p[c] > p[best]) best = c;
  return best;
}

}  // namespace detail

template <class S>
EvalReport evaluate(Model<S>& model, const ListOpsDataset& ds,
                    int64_t batch = 64) {
  detail::check_dataset<S>(model.cfg, ds);
  if (batch < 1) throw ConfigError("evaluation batch must be at least 1");
  EvalReport rep;
  rep.per_class_correct.assign(static_cast<size_t>(model.cfg.num_classes), 0);
  rep.per_class_total.assign(static_cast<size_t>(model.cfg.num_classes), 0);
  int64_t correct = 0;
  for (size_t at = 0; at < ds.size(); at += static_cast<size_t>(batch)) {
    const size_t stop = std::min(ds.size(), at + static_cast<size_t>(batch));
    std::vector<std::vector<int64_t>> ids;
    ids.reserve(stop - at);
    for (size_t i = at; i < stop; ++i) ids.push_back(ds[i].ids);
    auto fwd = model.forward_ids(ids);
    for (size_t i = at; i < stop; ++i) {
      const int64_t pred =
          detail::argmax_row(fwd.logits, int64_t(i - at));
      const size_t label = static_cast<size_t>(ds[i].label);
      ++rep.per_class_total[label];
      if (pred == ds[i].label) {
        ++rep.per_class_correct[label];
        ++correct;
      }
    }
  }
  rep.n = int64_t(ds.size());
  rep.accuracy = rep.n ? double(correct) / double(rep.n) : 0.0;
  return rep;
}

// ---------------------------------------------------------------------------

using EpochHook = std::function<void(const EpochMetrics&)>;

// Full supervised run: shuffled minibatches in micro shards with an ordered
// gradient reduction, global-norm clip, AdamW under the warmup-cosine
// schedule, one validation pass per epoch, best-validation weights retained.
template <class S>
TrainResult<S> train(const TrainConfig& cfg, const ListOpsDataset& train_set,
                     const ListOpsDataset& val_set,
                     const EpochHook& on_epoch = {}) {
  cfg.validate();
  if (train_set.empty()) throw ConfigError("empty training set");
  auto model = Model<S>::init(cfg.model, cfg.seed);
  detail::check_dataset<S>(model.cfg, train_set);
  detail::check_dataset<S>(model.cfg, val_set);

  AdamW<S> opt;
  opt.hyper.weight_decay = cfg.weight_decay;
  opt.init(model);

  const int64_t n = int64_t(train_set.size());
  const int64_t steps_per_epoch = (n + cfg.batch - 1) / cfg.batch;
  const int64_t total_steps = steps_per_epoch * cfg.epochs;
  const int64_t warmup_steps = steps_per_epoch * cfg.warmup_epochs;
  constexpr int64_t kShard = 8;

  Rng shuffle_rng(cfg.seed, "shuffle");
  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);

  TrainResult<S> result;
  std::vector<std::vector<S>> best;
  std::vector<std::vector<S>> grads(model.named.size());
  int64_t step = 0;

  for (int64_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (int64_t i = n - 1; i > 0; --i)
      std::swap(order[static_cast<size_t>(i)],
                order[static_cast<size_t>(shuffle_rng.below(uint64_t(i + 1)))]);
    if (cfg.bucket_by_length)
      order = detail::bucket_order(std::move(order), train_set, cfg.batch,
                                   shuffle_rng);

    double loss_sum = 0.0, lr_last = 0.0;
    int64_t correct = 0;
    for (int64_t at = 0; at < n; at += cfg.batch) {
      const int64_t stop = std::min(n, at + cfg.batch);
      const double lr = cosine_warmup(step, total_steps, warmup_steps,
                                      cfg.peak_lr);
      lr_last = lr;
      for (size_t g = 0; g < grads.size(); ++g)
        grads[g].assign(model.named[g].second.size(), S(0));

      for (int64_t shard_at = at; shard_at < stop; shard_at += kShard) {
        const int64_t shard_stop = std::min(stop, shard_at + kShard);
        std::vector<std::vector<int64_t>> ids;
        std::vector<int64_t> labels;
        for (int64_t i = shard_at; i < shard_stop; ++i) {
          const auto& s = train_set[static_cast<size_t>(order[size_t(i)])];
          ids.push_back(s.ids);
          labels.push_back(s.label);
        }
        Rng drop_rng(cfg.seed, "drop." + std::to_string(step) + "." +
                                   std::to_string(shard_at - at));
        try {
          for (auto& [name, t] : model.named) t.zero_grad();
          Tape<S> tape;
          typename Tape<S>::Scope scope(tape);
          ForwardOptions opts;
          opts.drop_rng = &drop_rng;
          auto fwd = model.forward_ids(ids, opts);
          auto loss = cross_entropy(fwd.logits, labels);
          loss_sum += double(loss.item()) * double(labels.size());
          for (size_t i = 0; i < labels.size(); ++i)
            if (detail::argmax_row(fwd.logits, int64_t(i)) == labels[i])
              ++correct;
          tape.backward(scale(loss, S(double(labels.size()) /
                                      double(stop - at))));
        } catch (const NumericError& e) {
          throw NumericError("epoch " + std::to_string(epoch) + ", step " +
                             std::to_string(step + 1) + ": " + e.what());
        }
        for (size_t g = 0; g < grads.size(); ++g) {
          const auto& pg = model.named[g].second.grad();
          if (pg.empty()) continue;
          for (size_t k = 0; k < grads[g].size(); ++k) grads[g][k] += pg[k];
        }
      }

      clip_global_norm(grads, cfg.clip_norm);
      opt.step(model, grads, lr);
      ++step;
    }

    EpochMetrics em;
    em.epoch = epoch;
    em.lr = lr_last;
    em.train_loss = loss_sum / double(n);
    em.train_acc = double(correct) / double(n);
    em.val_acc = evaluate(model, val_set).accuracy;
    result.history.push_back(em);
    if (on_epoch) on_epoch(em);

    if (result.best_epoch == 0 || em.val_acc > result.best_val) {
      result.best_val = em.val_acc;
      result.best_epoch = epoch;
      best.clear();
      for (const auto& [name, t] : model.named) best.push_back(t.values());
    }
  }

  for (size_t i = 0; i < best.size(); ++i)
    model.named[i].second.values() = best[i];
  result.model = std::move(model);
  return result;
}

}  // namespace bixt
