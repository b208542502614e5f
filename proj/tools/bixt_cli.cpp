#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "bixt/checkpoint.hpp"
#include "bixt/instrument.hpp"
#include "bixt/train.hpp"

namespace fs = std::filesystem;
using namespace bixt;

namespace {

// Full run description: model, optimization and data source. Strict keys,
// every field defaulted. Dataset files win over generation when given.
struct RunConfig {
  TrainConfig train;
  std::string train_tsv, val_tsv;
};

Json data_to_json(const DataSpec& d) {
  Json j;
  j["max_len"] = d.max_len;
  j["max_depth"] = d.max_depth;
  j["train_n"] = d.train_n;
  j["val_n"] = d.val_n;
  j["test_n"] = d.test_n;
  return j;
}

DataSpec data_from_json(const Json& j) {
  if (!j.is_object()) throw ConfigError("config: 'data' must be an object");
  DataSpec d;
  for (const auto& [key, v] : j.items()) {
    if (key == "max_len")
      d.max_len = detail::as_int(v, key);
    else if (key == "max_depth")
      d.max_depth = detail::as_int(v, key);
    else if (key == "train_n")
      d.train_n = detail::as_int(v, key);
    else if (key == "val_n")
      d.val_n = detail::as_int(v, key);
    else if (key == "test_n")
      d.test_n = detail::as_int(v, key);
    else
      throw ConfigError("config: unknown key 'data." + key + "'");
  }
  return d;
}

Json run_to_json(const RunConfig& rc) {
  Json j;
  j["model"] = config_to_json(rc.train.model);
  j["epochs"] = rc.train.epochs;
  j["batch"] = rc.train.batch;
  j["peak_lr"] = rc.train.peak_lr;
  j["warmup_epochs"] = rc.train.warmup_epochs;
  j["weight_decay"] = rc.train.weight_decay;
  j["clip_norm"] = rc.train.clip_norm;
  j["bucket_by_length"] = rc.train.bucket_by_length;
  j["seed"] = rc.train.seed;
  j["data"] = data_to_json(rc.train.data);
  j["train_tsv"] = rc.train_tsv;
  j["val_tsv"] = rc.val_tsv;
  return j;
}

RunConfig run_from_json(const Json& j) {
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  RunConfig rc;
  for (const auto& [key, v] : j.items()) {
    if (key == "model")
      rc.train.model = config_from_json(v);
    else if (key == "epochs")
      rc.train.epochs = detail::as_int(v, key);
    else if (key == "batch")
      rc.train.batch = detail::as_int(v, key);
    else if (key == "peak_lr")
      rc.train.peak_lr = detail::as_double(v, key);
    else if (key == "warmup_epochs")
      rc.train.warmup_epochs = detail::as_int(v, key);
    else if (key == "weight_decay")
      rc.train.weight_decay = detail::as_double(v, key);
    else if (key == "clip_norm")
      rc.train.clip_norm = detail::as_double(v, key);
    else if (key == "bucket_by_length") {
      if (!v.is_boolean())
        throw ConfigError("config: key 'bucket_by_length' must be a boolean");
      rc.train.bucket_by_length = v.get<bool>();
    } else if (key == "seed") {
      if (!v.is_number_integer() || v.get<int64_t>() < 0)
        throw ConfigError("config: key 'seed' must be a non-negative integer");
      rc.train.seed = v.get<uint64_t>();
    } else if (key == "data")
      rc.train.data = data_from_json(v);
    else if (key == "train_tsv")
      rc.train_tsv = detail::as_string(v, key);
    else if (key == "val_tsv")
      rc.val_tsv = detail::as_string(v, key);
    else
      throw ConfigError("config: unknown key '" + key + "'");
  }
  rc.train.validate();
  return rc;
}

Json read_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file " + path);
  Json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
  return j;
}

ListOpsDataset load_tsv_warned(const std::string& path) {
  std::string warning;
  auto ds = load_lra_tsv(path, &warning);
  if (!warning.empty()) std::cerr << "warning: " << warning << "\n";
  return ds;
}

// ---------------------------------------------------------------------------

int cmd_train(const std::string& config_path, uint64_t seed, bool seed_given,
              const std::string& out) {
  RunConfig rc = run_from_json(read_json_file(config_path));
  if (seed_given) rc.train.seed = seed;

  ListOpsDataset train_set, val_set;
  if (!rc.train_tsv.empty()) {
    train_set = load_tsv_warned(rc.train_tsv);
    if (!rc.val_tsv.empty()) val_set = load_tsv_warned(rc.val_tsv);
  } else {
    const DataSpec& d = rc.train.data;
    train_set =
        listops_generate(d.train_n, d.max_len, d.max_depth, rc.train.seed);
    if (d.val_n > 0)
      val_set =
          listops_generate(d.val_n, d.max_len, d.max_depth, rc.train.seed + 1);
  }

  fs::create_directories(out);
  std::ofstream metrics(out + "/metrics.jsonl", std::ios::binary);
  if (!metrics) throw IoError("cannot open " + out + "/metrics.jsonl");

  auto result = train<double>(
      rc.train, train_set, val_set, [&](const EpochMetrics& em) {
        Json j;
        j["epoch"] = em.epoch;
        j["lr"] = em.lr;
        j["train_loss"] = em.train_loss;
        j["train_acc"] = em.train_acc;
        j["val_acc"] = em.val_acc;
        metrics << j.dump() << "\n";
        metrics.flush();
        std::fprintf(stderr, "epoch %3lld  loss %.4f  acc %.3f  val %.3f\n",
                     (long long)em.epoch, em.train_loss, em.train_acc,
                     em.val_acc);
      });

  save_checkpoint(result.model, out + "/best.ckpt", rc.train.seed);
  {
    std::ofstream frozen(out + "/config.json", std::ios::binary);
    if (!frozen) throw IoError("cannot open " + out + "/config.json");
    frozen << run_to_json(rc).dump(2) << "\n";
  }

  Json summary;
  summary["best_epoch"] = result.best_epoch;
  summary["best_val"] = result.best_val;
  summary["epochs"] = int64_t(result.history.size());
  summary["checkpoint"] = out + "/best.ckpt";
  std::cout << summary.dump() << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_path,
             int64_t batch) {
  auto model = load_checkpoint<double>(ckpt_path);
  auto ds = load_tsv_warned(data_path);
  auto rep = evaluate(model, ds, batch);
  Json per = Json::array();
  for (size_t c = 0; c < rep.per_class_total.size(); ++c) {
    Json row;
    row["class"] = int64_t(c);
    row["correct"] = rep.per_class_correct[c];
    row["total"] = rep.per_class_total[c];
    per.push_back(row);
  }
  Json out;
  out["accuracy"] = rep.accuracy;
  out["n"] = rep.n;
  out["per_class"] = per;
  std::cout << out.dump() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> parts;
  size_t at = 0;
  while (at <= s.size()) {
    const size_t comma = s.find(',', at);
    const size_t stop = comma == std::string::npos ? s.size() : comma;
    if (stop > at) parts.push_back(s.substr(at, stop - at));
    if (comma == std::string::npos) break;
    at = comma + 1;
  }
  return parts;
}

int cmd_flops(const std::string& config_path, const std::string& preset,
              const std::string& shapes_csv, const std::string& baseline,
              int64_t tokens) {
  if (config_path.empty() == preset.empty())
    throw ConfigError("give exactly one of --config or --preset");
  ModelConfig cfg = preset.empty()
                        ? config_from_json(read_json_file(config_path))
                        : preset_config(preset);

  if (shapes_csv.empty()) {
    const int64_t n = tokens > 0 ? tokens : cfg.token_count();
    auto rep = flop_count(cfg, n);
    std::fprintf(stderr,
                 "%-24s %15s %15s %15s\n", "", "linear", "attention", "total");
    std::fprintf(stderr, "%-24s %15lld %15lld %15lld\n", "macs",
                 (long long)rep.linear, (long long)rep.attention,
                 (long long)rep.flops());
    std::fprintf(stderr, "params %lld  activations %lld  tokens %lld\n",
                 (long long)rep.params, (long long)rep.activations,
                 (long long)n);
    Json out;
    out["n_tokens"] = n;
    out["linear"] = rep.linear;
    out["attention"] = rep.attention;
    out["flops"] = rep.flops();
    out["params"] = rep.params;
    out["activations"] = rep.activations;
    std::cout << out.dump() << "\n";
    return 0;
  }

  std::vector<std::string> shapes = split_csv(shapes_csv);
  if (shapes.empty()) throw ConfigError("--shapes lists no shapes");
  std::vector<std::string> ordered = shapes;
  if (!baseline.empty()) {
    ordered.clear();
    ordered.push_back(baseline);
    for (const auto& s : shapes)
      if (s != baseline) ordered.push_back(s);
  }
  auto rows = scaling_table(cfg, ordered);
  Json out = Json::array();
  std::fprintf(stderr, "%-12s %8s %15s %10s %10s\n", "shape", "tokens",
               "flops", "flops x", "acts x");
  for (const auto& r : rows) {
    if (!baseline.empty() && r.label == baseline &&
        std::find(shapes.begin(), shapes.end(), baseline) == shapes.end() &&
        &r != &rows.front())
      continue;
    std::fprintf(stderr, "%-12s %8lld %15lld %10.2f %10.2f\n",
                 r.label.c_str(), (long long)r.n_tokens, (long long)r.flops,
                 r.flop_ratio, r.act_ratio);
    Json row;
    row["shape"] = r.label;
    row["n_tokens"] = r.n_tokens;
    row["flops"] = r.flops;
    row["activations"] = r.activations;
    row["flop_ratio"] = r.flop_ratio;
    row["act_ratio"] = r.act_ratio;
    out.push_back(row);
  }
  std::cout << out.dump() << "\n";
  return 0;
}

int cmd_dof(int64_t latents, int64_t tokens) {
  auto r = dof_calc(latents, tokens);
  std::fprintf(stderr, "total %lld  shared %lld  unique %lld\n",
               (long long)r.total, (long long)r.shared, (long long)r.unique);
  Json out;
  out["latents"] = latents;
  out["tokens"] = tokens;
  out["total"] = r.total;
  out["shared"] = r.shared;
  out["unique"] = r.unique;
  std::cout << out.dump() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

int cmd_gradcheck(const std::string& config_path, const std::string& preset,
                  int64_t seeds, double tol) {
  ModelConfig cfg;
  if (!config_path.empty() && !preset.empty())
    throw ConfigError("give at most one of --config or --preset");
  if (!config_path.empty())
    cfg = config_from_json(read_json_file(config_path));
  else if (!preset.empty())
    cfg = preset_config(preset);
  else {
    cfg.layers = 2;
    cfg.latents = 2;
    cfg.dim = 8;
    cfg.heads = 2;
    cfg.mlp_ratio = 1.5;
    cfg.num_classes = 4;
    cfg.vocab = 12;
    cfg.max_len = 8;
  }
  if (seeds < 1) throw ConfigError("--seeds must be at least 1");

  double worst = 0.0;
  std::string worst_param = "none";
  for (int64_t s = 1; s <= seeds; ++s) {
    auto m = Model<double>::init(cfg, uint64_t(s));
    Rng hr(uint64_t(s), "gradcheck.head");
    for (auto& x : m.head.w.values()) x = hr.normal() * 0.05;

    Rng ir(uint64_t(s), "gradcheck.input");
    std::vector<std::vector<int64_t>> ids(2);
    std::vector<int64_t> labels;
    for (auto& seq : ids) {
      const int64_t len = 3 + int64_t(ir.below(uint64_t(cfg.max_len - 2)));
      for (int64_t i = 0; i < len; ++i)
        seq.push_back(1 + int64_t(ir.below(uint64_t(cfg.vocab - 1))));
      labels.push_back(int64_t(ir.below(uint64_t(cfg.num_classes))));
    }
    auto fn = [&] { return cross_entropy(m.forward_ids(ids).logits, labels); };
    std::vector<Tensor<double>> params;
    for (auto& [name, t] : m.named) params.push_back(t);
    auto report = grad_check(fn, params, 1e-5);
    if (report.max_rel_err > worst) {
      worst = report.max_rel_err;
      worst_param = report.worst_param;
    }
    std::fprintf(stderr, "seed %lld  max rel err %.3e\n", (long long)s,
                 report.max_rel_err);
  }
  Json out;
  out["seeds"] = seeds;
  out["tol"] = tol;
  out["max_rel_err"] = worst;
  out["worst_param"] = worst_param;
  out["ok"] = worst < tol;
  std::cout << out.dump() << "\n";
  if (worst >= tol) throw NumericError("gradient check exceeded tolerance");
  return 0;
}

int cmd_gen_data(const std::string& out_dir, int64_t train_n, int64_t val_n,
                 int64_t test_n, int64_t max_len, int64_t max_depth,
                 uint64_t seed) {
  fs::create_directories(out_dir);
  Json out;
  out["dir"] = out_dir;
  const std::pair<const char*, int64_t> splits[] = {
      {"train", train_n}, {"val", val_n}, {"test", test_n}};
  uint64_t split_seed = seed;
  for (const auto& [name, n] : splits) {
    if (n > 0) {
      const std::string path = out_dir + "/" + name + ".tsv";
      write_lra_tsv(listops_generate(n, max_len, max_depth, split_seed), path);
      out[name] = n;
      out[std::string(name) + "_path"] = path;
    }
    ++split_seed;
  }
  std::cout << out.dump() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

// Small patch-input demonstration model for map exports without a trained
// checkpoint: one latent, twelve layers, a fourteen by fourteen token grid.
Model<double> synth_model() {
  ModelConfig cfg;
  cfg.layers = 12;
  cfg.latents = 1;
  cfg.dim = 16;
  cfg.heads = 2;
  cfg.mlp_ratio = 2.0;
  cfg.num_classes = 10;
  cfg.input = InputKind::patch;
  cfg.patch = PatchSpec{16, 16, 224, 224, 3};
  return Model<double>::init(cfg, 1);
}

int cmd_inspect(const std::string& ckpt_path, bool synth,
                const std::string& text, const std::string& out_dir,
                const std::string& grid) {
  if (synth == !ckpt_path.empty())
    throw ConfigError("give exactly one of --checkpoint or --synth");
  Model<double> model = synth ? synth_model() : load_checkpoint<double>(ckpt_path);

  ForwardOptions opts;
  opts.export_attention = true;
  ForwardResult<double> fwd;
  if (model.cfg.input == InputKind::id) {
    const std::string source = text.empty() ? "[MAX 2 9 [MIN 4 7 ] 0 ]" : text;
    fwd = model.forward_ids({listops_tokenize(source)}, opts);
  } else {
    Rng rng(1, "inspect.image");
    auto img = Tensor<double>::randn(
        {model.cfg.patch.height, model.cfg.patch.width,
         model.cfg.patch.channels},
        rng);
    fwd = model.forward_image(img, opts);
  }

  int64_t gh = 0, gw = 0;
  if (!grid.empty()) {
    const size_t x = grid.find('x');
    size_t used = 0;
    try {
      gh = std::stoll(grid.substr(0, x), &used);
      if (x == std::string::npos || used != x) throw std::invalid_argument("");
      gw = std::stoll(grid.substr(x + 1), &used);
      if (used != grid.size() - x - 1) throw std::invalid_argument("");
    } catch (const std::exception&) {
      throw ConfigError("--grid expects HxW, got '" + grid + "'");
    }
  } else if (model.cfg.input == InputKind::patch) {
    gh = model.cfg.patch.grid_h();
    gw = model.cfg.patch.grid_w();
  }

  fs::create_directories(out_dir);
  auto paths = export_attention(fwd.records, out_dir, gh, gw);
  Json out;
  out["dir"] = out_dir;
  out["layers"] = int64_t(fwd.records.size());
  out["csv"] = int64_t(paths.csv.size());
  out["pgm"] = int64_t(paths.pgm.size());
  std::cout << out.dump() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bi-directional cross-attention workbench"};
  app.require_subcommand(1);
  std::function<int()> action;

  std::string config_path, out_dir = "bixt_run";
  uint64_t seed = 0;
  auto* t = app.add_subcommand("train", "train a model on listops data");
  t->add_option("--config", config_path, "run config json")->required();
  auto* seed_opt = t->add_option("--seed", seed, "override the config seed");
  t->add_option("--out", out_dir, "output directory (default bixt_run)");
  t->callback([&] {
    action = [&, given = seed_opt->count() > 0] {
      return cmd_train(config_path, seed, given, out_dir);
    };
  });

  std::string ckpt_path, data_path;
  int64_t eval_batch = 64;
  auto* e = app.add_subcommand("eval", "evaluate a checkpoint on a tsv file");
  e->add_option("--checkpoint", ckpt_path, "checkpoint path")->required();
  e->add_option("--data", data_path, "tsv dataset path")->required();
  e->add_option("--batch", eval_batch, "evaluation batch size");
  e->callback(
      [&] { action = [&] { return cmd_eval(ckpt_path, data_path, eval_batch); }; });

  std::string preset, shapes_csv, baseline;
  int64_t tokens = 0;
  auto* f = app.add_subcommand("flops", "analytic cost model");
  f->add_option("--config", config_path, "model config json");
  f->add_option("--preset", preset,
                "bixt_ti16, bixt_lra_listops or transformer_lra_listops");
  f->add_option("--shapes", shapes_csv,
                "comma list of token counts or image shapes like 384/p8");
  f->add_option("--baseline", baseline, "shape the ratios are relative to");
  f->add_option("--tokens", tokens, "token count for a single report");
  f->callback([&] {
    action = [&] {
      return cmd_flops(config_path, preset, shapes_csv, baseline, tokens);
    };
  });

  int64_t latents = 0;
  auto* d = app.add_subcommand("dof", "similarity degrees of freedom");
  d->add_option("--latents", latents, "latent count")->required();
  d->add_option("--tokens", tokens, "token count")->required();
  d->callback([&] { action = [&] { return cmd_dof(latents, tokens); }; });

  int64_t seeds = 3;
  double tol = 1e-4;
  auto* g = app.add_subcommand("gradcheck", "finite difference audit");
  g->add_option("--config", config_path, "model config json");
  g->add_option("--preset", preset, "named preset");
  g->add_option("--seeds", seeds, "number of seeds (default 3)");
  g->add_option("--tol", tol, "relative error tolerance");
  g->callback([&] {
    action = [&] { return cmd_gradcheck(config_path, preset, seeds, tol); };
  });

  int64_t train_n = 10000, val_n = 1000, test_n = 1000;
  int64_t max_len = 128, max_depth = 3;
  auto* gen = app.add_subcommand("gen-data", "write listops tsv splits");
  gen->add_option("--out", out_dir, "output directory")->required();
  gen->add_option("--train", train_n, "training samples");
  gen->add_option("--val", val_n, "validation samples");
  gen->add_option("--test", test_n, "test samples");
  gen->add_option("--max-len", max_len, "token budget per expression");
  gen->add_option("--max-depth", max_depth, "operator nesting budget");
  gen->add_option("--seed", seed, "generation seed");
  gen->callback([&] {
    action = [&] {
      return cmd_gen_data(out_dir, train_n, val_n, test_n, max_len, max_depth,
                          seed);
    };
  });

  std::string text, grid;
  bool synth = false;
  auto* ins = app.add_subcommand("inspect-attention",
                                 "export per layer and head attention maps");
  ins->add_option("--checkpoint", ckpt_path, "checkpoint path");
  ins->add_flag("--synth", synth, "use a built-in demonstration model");
  ins->add_option("--input", text, "listops source text for id models");
  ins->add_option("--out", out_dir, "output directory")->required();
  ins->add_option("--grid", grid, "token grid HxW for pgm rendering");
  ins->callback([&] {
    action = [&] { return cmd_inspect(ckpt_path, synth, text, out_dir, grid); };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : 2;
  }

  try {
    return action ? action() : 2;
  } catch (const NumericError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 3;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 2;
  }
}
