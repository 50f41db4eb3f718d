// Command-line front end: dataset generation, training, evaluation,
// ablations, and embedding export over the library in include/.
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "protoprop/trainer.hpp"

namespace fs = std::filesystem;
using namespace protoprop;

namespace {

std::pair<std::size_t, std::size_t> parse_ratio(const std::string& text) {
  const auto colon = text.find(':');
  if (colon == std::string::npos) {
    throw ContractError("ratio must look like U:S, got '" + text + "'");
  }
  return {detail::parse_uint("ratio", text.substr(0, colon)),
          detail::parse_uint("ratio", text.substr(colon + 1))};
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    seeds.push_back(detail::parse_uint("seeds", item));
  }
  if (seeds.empty()) throw ContractError("no seeds given");
  return seeds;
}

const SplitData& pick_split(const Dataset& ds, const std::string& name) {
  if (name == "train") return ds.train;
  if (name == "val") return ds.val;
  if (name == "test") return ds.test;
  throw ContractError("split must be train, val, or test, got '" + name +
                      "'");
}

// Config assembly shared by train/ablate: file first, then flag overrides
// routed through the same parser as the file keys.
struct ConfigArgs {
  std::string config_path;
  std::map<std::string, std::string> overrides;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "config file (key = value)");
    static const char* keys[] = {
        "dataset",        "epochs",        "batch_size",
        "learning_rate",  "weight_decay",  "lambda_h",
        "clst_weight",    "sep_weight",    "ce_attr_weight",
        "ce_obj_weight",  "ce_comp_weight","prototype_dim",
        "graph_hidden",   "bias_grid",     "seed",
        "finetune_backbone", "independence", "optimizer"};
    for (const char* key : keys) {
      cmd->add_option_function<std::string>(
          std::string("--") + key,
          [this, key](const std::string& v) { overrides[key] = v; },
          "override config key " + std::string(key));
    }
  }

  TrainConfig resolve() const {
    TrainConfig cfg =
        config_path.empty() ? TrainConfig{} : load_config(config_path);
    for (const auto& [key, value] : overrides) {
      set_config_field(cfg, key, value);
    }
    cfg.validate();
    return cfg;
  }
};

int run_gen_data(std::size_t attrs, std::size_t objs,
                 const std::string& ratio, std::uint64_t seed, bool bias,
                 std::size_t train_per_seen, std::size_t val_per_class,
                 std::size_t test_per_class, const std::string& out) {
  SplitSpec spec;
  std::tie(spec.ratio_unseen, spec.ratio_seen) = parse_ratio(ratio);
  spec.seed = seed;
  spec.bias_mode = bias;
  spec.train_per_seen = train_per_seen;
  spec.val_per_class = val_per_class;
  spec.test_per_class = test_per_class;
  const PrimitiveVocab vocab = mini_vocab(attrs, objs);
  const Dataset ds = generate_dataset(vocab, spec);
  save_dataset(ds, out);
  std::cout << "wrote " << out << ": " << ds.train.size() << " train, "
            << ds.val.size() << " val, " << ds.test.size() << " test; "
            << ds.seen.size() << " seen / " << ds.unseen.size()
            << " unseen compositions\n";
  return 0;
}

int run_train(const ConfigArgs& args, const std::string& out) {
  const TrainConfig cfg = args.resolve();
  const TrainResult result = train(cfg);
  fs::create_directories(out);
  std::ofstream mf(fs::path(out) / "metrics.log");
  if (!mf) throw ContractError("cannot write metrics.log under " + out);
  write_metrics(result.metrics, mf);
  mf.close();
  save_checkpoint(result.best, fs::path(out) / "checkpoint");
  const nlohmann::json rep = report_json(result);
  std::ofstream rf(fs::path(out) / "report.json");
  rf << rep.dump(2) << "\n";
  rf.close();
  std::cout << rep.dump(2) << "\n";
  return 0;
}

int run_eval(const std::string& checkpoint, const std::string& dataset,
             const std::string& split, std::size_t grid,
             const std::string& curve_out) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const Dataset ds = load_dataset(dataset);
  const std::size_t steps = grid > 0 ? grid : ck.config.bias_grid;
  const ScoreMatrix sm =
      score_split(ck.model, pick_split(ds, split), unseen_mask(ds));
  const EvalReport rep = report(sm, steps);
  write_report(rep, std::cout);
  if (!curve_out.empty()) {
    std::ofstream cf(curve_out);
    if (!cf) throw ContractError("cannot write " + curve_out);
    write_curve(rep.curve, cf);
  }
  return 0;
}

int run_ablate(const ConfigArgs& args, const std::string& seeds_text,
               const std::string& out) {
  const TrainConfig cfg = args.resolve();
  if (cfg.dataset.empty()) {
    throw ContractError("ablate: config gives no dataset path");
  }
  const Dataset ds = load_dataset(cfg.dataset);
  const AblationTable table =
      ablation_suite(ds, cfg, parse_seeds(seeds_text));
  const std::string text = format_ablation(table);
  std::cout << text;
  if (!out.empty()) {
    std::ofstream of(out);
    if (!of) throw ContractError("cannot write " + out);
    of << text;
  }
  return 0;
}

int run_export(const std::string& checkpoint, const std::string& dataset,
               const std::string& split, const std::string& out) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const Dataset ds = load_dataset(dataset);
  export_embeddings(ck.model, pick_split(ds, split), out);
  std::cout << "wrote " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"prototype-propagation compositional zero-shot learner"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  std::size_t attrs = 8, objs = 3;
  std::string ratio = "2:8";
  std::uint64_t gen_seed = 1;
  bool bias = false;
  std::size_t train_per_seen = 50, val_per_class = 20, test_per_class = 20;
  std::string gen_out;
  gen->add_option("--attrs", attrs, "number of attributes (max 8)");
  gen->add_option("--objs", objs, "number of objects (max 3)");
  gen->add_option("--ratio", ratio, "unseen:seen ratio, e.g. 2:8");
  gen->add_option("--seed", gen_seed, "generation seed");
  gen->add_flag("--bias-mode", bias,
                "tint backgrounds by object class in the train split");
  gen->add_option("--train-per-seen", train_per_seen,
                  "train samples per seen composition");
  gen->add_option("--val-per-class", val_per_class,
                  "validation samples per composition");
  gen->add_option("--test-per-class", test_per_class,
                  "test samples per composition");
  gen->add_option("--out", gen_out, "output directory")->required();

  // train
  auto* tr = app.add_subcommand("train", "train a model");
  ConfigArgs train_args;
  train_args.attach(tr);
  std::string train_out = "run";
  tr->add_option("--out", train_out,
                 "output directory for checkpoint, metrics.log, report.json");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  std::string ev_ckpt, ev_data, ev_split = "test", ev_curve;
  std::size_t ev_grid = 0;
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint directory")->required();
  ev->add_option("--dataset", ev_data, "dataset directory")->required();
  ev->add_option("--split", ev_split, "train, val, or test");
  ev->add_option("--grid", ev_grid, "bias grid steps (default: from config)");
  ev->add_option("--curve-out", ev_curve, "write the sweep curve here");

  // ablate
  auto* ab = app.add_subcommand("ablate", "run the four-arm ablation");
  ConfigArgs ablate_args;
  ablate_args.attach(ab);
  std::string seeds_text = "1,2,3", ablate_out;
  ab->add_option("--seeds", seeds_text, "comma-separated seeds");
  ab->add_option("--out", ablate_out, "also write the table to this file");

  // export-embeddings
  auto* ex = app.add_subcommand("export-embeddings",
                                "export pooled attribute embeddings");
  std::string ex_ckpt, ex_data, ex_split = "val", ex_out;
  ex->add_option("--checkpoint", ex_ckpt, "checkpoint directory")->required();
  ex->add_option("--dataset", ex_data, "dataset directory")->required();
  ex->add_option("--split", ex_split, "train, val, or test");
  ex->add_option("--out", ex_out, "output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      return run_gen_data(attrs, objs, ratio, gen_seed, bias, train_per_seen,
                          val_per_class, test_per_class, gen_out);
    }
    if (tr->parsed()) return run_train(train_args, train_out);
    if (ev->parsed()) {
      return run_eval(ev_ckpt, ev_data, ev_split, ev_grid, ev_curve);
    }
    if (ab->parsed()) return run_ablate(ablate_args, seeds_text, ablate_out);
    if (ex->parsed()) return run_export(ex_ckpt, ex_data, ex_split, ex_out);
  } catch (const NumericError& e) {
    std::cerr << "numeric abort: " << e.what() << "\n";
    return 2;
  } catch (const ContractError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
