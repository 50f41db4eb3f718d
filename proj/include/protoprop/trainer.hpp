#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "protoprop/compgraph.hpp"
#include "protoprop/dataset_io.hpp"
#include "protoprop/evalzsl.hpp"
#include "protoprop/independence.hpp"
#include "protoprop/protolayer.hpp"
#include "protoprop/synthdata.hpp"
#include "protoprop/tape.hpp"
#include "protoprop/tensor_io.hpp"

namespace protoprop {

// Seed-derivation tags keeping every random stream of a run distinct.
inline constexpr std::uint64_t kSeedBackbone = 0x6b61;
inline constexpr std::uint64_t kSeedAttrProtos = 0x6b62;
inline constexpr std::uint64_t kSeedObjProtos = 0x6b63;
inline constexpr std::uint64_t kSeedPropagation = 0x6b64;
inline constexpr std::uint64_t kSeedShuffle = 0x6b65;

// Defaults are desk-scale: training starts from random weights, so the
// independence weight and learning rate sit well below the values used
// with a pretrained full-scale backbone (those remain reachable through
// the config).
struct TrainConfig {
  std::string dataset;  // directory holding a saved dataset
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double learning_rate = 2e-3;
  double weight_decay = 5e-5;
  double lambda_h = 1.0;
  double clst_weight = 0.01;
  double sep_weight = 0.01;
  double ce_attr_weight = 1.0;
  double ce_obj_weight = 1.0;
  double ce_comp_weight = 1.0;
  std::size_t prototype_dim = 64;
  std::size_t graph_hidden = 128;
  std::size_t bias_grid = kDefaultBiasSteps;
  std::uint64_t seed = 1;
  bool finetune_backbone = true;
  bool independence = true;
  std::string optimizer = "adam";  // or "sgd" (momentum 0.9)

  void validate() const {
    if (batch_size < 1) throw ContractError("config: batch_size must be >= 1");
    if (!(learning_rate > 0.0)) {
      throw ContractError("config: learning_rate must be > 0");
    }
    const std::pair<const char*, double> weights[] = {
        {"weight_decay", weight_decay},   {"lambda_h", lambda_h},
        {"clst_weight", clst_weight},     {"sep_weight", sep_weight},
        {"ce_attr_weight", ce_attr_weight}, {"ce_obj_weight", ce_obj_weight},
        {"ce_comp_weight", ce_comp_weight}};
    for (const auto& [name, v] : weights) {
      if (!(v >= 0.0) || !std::isfinite(v)) {
        throw ContractError(std::string("config: ") + name +
                            " must be finite and >= 0");
      }
    }
    if (prototype_dim < 1) {
      throw ContractError("config: prototype_dim must be >= 1");
    }
    if (graph_hidden < 1) {
      throw ContractError("config: graph_hidden must be >= 1");
    }
    if (bias_grid < 2) throw ContractError("config: bias_grid must be >= 2");
    if (optimizer != "sgd" && optimizer != "adam") {
      throw ContractError("config: optimizer must be 'sgd' or 'adam'");
    }
  }
};

namespace detail {

inline bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ContractError("config: " + key + " expects true/false, got '" +
                      value + "'");
}

inline double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ContractError("config: " + key + " expects a number, got '" +
                        value + "'");
  }
}

inline std::uint64_t parse_uint(const std::string& key,
                                const std::string& value) {
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(value, &used);
    if (used != value.size() || value.front() == '-') {
      throw std::invalid_argument(value);
    }
    return v;
  } catch (const std::exception&) {
    throw ContractError("config: " + key +
                        " expects a nonnegative integer, got '" + value + "'");
  }
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

// Applies one `key = value` setting; used by both the config file parser
// and CLI flag overrides so the two spellings cannot drift apart.
inline void set_config_field(TrainConfig& cfg, const std::string& key,
                             const std::string& value) {
  using detail::parse_bool;
  using detail::parse_double;
  using detail::parse_uint;
  if (key == "dataset") {
    cfg.dataset = value;
  } else if (key == "epochs") {
    cfg.epochs = parse_uint(key, value);
  } else if (key == "batch_size") {
    cfg.batch_size = parse_uint(key, value);
  } else if (key == "learning_rate") {
    cfg.learning_rate = parse_double(key, value);
  } else if (key == "weight_decay") {
    cfg.weight_decay = parse_double(key, value);
  } else if (key == "lambda_h") {
    cfg.lambda_h = parse_double(key, value);
  } else if (key == "clst_weight") {
    cfg.clst_weight = parse_double(key, value);
  } else if (key == "sep_weight") {
    cfg.sep_weight = parse_double(key, value);
  } else if (key == "ce_attr_weight") {
    cfg.ce_attr_weight = parse_double(key, value);
  } else if (key == "ce_obj_weight") {
    cfg.ce_obj_weight = parse_double(key, value);
  } else if (key == "ce_comp_weight") {
    cfg.ce_comp_weight = parse_double(key, value);
  } else if (key == "prototype_dim") {
    cfg.prototype_dim = parse_uint(key, value);
  } else if (key == "graph_hidden") {
    cfg.graph_hidden = parse_uint(key, value);
  } else if (key == "bias_grid") {
    cfg.bias_grid = parse_uint(key, value);
  } else if (key == "seed") {
    cfg.seed = parse_uint(key, value);
  } else if (key == "finetune_backbone") {
    cfg.finetune_backbone = parse_bool(key, value);
  } else if (key == "independence") {
    cfg.independence = parse_bool(key, value);
  } else if (key == "optimizer") {
    cfg.optimizer = value;
  } else {
    throw ContractError("config: unknown key '" + key + "'");
  }
}

// Flat `key = value` text, one setting per line; blank lines and lines
// starting with '#' are ignored.
inline TrainConfig parse_config(std::istream& in) {
  TrainConfig cfg;
  std::string line;
  while (std::getline(in, line)) {
    const std::string t = detail::trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ContractError("config: expected 'key = value', got '" + t + "'");
    }
    set_config_field(cfg, detail::trim(t.substr(0, eq)),
                     detail::trim(t.substr(eq + 1)));
  }
  return cfg;
}

inline TrainConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ContractError("config: cannot open " + path);
  return parse_config(in);
}

inline nlohmann::json config_json(const TrainConfig& c) {
  return {{"dataset", c.dataset},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"weight_decay", c.weight_decay},
          {"lambda_h", c.lambda_h},
          {"clst_weight", c.clst_weight},
          {"sep_weight", c.sep_weight},
          {"ce_attr_weight", c.ce_attr_weight},
          {"ce_obj_weight", c.ce_obj_weight},
          {"ce_comp_weight", c.ce_comp_weight},
          {"prototype_dim", c.prototype_dim},
          {"graph_hidden", c.graph_hidden},
          {"bias_grid", c.bias_grid},
          {"seed", c.seed},
          {"finetune_backbone", c.finetune_backbone},
          {"independence", c.independence},
          {"optimizer", c.optimizer}};
}

inline TrainConfig config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.dataset = j.at("dataset").get<std::string>();
  c.epochs = j.at("epochs").get<std::size_t>();
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.lambda_h = j.at("lambda_h").get<double>();
  c.clst_weight = j.at("clst_weight").get<double>();
  c.sep_weight = j.at("sep_weight").get<double>();
  c.ce_attr_weight = j.at("ce_attr_weight").get<double>();
  c.ce_obj_weight = j.at("ce_obj_weight").get<double>();
  c.ce_comp_weight = j.at("ce_comp_weight").get<double>();
  c.prototype_dim = j.at("prototype_dim").get<std::size_t>();
  c.graph_hidden = j.at("graph_hidden").get<std::size_t>();
  c.bias_grid = j.at("bias_grid").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.finetune_backbone = j.at("finetune_backbone").get<bool>();
  c.independence = j.at("independence").get<bool>();
  c.optimizer = j.at("optimizer").get<std::string>();
  return c;
}

// The full learnable state plus the fixed composition graph. Composition
// prototypes are not stored: they are recomputed from the primitives by
// propagation. The propagation output width is tied to prototype_dim so
// pooled backbone features score compositions without a projection.
struct Model {
  PrimitiveVocab vocab;
  CompositionGraph graph;  // over the full |A|x|O| grid, comp-index order
  Tensor a_norm;
  FeatureExtractor fe;
  PrototypeSet attr_protos;
  PrototypeSet obj_protos;
  PropagationWeights prop;

  static Model init(const PrimitiveVocab& vocab, const TrainConfig& cfg) {
    vocab.validate();
    cfg.validate();
    Model m;
    m.vocab = vocab;
    std::vector<CompositionalLabel> all;
    for (std::size_t i = 0; i < vocab.num_comps(); ++i) {
      all.push_back(comp_from_index(i, vocab));
    }
    m.graph = build_graph(vocab, all);
    m.a_norm = normalize_adjacency(m.graph);
    Rng backbone_rng(derive_seed(cfg.seed, kSeedBackbone));
    m.fe = FeatureExtractor::he_init(cfg.prototype_dim, backbone_rng);
    Rng attr_rng(derive_seed(cfg.seed, kSeedAttrProtos));
    m.attr_protos = PrototypeSet::init(TargetKind::attribute,
                                       vocab.num_attrs(), cfg.prototype_dim,
                                       attr_rng);
    Rng obj_rng(derive_seed(cfg.seed, kSeedObjProtos));
    m.obj_protos = PrototypeSet::init(TargetKind::object, vocab.num_objs(),
                                      cfg.prototype_dim, obj_rng);
    Rng prop_rng(derive_seed(cfg.seed, kSeedPropagation));
    m.prop = PropagationWeights::init(cfg.prototype_dim, cfg.graph_hidden,
                                      cfg.prototype_dim, prop_rng);
    return m;
  }
};

struct ParamRef {
  std::string name;
  Tensor* tensor;
  bool trainable;
};

// Canonical parameter order; shared by the optimizer, the gradient
// plumbing, and the checkpoint files.
inline std::vector<ParamRef> model_parameters(Model& m, bool finetune) {
  std::vector<ParamRef> out;
  for (std::size_t s = 0; s < m.fe.stages.size(); ++s) {
    const std::string tag = "stage" + std::to_string(s);
    out.push_back({tag + "_weight", &m.fe.stages[s].weight, finetune});
    out.push_back({tag + "_bias", &m.fe.stages[s].bias, finetune});
  }
  out.push_back({"attr_prototypes", &m.attr_protos.prototypes, true});
  out.push_back({"obj_prototypes", &m.obj_protos.prototypes, true});
  out.push_back({"theta1", &m.prop.theta1, true});
  out.push_back({"theta2", &m.prop.theta2, true});
  return out;
}

// SGD with momentum 0.9 or Adam (beta1 0.9, beta2 0.999, eps 1e-8), both
// with L2 weight decay added to the raw gradient.
class Optimizer {
 public:
  Optimizer(std::string kind, double lr, double wd)
      : kind_(std::move(kind)), lr_(lr), wd_(wd) {
    if (kind_ != "sgd" && kind_ != "adam") {
      throw ContractError("optimizer must be 'sgd' or 'adam'");
    }
  }

  void step(const std::vector<ParamRef>& params,
            const std::vector<const Tensor*>& grads) {
    if (params.size() != grads.size()) {
      throw ContractError("optimizer: parameter/gradient count mismatch");
    }
    if (m_.empty()) {
      m_.resize(params.size());
      v_.resize(params.size());
    }
    ++step_;
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!params[i].trainable) continue;
      Tensor& theta = *params[i].tensor;
      const Tensor& g = *grads[i];
      if (!g.same_shape(theta)) {
        throw ShapeError("optimizer: gradient shape mismatch for " +
                         params[i].name);
      }
      if (m_[i].size() == 0) {
        m_[i] = Tensor::zeros(theta.shape());
        if (kind_ == "adam") v_[i] = Tensor::zeros(theta.shape());
      }
      if (kind_ == "sgd") {
        for (std::size_t k = 0; k < theta.size(); ++k) {
          const double gk = g.at(k) + wd_ * theta.at(k);
          m_[i].at(k) = 0.9 * m_[i].at(k) + gk;
          theta.at(k) -= lr_ * m_[i].at(k);
        }
      } else {
        const double c1 = 1.0 - std::pow(0.9, static_cast<double>(step_));
        const double c2 = 1.0 - std::pow(0.999, static_cast<double>(step_));
        for (std::size_t k = 0; k < theta.size(); ++k) {
          const double gk = g.at(k) + wd_ * theta.at(k);
          m_[i].at(k) = 0.9 * m_[i].at(k) + 0.1 * gk;
          v_[i].at(k) = 0.999 * v_[i].at(k) + 0.001 * gk * gk;
          theta.at(k) -=
              lr_ * (m_[i].at(k) / c1) / (std::sqrt(v_[i].at(k) / c2) + 1e-8);
        }
      }
    }
  }

 private:
  std::string kind_;
  double lr_;
  double wd_;
  std::uint64_t step_ = 0;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
};

// Seen-composition bookkeeping: training scores only the seen columns, so
// each sample's composition index maps to its position in the sorted
// seen-composition list.
struct SeenIndex {
  std::vector<std::size_t> cols;  // composition indices of the seen classes
  std::unordered_map<std::size_t, std::size_t> pos;

  static SeenIndex build(const Dataset& ds) {
    SeenIndex s;
    for (const auto& c : ds.seen) s.cols.push_back(comp_index(c, ds.vocab));
    std::sort(s.cols.begin(), s.cols.end());
    for (std::size_t i = 0; i < s.cols.size(); ++i) s.pos[s.cols[i]] = i;
    return s;
  }
};

inline std::vector<bool> unseen_mask(const Dataset& ds) {
  std::vector<bool> mask(ds.vocab.num_comps(), false);
  for (const auto& c : ds.unseen) mask[comp_index(c, ds.vocab)] = true;
  return mask;
}

namespace detail {

struct Batch {
  Tensor images;
  std::vector<std::size_t> attr_labels;
  std::vector<std::size_t> obj_labels;
};

inline Batch gather_samples(const SplitData& split,
                            const std::vector<std::size_t>& idx) {
  Batch b;
  b.images = Tensor({idx.size(), kImageSize, kImageSize, kImageChannels});
  const std::size_t stride = kImageSize * kImageSize * kImageChannels;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const double* src = split.images.data() + idx[i] * stride;
    std::copy(src, src + stride, b.images.data() + i * stride);
    b.attr_labels.push_back(split.attr_labels[idx[i]]);
    b.obj_labels.push_back(split.obj_labels[idx[i]]);
  }
  return b;
}

}  // namespace detail

// Forward values of each objective component plus the recorded scalar.
struct LossParts {
  double ce_attr = 0.0;
  double ce_obj = 0.0;
  double ce_comp = 0.0;
  double hsic = 0.0;  // lambda-weighted penalty as added to the total
  double clst = 0.0;  // attribute + object cluster cost, unweighted
  double sep = 0.0;   // object separation cost, unweighted
  double total = 0.0;
  bool hsic_skipped = false;
};

struct BatchGraph {
  VarId total{};
  std::vector<VarId> params;  // aligned with model_parameters order
  VarId seen_scores{};        // [B, |Y_s|] training logits
  LossParts parts;
};

// Records the full objective for one training batch:
//   L = w_a CE_attr + w_o CE_obj + w_y CE_comp + independence penalty
//       + clst_weight (Clst_attr + Clst_obj) + sep_weight Sep_obj.
// Every component is evaluated (the metrics log reports them all); terms
// with zero weight are left out of the recorded total.
inline BatchGraph total_loss(Tape& t, const Model& model,
                             const detail::Batch& batch,
                             const SeenIndex& seen, const TrainConfig& cfg) {
  BatchGraph bg;
  const FeatureNodes fn =
      extract_features(t, model.fe, batch.images, cfg.finetune_backbone);
  const VarId pa = t.leaf(model.attr_protos.prototypes, true);
  const VarId po = t.leaf(model.obj_protos.prototypes, true);
  const VarId th1 = t.leaf(model.prop.theta1, true);
  const VarId th2 = t.leaf(model.prop.theta2, true);
  for (std::size_t s = 0; s < fn.weights.size(); ++s) {
    bg.params.push_back(fn.weights[s]);
    bg.params.push_back(fn.biases[s]);
  }
  bg.params.push_back(pa);
  bg.params.push_back(po);
  bg.params.push_back(th1);
  bg.params.push_back(th2);

  const VarId sim_a = similarity_map(t, fn.patches, pa);
  const VarId sim_o = similarity_map(t, fn.patches, po);
  const VarId ce_a = ce_loss(t, compat_scores(t, sim_a), batch.attr_labels);
  const VarId ce_o = ce_loss(t, compat_scores(t, sim_o), batch.obj_labels);

  std::vector<std::size_t> targets;
  for (std::size_t i = 0; i < batch.attr_labels.size(); ++i) {
    const std::size_t ci = comp_index(
        {batch.attr_labels[i], batch.obj_labels[i]}, model.vocab);
    const auto it = seen.pos.find(ci);
    if (it == seen.pos.end()) {
      throw ContractError("total_loss: training sample labeled with an "
                          "unseen composition");
    }
    targets.push_back(it->second);
  }
  const VarId node_feats = init_node_features(t, model.graph, pa, po);
  const VarId comp_protos =
      propagate(t, model.graph, node_feats, model.a_norm, th1, th2);
  const VarId pooled = t.segment_mean_rows(fn.patches, kPatchesPerSample);
  const VarId all_scores = comp_scores(t, comp_protos, pooled);
  bg.seen_scores = t.select_cols(all_scores, seen.cols);
  const VarId ce_y = ce_loss(t, bg.seen_scores, targets);

  IndependenceLoss indep{t.leaf(Tensor::scalar(0.0)), true, false};
  if (cfg.independence && cfg.lambda_h > 0.0) {
    const VarId z_a = softmax_pool(t, sim_a, fn.patches, batch.attr_labels);
    const VarId z_o = softmax_pool(t, sim_o, fn.patches, batch.obj_labels);
    HsicConfig hc;
    hc.lambda_h = cfg.lambda_h;
    indep = independence_loss(
        t, z_a, z_o, one_hot(batch.attr_labels, model.vocab.num_attrs()),
        one_hot(batch.obj_labels, model.vocab.num_objs()), hc);
  }

  const VarId clst_a = cluster_cost(t, fn.patches, pa, batch.attr_labels);
  const VarId clst_o = cluster_cost(t, fn.patches, po, batch.obj_labels);
  const VarId clst_sum = t.add(clst_a, clst_o);
  const VarId sep_o = separation_cost(t, fn.patches, po, batch.obj_labels);

  std::vector<std::pair<VarId, double>> terms = {
      {ce_a, cfg.ce_attr_weight},  {ce_o, cfg.ce_obj_weight},
      {ce_y, cfg.ce_comp_weight},  {indep.value, 1.0},
      {clst_sum, cfg.clst_weight}, {sep_o, cfg.sep_weight}};
  VarId total = t.leaf(Tensor::scalar(0.0));
  for (const auto& [term, w] : terms) {
    if (w == 0.0) continue;
    total = t.add(total, w == 1.0 ? term : t.scale(term, w));
  }
  bg.total = total;

  bg.parts.ce_attr = t.value(ce_a).item();
  bg.parts.ce_obj = t.value(ce_o).item();
  bg.parts.ce_comp = t.value(ce_y).item();
  bg.parts.hsic = t.value(indep.value).item();
  bg.parts.clst = t.value(clst_sum).item();
  bg.parts.sep = t.value(sep_o).item();
  bg.parts.total = t.value(total).item();
  bg.parts.hsic_skipped = indep.skipped;
  const std::pair<const char*, double> components[] = {
      {"attribute cross-entropy", bg.parts.ce_attr},
      {"object cross-entropy", bg.parts.ce_obj},
      {"composition cross-entropy", bg.parts.ce_comp},
      {"independence penalty", bg.parts.hsic},
      {"cluster cost", bg.parts.clst},
      {"separation cost", bg.parts.sep},
      {"total", bg.parts.total}};
  for (const auto& [name, v] : components) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("total_loss: ") + name +
                         " is non-finite");
    }
  }
  return bg;
}

// Composition prototypes for the current parameters, [|Y|, C].
inline Tensor comp_prototype_values(const Model& m) {
  Tape t;
  const VarId pa = t.leaf(m.attr_protos.prototypes);
  const VarId po = t.leaf(m.obj_protos.prototypes);
  const VarId x = init_node_features(t, m.graph, pa, po);
  const VarId cp = propagate(t, m.graph, x, m.a_norm, t.leaf(m.prop.theta1),
                             t.leaf(m.prop.theta2));
  return t.value(cp);
}

// Scores every sample of a split against all compositions; chunked so the
// forward tapes stay small.
inline ScoreMatrix score_split(const Model& m, const SplitData& split,
                               const std::vector<bool>& unseen) {
  if (unseen.size() != m.vocab.num_comps()) {
    throw ContractError("score_split: unseen mask size disagrees with the "
                        "model's composition grid");
  }
  for (std::size_t i = 0; i < split.size(); ++i) {
    if (split.attr_labels[i] >= m.vocab.num_attrs() ||
        split.obj_labels[i] >= m.vocab.num_objs()) {
      throw ContractError("score_split: split labels fall outside the "
                          "model's primitive vocabulary");
    }
  }
  const Tensor cp = comp_prototype_values(m);
  ScoreMatrix sm;
  sm.scores = Tensor({split.size(), m.vocab.num_comps()});
  sm.unseen = unseen;
  constexpr std::size_t kChunk = 128;
  for (std::size_t begin = 0; begin < split.size(); begin += kChunk) {
    const std::size_t end = std::min(begin + kChunk, split.size());
    std::vector<std::size_t> idx(end - begin);
    std::iota(idx.begin(), idx.end(), begin);
    const detail::Batch b = detail::gather_samples(split, idx);
    Tape t;
    const FeatureNodes fn = extract_features(t, m.fe, b.images, false);
    const VarId pooled = t.segment_mean_rows(fn.patches, kPatchesPerSample);
    const VarId scores = comp_scores(t, t.leaf(cp), pooled);
    const Tensor& v = t.value(scores);
    std::copy(v.data(), v.data() + v.size(),
              sm.scores.data() + begin * m.vocab.num_comps());
  }
  for (std::size_t i = 0; i < split.size(); ++i) {
    sm.labels.push_back(
        comp_index({split.attr_labels[i], split.obj_labels[i]}, m.vocab));
  }
  return sm;
}

inline EvalReport evaluate_model(const Model& m, const SplitData& split,
                                 const std::vector<bool>& unseen,
                                 std::size_t grid_steps) {
  return report(score_split(m, split, unseen), grid_steps);
}

struct Checkpoint {
  Model model;
  TrainConfig config;
  std::size_t epoch = 0;
  double val_hmean = 0.0;
};

inline void save_checkpoint(const Checkpoint& ck,
                            const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "tensors");
  nlohmann::json manifest;
  manifest["format"] = "protoprop-checkpoint-v1";
  manifest["epoch"] = ck.epoch;
  manifest["val_hmean"] = ck.val_hmean;
  manifest["config"] = config_json(ck.config);
  manifest["vocab"] = detail::vocab_json(ck.model.vocab);
  std::ofstream mf(dir / "manifest.json");
  if (!mf) throw ContractError("save_checkpoint: cannot write manifest");
  mf << manifest.dump(2) << "\n";
  mf.close();
  Model copy = ck.model;
  for (const ParamRef& p : model_parameters(copy, true)) {
    save_tensor((dir / "tensors" / (p.name + ".ppt")).string(), *p.tensor);
  }
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) {
    throw ContractError("load_checkpoint: missing " +
                        (dir / "manifest.json").string());
  }
  nlohmann::json manifest = nlohmann::json::parse(mf);
  if (manifest.value("format", "") != "protoprop-checkpoint-v1") {
    throw ContractError("load_checkpoint: unrecognized checkpoint format");
  }
  Checkpoint ck;
  ck.config = config_from_json(manifest.at("config"));
  ck.epoch = manifest.at("epoch").get<std::size_t>();
  ck.val_hmean = manifest.at("val_hmean").get<double>();
  const PrimitiveVocab vocab = detail::vocab_from_json(manifest.at("vocab"));
  ck.model = Model::init(vocab, ck.config);
  for (const ParamRef& p : model_parameters(ck.model, true)) {
    Tensor loaded = load_tensor((dir / "tensors" / (p.name + ".ppt")).string());
    if (!loaded.same_shape(*p.tensor)) {
      throw ShapeError("load_checkpoint: stored " + p.name +
                       " has shape " + shape_to_string(loaded.shape()));
    }
    *p.tensor = std::move(loaded);
  }
  return ck;
}

struct EpochRecord {
  std::size_t epoch = 0;
  LossParts parts;  // batch-averaged
  double train_acc = 0.0;
  EvalReport val;
};

struct MetricsRecord {
  std::vector<EpochRecord> epochs;
  EvalReport test;
};

struct TrainResult {
  Checkpoint best;
  MetricsRecord metrics;
};

namespace detail {

inline double batch_accuracy(const Tensor& seen_scores,
                             const std::vector<std::size_t>& targets) {
  std::size_t hits = 0;
  for (std::size_t r = 0; r < seen_scores.rows(); ++r) {
    std::size_t arg = 0;
    for (std::size_t c = 1; c < seen_scores.cols(); ++c) {
      if (seen_scores(r, c) > seen_scores(r, arg)) arg = c;
    }
    if (arg == targets[r]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(seen_scores.rows());
}

}  // namespace detail

inline TrainResult train_on(const Dataset& ds, const TrainConfig& cfg) {
  cfg.validate();
  check_dataset(ds);
  Model model = Model::init(ds.vocab, cfg);
  const SeenIndex seen = SeenIndex::build(ds);
  const std::vector<bool> mask = unseen_mask(ds);
  Optimizer opt(cfg.optimizer, cfg.learning_rate, cfg.weight_decay);

  TrainResult out;
  const EvalReport init_val =
      evaluate_model(model, ds.val, mask, cfg.bias_grid);
  out.best = {model, cfg, 0, init_val.best_harmonic};

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(ds.train.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(derive_seed(cfg.seed, kSeedShuffle, epoch));
    shuffle_rng.shuffle(order.begin(), order.end());

    LossParts sums;
    double acc_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t begin = 0; begin < order.size();
         begin += cfg.batch_size) {
      const std::size_t end = std::min(begin + cfg.batch_size, order.size());
      const std::vector<std::size_t> idx(order.begin() + begin,
                                         order.begin() + end);
      const detail::Batch batch = detail::gather_samples(ds.train, idx);
      Tape t;
      const BatchGraph bg = total_loss(t, model, batch, seen, cfg);
      t.backward(bg.total);
      auto params = model_parameters(model, cfg.finetune_backbone);
      std::vector<const Tensor*> grads;
      for (const VarId id : bg.params) grads.push_back(&t.grad(id));
      opt.step(params, grads);
      for (const ParamRef& p : params) {
        if (!p.tensor->all_finite()) {
          throw NumericError("train: parameter " + p.name +
                             " became non-finite after an update");
        }
      }
      std::vector<std::size_t> targets;
      for (std::size_t i = 0; i < batch.attr_labels.size(); ++i) {
        targets.push_back(seen.pos.at(comp_index(
            {batch.attr_labels[i], batch.obj_labels[i]}, ds.vocab)));
      }
      acc_sum += detail::batch_accuracy(t.value(bg.seen_scores), targets);
      sums.ce_attr += bg.parts.ce_attr;
      sums.ce_obj += bg.parts.ce_obj;
      sums.ce_comp += bg.parts.ce_comp;
      sums.hsic += bg.parts.hsic;
      sums.clst += bg.parts.clst;
      sums.sep += bg.parts.sep;
      sums.total += bg.parts.total;
      ++batches;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    const double nb = static_cast<double>(batches);
    rec.parts = {sums.ce_attr / nb, sums.ce_obj / nb,  sums.ce_comp / nb,
                 sums.hsic / nb,    sums.clst / nb,    sums.sep / nb,
                 sums.total / nb,   false};
    rec.train_acc = acc_sum / nb;
    rec.val = evaluate_model(model, ds.val, mask, cfg.bias_grid);
    out.metrics.epochs.push_back(rec);
    if (rec.val.best_harmonic > out.best.val_hmean) {
      out.best = {model, cfg, epoch, rec.val.best_harmonic};
    }
  }

  out.metrics.test =
      evaluate_model(out.best.model, ds.test, mask, cfg.bias_grid);
  return out;
}

inline TrainResult train(const TrainConfig& cfg) {
  cfg.validate();
  if (cfg.dataset.empty()) {
    throw ContractError("train: config gives no dataset path");
  }
  return train_on(load_dataset(cfg.dataset), cfg);
}

namespace detail {

inline std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

// One structured text record per epoch, then the final test metrics.
inline void write_metrics(const MetricsRecord& m, std::ostream& os) {
  using detail::fmt17;
  for (const EpochRecord& r : m.epochs) {
    os << "epoch " << r.epoch << " ce_attr " << fmt17(r.parts.ce_attr)
       << " ce_obj " << fmt17(r.parts.ce_obj) << " ce_comp "
       << fmt17(r.parts.ce_comp) << " hsic " << fmt17(r.parts.hsic)
       << " clst " << fmt17(r.parts.clst) << " sep " << fmt17(r.parts.sep)
       << " total " << fmt17(r.parts.total) << " train_acc "
       << fmt17(r.train_acc) << " val_auc " << fmt17(r.val.auc_value)
       << " val_hmean " << fmt17(r.val.best_harmonic) << " val_seen "
       << fmt17(r.val.closed_seen) << " val_unseen "
       << fmt17(r.val.closed_unseen) << "\n";
  }
  os << "test_auc " << fmt17(m.test.auc_value) << "\n";
  os << "test_hmean " << fmt17(m.test.best_harmonic) << "\n";
  os << "test_seen " << fmt17(m.test.closed_seen) << "\n";
  os << "test_unseen " << fmt17(m.test.closed_unseen) << "\n";
}

inline nlohmann::json report_json(const TrainResult& r) {
  return {{"best_epoch", r.best.epoch},
          {"val_hmean", r.best.val_hmean},
          {"test",
           {{"auc", r.metrics.test.auc_value},
            {"best_harmonic", r.metrics.test.best_harmonic},
            {"closed_seen", r.metrics.test.closed_seen},
            {"closed_unseen", r.metrics.test.closed_unseen}}}};
}

struct AblationArm {
  std::string name;
  bool independence = true;
  bool finetune = true;
  // per-seed test metrics: closed seen, closed unseen, best harmonic
  std::vector<std::array<double, 3>> runs;
};

struct AblationTable {
  std::vector<std::uint64_t> seeds;
  std::vector<AblationArm> arms;
};

// Every arm shares the base config (and therefore the seed-derived data
// order); only the two ablation flags differ.
inline AblationTable ablation_suite(const Dataset& ds, TrainConfig base,
                                    const std::vector<std::uint64_t>& seeds) {
  if (seeds.empty()) throw ContractError("ablation_suite: no seeds given");
  AblationTable table;
  table.seeds = seeds;
  const std::pair<bool, bool> flags[] = {
      {true, true}, {true, false}, {false, true}, {false, false}};
  for (const auto& [indep, ft] : flags) {
    AblationArm arm;
    arm.independence = indep;
    arm.finetune = ft;
    arm.name = std::string(indep ? "independence" : "no-independence") +
               (ft ? "+finetune" : "+frozen");
    for (const std::uint64_t s : seeds) {
      TrainConfig cfg = base;
      cfg.independence = indep;
      cfg.finetune_backbone = ft;
      cfg.seed = s;
      const TrainResult r = train_on(ds, cfg);
      arm.runs.push_back({r.metrics.test.closed_seen,
                          r.metrics.test.closed_unseen,
                          r.metrics.test.best_harmonic});
    }
    table.arms.push_back(std::move(arm));
  }
  return table;
}

namespace detail {

inline std::pair<double, double> mean_stderr(
    const std::vector<std::array<double, 3>>& runs, std::size_t col) {
  const double n = static_cast<double>(runs.size());
  double mean = 0.0;
  for (const auto& r : runs) mean += r[col];
  mean /= n;
  if (runs.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (const auto& r : runs) ss += (r[col] - mean) * (r[col] - mean);
  return {mean, std::sqrt(ss / (n - 1.0)) / std::sqrt(n)};
}

}  // namespace detail

inline std::string format_ablation(const AblationTable& table) {
  std::ostringstream os;
  os << "arm                        seen              unseen            "
        "harmonic\n";
  char buf[64];
  for (const AblationArm& arm : table.arms) {
    os << arm.name << std::string(27 - std::min<std::size_t>(
                                           27, arm.name.size() + 1), ' ')
       << " ";
    for (std::size_t col = 0; col < 3; ++col) {
      const auto [mean, se] = detail::mean_stderr(arm.runs, col);
      std::snprintf(buf, sizeof(buf), "%.4f +- %.4f  ", mean, se);
      os << buf;
    }
    os << "\n";
  }
  return os.str();
}

// Softmax-pooled attribute embeddings for every sample of a split, with a
// text manifest carrying the labels. Rebuilding the same export twice is
// byte-identical.
inline void export_embeddings(const Model& m, const SplitData& split,
                              const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  Tensor z = Tensor({split.size(), m.attr_protos.channels()});
  constexpr std::size_t kChunk = 128;
  for (std::size_t begin = 0; begin < split.size(); begin += kChunk) {
    const std::size_t end = std::min(begin + kChunk, split.size());
    std::vector<std::size_t> idx(end - begin);
    std::iota(idx.begin(), idx.end(), begin);
    const detail::Batch b = detail::gather_samples(split, idx);
    Tape t;
    const FeatureNodes fn = extract_features(t, m.fe, b.images, false);
    const VarId pa = t.leaf(m.attr_protos.prototypes);
    const VarId sim = similarity_map(t, fn.patches, pa);
    const VarId pooled = softmax_pool(t, sim, fn.patches, b.attr_labels);
    const Tensor& v = t.value(pooled);
    std::copy(v.data(), v.data() + v.size(),
              z.data() + begin * m.attr_protos.channels());
  }
  save_tensor((dir / "embeddings.ppt").string(), z);
  std::ofstream mf(dir / "manifest.txt");
  if (!mf) throw ContractError("export_embeddings: cannot write manifest");
  mf << "format protoprop-embeddings-v1\n";
  mf << "rows " << split.size() << "\n";
  mf << "channels " << m.attr_protos.channels() << "\n";
  mf << "row attribute object\n";
  for (std::size_t i = 0; i < split.size(); ++i) {
    mf << i << " " << split.attr_labels[i] << " " << split.obj_labels[i]
       << "\n";
  }
}

}  // namespace protoprop
