#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "protoprop/common.hpp"
#include "protoprop/tensor.hpp"

namespace protoprop {

inline constexpr std::size_t kImageSize = 32;
inline constexpr std::size_t kImageChannels = 3;
inline constexpr double kNoiseAmplitude = 0.15;
inline constexpr double kHueJitter = 0.08;
inline constexpr double kMinRadius = 6.0;
inline constexpr double kMaxRadius = 12.0;
// Weight of the object-correlated background tint in bias mode. Strong
// enough that a classifier shortcutting via the background beats one that
// ignores it on the training split.
inline constexpr double kBiasTintStrength = 0.65;

enum class Stencil { circle, square, triangle };

struct AttributeDef {
  std::string name;
  std::array<double, 3> rgb;
};

struct ObjectDef {
  std::string name;
  Stencil stencil;
};

struct PrimitiveVocab {
  std::vector<AttributeDef> attributes;
  std::vector<ObjectDef> objects;

  std::size_t num_attrs() const { return attributes.size(); }
  std::size_t num_objs() const { return objects.size(); }
  std::size_t num_comps() const { return attributes.size() * objects.size(); }

  void validate() const {
    if (attributes.size() < 2 || objects.size() < 2) {
      throw ContractError("vocab needs at least 2 attributes and 2 objects");
    }
    for (std::size_t i = 0; i < attributes.size(); ++i)
      for (std::size_t j = i + 1; j < attributes.size(); ++j)
        if (attributes[i].name == attributes[j].name)
          throw ContractError("duplicate attribute name: " +
                              attributes[i].name);
    for (std::size_t i = 0; i < objects.size(); ++i)
      for (std::size_t j = i + 1; j < objects.size(); ++j)
        if (objects[i].name == objects[j].name)
          throw ContractError("duplicate object name: " + objects[i].name);
  }
};

// 3 object shapes and 8 colors; 24 compositional classes.
inline PrimitiveVocab default_vocab() {
  PrimitiveVocab v;
  v.attributes = {
      {"red", {0.90, 0.10, 0.10}},    {"purple", {0.60, 0.15, 0.70}},
      {"yellow", {0.90, 0.85, 0.10}}, {"blue", {0.15, 0.25, 0.90}},
      {"green", {0.10, 0.80, 0.20}},  {"cyan", {0.10, 0.85, 0.85}},
      {"gray", {0.50, 0.50, 0.50}},   {"brown", {0.55, 0.35, 0.15}},
  };
  v.objects = {
      {"sphere", Stencil::circle},
      {"cube", Stencil::square},
      {"cylinder", Stencil::triangle},
  };
  return v;
}

// Small grids for fast tests.
inline PrimitiveVocab mini_vocab(std::size_t attrs, std::size_t objs) {
  const PrimitiveVocab full = default_vocab();
  if (attrs > full.attributes.size() || objs > full.objects.size()) {
    throw ContractError("mini_vocab: at most 8 attributes and 3 objects");
  }
  PrimitiveVocab v;
  v.attributes.assign(full.attributes.begin(), full.attributes.begin() + attrs);
  v.objects.assign(full.objects.begin(), full.objects.begin() + objs);
  return v;
}

struct CompositionalLabel {
  std::size_t attribute = 0;
  std::size_t object = 0;

  bool operator==(const CompositionalLabel&) const = default;
};

inline std::size_t comp_index(const CompositionalLabel& l,
                              const PrimitiveVocab& v) {
  return l.attribute * v.num_objs() + l.object;
}

inline CompositionalLabel comp_from_index(std::size_t idx,
                                          const PrimitiveVocab& v) {
  return {idx / v.num_objs(), idx % v.num_objs()};
}

struct ShapeGeom {
  double cx = 0.0, cy = 0.0, radius = 0.0;
};

struct Sample {
  Tensor image;  // [32, 32, 3], values in [0, 1]
  std::size_t attribute = 0;
  std::size_t object = 0;
  ShapeGeom geom;

  CompositionalLabel label() const { return {attribute, object}; }
};

inline bool inside_stencil(Stencil s, const ShapeGeom& g, double px,
                           double py) {
  const double dx = px - g.cx, dy = py - g.cy;
  switch (s) {
    case Stencil::circle:
      return dx * dx + dy * dy <= g.radius * g.radius;
    case Stencil::square:
      return std::abs(dx) <= 0.75 * g.radius && std::abs(dy) <= 0.75 * g.radius;
    case Stencil::triangle: {
      // Up-pointing isoceles triangle inscribed in the radius.
      const double x0 = 0.0, y0 = -g.radius;
      const double x1 = -0.9 * g.radius, y1 = 0.7 * g.radius;
      const double x2 = 0.9 * g.radius, y2 = 0.7 * g.radius;
      auto side = [&](double ax, double ay, double bx, double by) {
        return (bx - ax) * (dy - ay) - (by - ay) * (dx - ax);
      };
      const double s0 = side(x0, y0, x1, y1);
      const double s1 = side(x1, y1, x2, y2);
      const double s2 = side(x2, y2, x0, y0);
      const bool neg = s0 < 0 || s1 < 0 || s2 < 0;
      const bool pos = s0 > 0 || s1 > 0 || s2 > 0;
      return !(neg && pos);
    }
  }
  return false;
}

// Background tint derived from an index by hashing; the bias-mode
// confounder uses the object index here on the training split and a
// random index on validation/test.
inline std::array<double, 3> tint_color(std::size_t index) {
  std::uint64_t s = 0xB1A5'0000'0000'0000ULL ^ (index * 0x9e3779b97f4a7c15ULL);
  std::array<double, 3> rgb{};
  for (double& c : rgb) {
    c = 0.1 + 0.8 * (static_cast<double>(splitmix64(s) >> 11) * 0x1.0p-53);
  }
  return rgb;
}

// Renders one 32x32 RGB sample: noisy background, one colored stencil at a
// random position and scale, optional background tint. All randomness
// comes from the supplied generator, so identical seeds give identical
// images.
inline Sample render_sample(const CompositionalLabel& label,
                            const PrimitiveVocab& vocab, Rng& rng,
                            std::optional<std::array<double, 3>> tint =
                                std::nullopt) {
  if (label.attribute >= vocab.num_attrs() ||
      label.object >= vocab.num_objs()) {
    throw ContractError("render_sample: label outside vocab");
  }
  Sample s;
  s.attribute = label.attribute;
  s.object = label.object;
  s.geom.radius = rng.uniform(kMinRadius, kMaxRadius);
  s.geom.cx = rng.uniform(s.geom.radius, kImageSize - s.geom.radius);
  s.geom.cy = rng.uniform(s.geom.radius, kImageSize - s.geom.radius);

  std::array<double, 3> fill = vocab.attributes[label.attribute].rgb;
  for (double& c : fill) {
    c = std::clamp(c + rng.uniform(-kHueJitter, kHueJitter), 0.0, 1.0);
  }

  const Stencil stencil = vocab.objects[label.object].stencil;
  s.image = Tensor({kImageSize, kImageSize, kImageChannels});
  double* px = s.image.data();
  for (std::size_t y = 0; y < kImageSize; ++y) {
    for (std::size_t x = 0; x < kImageSize; ++x, px += 3) {
      const bool in = inside_stencil(stencil, s.geom, x + 0.5, y + 0.5);
      for (std::size_t c = 0; c < 3; ++c) {
        double v = rng.uniform(0.0, kNoiseAmplitude);
        if (in) {
          v = fill[c];
        } else if (tint) {
          v += kBiasTintStrength * (*tint)[c];
        }
        px[c] = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  return s;
}

struct SplitSpec {
  std::size_t ratio_unseen = 2;
  std::size_t ratio_seen = 8;
  std::uint64_t seed = 1;
  std::size_t train_per_seen = 50;
  std::size_t val_per_class = 20;
  std::size_t test_per_class = 20;
  bool bias_mode = false;
};

inline std::size_t unseen_count_for(const PrimitiveVocab& vocab,
                                    const SplitSpec& spec) {
  const double total = static_cast<double>(vocab.num_comps());
  const double frac = static_cast<double>(spec.ratio_unseen) /
                      static_cast<double>(spec.ratio_unseen + spec.ratio_seen);
  return static_cast<std::size_t>(std::llround(total * frac));
}

// Uniformly random seen/unseen partition of the composition grid under the
// constraint that every attribute and every object occurs in the seen set.
// Rejection sampling; deterministic given the seed.
inline std::pair<std::vector<CompositionalLabel>,
                 std::vector<CompositionalLabel>>
build_splits(const PrimitiveVocab& vocab, const SplitSpec& spec) {
  vocab.validate();
  if (spec.ratio_unseen + spec.ratio_seen == 0) {
    throw ContractError("build_splits: ratio 0:0");
  }
  const std::size_t total = vocab.num_comps();
  const std::size_t unseen = unseen_count_for(vocab, spec);
  const std::size_t bound =
      total - std::max(vocab.num_attrs(), vocab.num_objs());
  if (unseen > bound) {
    throw ContractError(
        "build_splits: " + std::to_string(unseen) +
        " unseen classes requested but primitive coverage allows at most " +
        std::to_string(bound) + " (|A|*|O| - max(|A|,|O|) with |A| = " +
        std::to_string(vocab.num_attrs()) + ", |O| = " +
        std::to_string(vocab.num_objs()) + ")");
  }

  std::vector<std::size_t> order(total);
  for (std::size_t i = 0; i < total; ++i) order[i] = i;

  Rng rng(derive_seed(spec.seed, 0x5e1ec7));
  for (int attempt = 0; attempt < 100000; ++attempt) {
    rng.shuffle(order.begin(), order.end());
    std::vector<bool> attr_seen(vocab.num_attrs(), false);
    std::vector<bool> obj_seen(vocab.num_objs(), false);
    for (std::size_t i = unseen; i < total; ++i) {
      const CompositionalLabel l = comp_from_index(order[i], vocab);
      attr_seen[l.attribute] = true;
      obj_seen[l.object] = true;
    }
    const bool covered =
        std::all_of(attr_seen.begin(), attr_seen.end(),
                    [](bool b) { return b; }) &&
        std::all_of(obj_seen.begin(), obj_seen.end(), [](bool b) { return b; });
    if (!covered) continue;

    std::vector<CompositionalLabel> ys, yu;
    for (std::size_t i = 0; i < unseen; ++i)
      yu.push_back(comp_from_index(order[i], vocab));
    for (std::size_t i = unseen; i < total; ++i)
      ys.push_back(comp_from_index(order[i], vocab));
    auto by_index = [&](const CompositionalLabel& a,
                        const CompositionalLabel& b) {
      return comp_index(a, vocab) < comp_index(b, vocab);
    };
    std::sort(ys.begin(), ys.end(), by_index);
    std::sort(yu.begin(), yu.end(), by_index);
    return {ys, yu};
  }
  throw ContractError("build_splits: rejection sampling failed to cover "
                      "primitives (should be unreachable for feasible ratios)");
}

// One evaluation split, packed for batching: an image stack plus parallel
// label arrays.
struct SplitData {
  Tensor images;  // [N, 32, 32, 3]
  std::vector<std::size_t> attr_labels;
  std::vector<std::size_t> obj_labels;

  std::size_t size() const { return attr_labels.size(); }
};

struct Dataset {
  PrimitiveVocab vocab;
  SplitSpec spec;
  std::vector<CompositionalLabel> seen;    // Y_s, sorted by comp index
  std::vector<CompositionalLabel> unseen;  // Y_u, sorted by comp index
  SplitData train, val, test;
};

namespace detail {

enum class SplitTag : std::uint64_t { train = 0, val = 1, test = 2 };

inline SplitData generate_split(const PrimitiveVocab& vocab,
                                const SplitSpec& spec,
                                const std::vector<CompositionalLabel>& comps,
                                std::size_t per_class, SplitTag tag) {
  const std::size_t n = comps.size() * per_class;
  SplitData out;
  out.images = Tensor({std::max<std::size_t>(n, 1), kImageSize, kImageSize,
                       kImageChannels});
  out.attr_labels.reserve(n);
  out.obj_labels.reserve(n);
  const std::size_t stride = kImageSize * kImageSize * kImageChannels;
  std::size_t row = 0;
  for (const CompositionalLabel& comp : comps) {
    for (std::size_t i = 0; i < per_class; ++i, ++row) {
      Rng rng(derive_seed(spec.seed, static_cast<std::uint64_t>(tag),
                          comp_index(comp, vocab), i));
      std::optional<std::array<double, 3>> tint;
      if (spec.bias_mode) {
        if (tag == SplitTag::train) {
          tint = tint_color(comp.object);
        } else {
          // Same tint palette, but decorrelated from the object label.
          tint = tint_color(static_cast<std::size_t>(
              rng.uniform_int(0, static_cast<std::int64_t>(vocab.num_objs()) -
                                     1)));
        }
      }
      const Sample s = render_sample(comp, vocab, rng, tint);
      std::copy(s.image.data(), s.image.data() + stride,
                out.images.data() + row * stride);
      out.attr_labels.push_back(comp.attribute);
      out.obj_labels.push_back(comp.object);
    }
  }
  return out;
}

}  // namespace detail

// Full dataset: train covers seen compositions only; validation and test
// cover every composition. Sample order is canonical (composition index
// major), so the result is fully determined by the seed.
inline Dataset generate_dataset(const PrimitiveVocab& vocab,
                                const SplitSpec& spec) {
  Dataset ds;
  ds.vocab = vocab;
  ds.spec = spec;
  std::tie(ds.seen, ds.unseen) = build_splits(vocab, spec);

  std::vector<CompositionalLabel> all;
  for (std::size_t i = 0; i < vocab.num_comps(); ++i)
    all.push_back(comp_from_index(i, vocab));

  ds.train = detail::generate_split(vocab, spec, ds.seen, spec.train_per_seen,
                                    detail::SplitTag::train);
  ds.val = detail::generate_split(vocab, spec, all, spec.val_per_class,
                                  detail::SplitTag::val);
  ds.test = detail::generate_split(vocab, spec, all, spec.test_per_class,
                                   detail::SplitTag::test);
  return ds;
}

// Post-generation invariant check; the trainer refuses datasets that fail.
inline void check_dataset(const Dataset& ds) {
  ds.vocab.validate();
  std::vector<int> membership(ds.vocab.num_comps(), 0);
  for (const auto& l : ds.seen) membership[comp_index(l, ds.vocab)] |= 1;
  for (const auto& l : ds.unseen) membership[comp_index(l, ds.vocab)] |= 2;
  for (std::size_t i = 0; i < membership.size(); ++i) {
    if (membership[i] == 3) {
      throw ContractError("dataset: composition in both seen and unseen");
    }
    if (membership[i] == 0) {
      throw ContractError("dataset: composition missing from both splits");
    }
  }
  std::vector<bool> attr_cov(ds.vocab.num_attrs(), false);
  std::vector<bool> obj_cov(ds.vocab.num_objs(), false);
  for (const auto& l : ds.seen) {
    attr_cov[l.attribute] = true;
    obj_cov[l.object] = true;
  }
  if (!std::all_of(attr_cov.begin(), attr_cov.end(),
                   [](bool b) { return b; }) ||
      !std::all_of(obj_cov.begin(), obj_cov.end(), [](bool b) { return b; })) {
    throw ContractError("dataset: a primitive has no seen composition");
  }
  for (std::size_t i = 0; i < ds.train.size(); ++i) {
    const std::size_t ci = ds.train.attr_labels[i] * ds.vocab.num_objs() +
                           ds.train.obj_labels[i];
    if (membership[ci] != 1) {
      throw ContractError("dataset: training sample from an unseen class");
    }
  }
  if (ds.train.size() != ds.seen.size() * ds.spec.train_per_seen ||
      ds.val.size() != ds.vocab.num_comps() * ds.spec.val_per_class ||
      ds.test.size() != ds.vocab.num_comps() * ds.spec.test_per_class) {
    throw ContractError("dataset: split sizes disagree with configured counts");
  }
  for (const SplitData* split : {&ds.train, &ds.val, &ds.test}) {
    if (split->size() == 0) continue;
    if (split->images.dim(0) != split->size()) {
      throw ContractError("dataset: image stack height mismatch");
    }
    for (std::size_t i = 0; i < split->images.size(); ++i) {
      const double v = split->images.at(i);
      if (!(v >= 0.0 && v <= 1.0)) {
        throw ContractError("dataset: pixel outside [0, 1]");
      }
    }
  }
}

}  // namespace protoprop
