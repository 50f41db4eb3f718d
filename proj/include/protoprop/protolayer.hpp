#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "protoprop/common.hpp"
#include "protoprop/synthdata.hpp"
#include "protoprop/tape.hpp"
#include "protoprop/tensor.hpp"

namespace protoprop {

inline constexpr std::size_t kPatchGrid = 4;
inline constexpr std::size_t kPatchesPerSample = kPatchGrid * kPatchGrid;

// One stride-2 convolution stage in im2col form: weight [K*K*Cin, Cout],
// bias [Cout].
struct ConvStage {
  Conv2dGeom geom;
  Tensor weight;
  Tensor bias;
};

// Three stride-2 stages map [N,32,32,3] images to a 4x4 grid of patch
// vectors, flattened to [N*16, C]. ReLU sits between stages; the last
// stage feeds the prototype layers linearly.
struct FeatureExtractor {
  std::vector<ConvStage> stages;

  std::size_t out_channels() const { return stages.back().weight.cols(); }

  static FeatureExtractor he_init(std::size_t channels, Rng& rng,
                                  std::array<std::size_t, 2> hidden = {32,
                                                                       64}) {
    if (channels == 0 || hidden[0] == 0 || hidden[1] == 0) {
      throw ContractError("feature channels must be > 0");
    }
    FeatureExtractor fe;
    const std::size_t widths[4] = {kImageChannels, hidden[0], hidden[1],
                                   channels};
    std::size_t side = kImageSize;
    for (std::size_t s = 0; s < 3; ++s) {
      ConvStage st;
      st.geom = Conv2dGeom{side, side, widths[s]};
      const std::size_t fan_in = st.geom.patch_len();
      const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
      st.weight = Tensor({fan_in, widths[s + 1]});
      for (std::size_t i = 0; i < st.weight.size(); ++i) {
        st.weight.at(i) = std_dev * rng.normal();
      }
      st.bias = Tensor::zeros({widths[s + 1]});
      fe.stages.push_back(std::move(st));
      side = fe.stages.back().geom.out_h();
    }
    if (side != kPatchGrid) {
      throw ContractError("feature extractor must end on a 4x4 grid");
    }
    return fe;
  }
};

// Tape handles produced by registering the extractor for one batch.
struct FeatureNodes {
  std::vector<VarId> weights;
  std::vector<VarId> biases;
  VarId patches;  // [N*16, C], patch rows grouped per sample
};

// Registers parameters as tape leaves and records the forward pass for an
// image batch. With trainable=false the weights are frozen leaves and
// receive zero gradient.
inline FeatureNodes extract_features(Tape& t, const FeatureExtractor& fe,
                                     const Tensor& images,
                                     bool trainable = true) {
  if (images.rank() != 4 || images.dim(1) != kImageSize ||
      images.dim(2) != kImageSize || images.dim(3) != kImageChannels) {
    throw ShapeError("extract_features: expected [N,32,32,3] images, got " +
                     shape_to_string(images.shape()));
  }
  if (!images.all_finite()) {
    throw NumericError("extract_features: non-finite pixel values");
  }
  const std::size_t n = images.dim(0);
  FeatureNodes out;
  VarId x = t.leaf(images, /*requires_grad=*/false);
  for (std::size_t s = 0; s < fe.stages.size(); ++s) {
    const ConvStage& st = fe.stages[s];
    const VarId w = t.leaf(st.weight, trainable);
    const VarId b = t.leaf(st.bias, trainable);
    out.weights.push_back(w);
    out.biases.push_back(b);
    VarId act = t.add_rowvec(t.matmul(t.im2col(x, st.geom), w), b);
    if (s + 1 < fe.stages.size()) {
      act = t.relu(act);
      x = t.reshape(act, {n, st.geom.out_h(), st.geom.out_w(),
                          t.value(act).cols()});
    } else {
      out.patches = act;
    }
  }
  return out;
}

enum class TargetKind { attribute, object };

// One prototype vector per primitive class, living in patch space.
struct PrototypeSet {
  TargetKind kind = TargetKind::attribute;
  Tensor prototypes;  // [k, C]

  std::size_t count() const { return prototypes.dim(0); }
  std::size_t channels() const { return prototypes.dim(1); }

  // i.i.d. normal entries with std 1/sqrt(C) so initial patch-prototype
  // dot products are O(1).
  static PrototypeSet init(TargetKind kind, std::size_t k,
                           std::size_t channels, Rng& rng) {
    if (k == 0 || channels == 0) {
      throw ContractError("prototype set needs k > 0 and channels > 0");
    }
    PrototypeSet ps;
    ps.kind = kind;
    ps.prototypes = Tensor({k, channels});
    const double std_dev = 1.0 / std::sqrt(static_cast<double>(channels));
    for (std::size_t i = 0; i < ps.prototypes.size(); ++i) {
      ps.prototypes.at(i) = std_dev * rng.normal();
    }
    return ps;
  }
};

// Dot product of every patch with every prototype: [N*P, C] x [k, C] ->
// [N*P, k].
inline VarId similarity_map(Tape& t, VarId patches, VarId protos) {
  if (t.value(patches).cols() != t.value(protos).cols()) {
    throw ShapeError("similarity_map: channel widths differ");
  }
  return t.matmul(patches, t.transpose(protos));
}

// Per-sample compatibility: the best patch score for each prototype,
// [N*P, k] -> [N, k]. Gradient flows to the argmax patch only.
inline VarId compat_scores(Tape& t, VarId sim,
                           std::size_t patches_per_sample = kPatchesPerSample) {
  return t.segment_colmax(sim, patches_per_sample);
}

// Mean cross-entropy of score rows against integer labels, computed via
// logsumexp for stability.
inline VarId ce_loss(Tape& t, VarId scores,
                     const std::vector<std::size_t>& labels) {
  return t.mean(t.sub(t.logsumexp_rows(scores), t.gather_rows(scores, labels)));
}

// Mean over the batch of the squared distance from the own-class
// prototype to its nearest patch. Nonnegative; zero when a patch
// coincides with the prototype.
inline VarId cluster_cost(Tape& t, VarId patches, VarId protos,
                          const std::vector<std::size_t>& labels,
                          std::size_t patches_per_sample = kPatchesPerSample) {
  const VarId d = t.pairwise_sqdist(patches, protos);
  return t.mean(t.min_own_class(d, labels, patches_per_sample));
}

// Negative mean distance from each sample's patches to the nearest
// wrong-class prototype; minimizing pushes wrong prototypes away.
// Requires at least two classes.
inline VarId separation_cost(Tape& t, VarId patches, VarId protos,
                             const std::vector<std::size_t>& labels,
                             std::size_t patches_per_sample =
                                 kPatchesPerSample) {
  const VarId d = t.pairwise_sqdist(patches, protos);
  return t.scale(t.mean(t.min_other_class(d, labels, patches_per_sample)),
                 -1.0);
}

// Differentiable pooling: per sample, softmax the ground-truth prototype's
// scores over the patch grid and average the patches under those weights.
// Output [N, C] rows stay inside the convex hull of each sample's patches.
inline VarId softmax_pool(Tape& t, VarId sim, VarId patches,
                          const std::vector<std::size_t>& labels,
                          std::size_t patches_per_sample = kPatchesPerSample) {
  return t.softmax_pool_labels(sim, patches, labels, patches_per_sample);
}

}  // namespace protoprop
