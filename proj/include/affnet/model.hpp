#pragma once

// The two-branch affinity model. The interactive branch reads the scene where
// contact is happening and predicts per-part heatmaps with semantic (part
// embedding) and geometric (pose equilibrium) guidance; the transfer branch
// predicts heatmaps for the non-interactive view of the same object, guided
// by pooled contact features from the interactive branch and an alignment
// loss that pulls its pose representation toward the interactive one.

#include "affnet/deq.hpp"

namespace affnet {

struct ModelConfig {
  int c = 64;                                 // fused channel width
  std::array<int, 4> channels{32, 64, 160, 256};
  int expansion = 4;
  SolverConfig solver;
  bool ablate_text = false;      // skip part-embedding guidance
  bool ablate_pose = false;      // bypass equilibrium fusion (zero states)
  bool ablate_apparent = false;  // zero the contact masks
};

struct InteractiveOutputs {
  Tensor guided_tokens;  // stage-4 tokens enriched with part embeddings
  Tensor z_tokens;       // equilibrium state for the stage-4 tokens
  Tensor z_pose;         // equilibrium state for the pose tokens
  Tensor affinity_map;   // [c,h4,w4] fusion of guided and equilibrium streams
  Tensor features;       // [c,h1,w1] multi-scale fused features
  Tensor heatmaps;       // [7,h1,w1] in (0,1)
  DEQTrace trace;
};

struct TransferOutputs {
  Tensor z_tokens;                      // equilibrium state, stage-4 tokens
  Tensor z_pose;                        // equilibrium state, pose tokens
  std::vector<Tensor> contact_features; // 7 masked copies of the interactive features
  Tensor contact_tokens;                // [7,c] masked-average pooled
  Tensor z_hat_tokens;                  // joint equilibrium over all guidance
  Tensor features;                      // [c,h1,w1]
  Tensor fused;                         // [c,h1,w1] after contact expansion
  Tensor heatmaps;                      // [7,h1,w1] in (0,1)
  DEQTrace trace_pair, trace_joint;
};

struct LossBundle {
  Tensor interactive;  // BCE, interactive prediction vs its ground truth
  Tensor transfer;     // BCE, transfer prediction vs its ground truth
  Tensor align;        // pose-representation alignment
  Tensor total;
};

// ---------------------------------------------------------------------------
// Contact feature extraction and pooling
// ---------------------------------------------------------------------------

// Per-part elementwise product of a binary mask (broadcast over channels)
// with the feature map.
inline std::vector<Tensor> extract_contact_features(
    const Tensor& features, const std::vector<Tensor>& masks) {
  if (features.shape().size() != 3)
    throw ShapeError("extract_contact_features: features must be [c,h,w]");
  const int c = features.shape()[0], h = features.shape()[1],
            w = features.shape()[2];
  if (static_cast<int>(masks.size()) != kNumParts)
    throw ShapeError("extract_contact_features: need " +
                     std::to_string(kNumParts) + " masks, got " +
                     std::to_string(masks.size()));
  std::vector<Tensor> out;
  for (const auto& m : masks) {
    if (m.shape() != Shape{h, w})
      throw ShapeError("extract_contact_features: mask shape " +
                       shape_str(m.shape()) + " does not match features " +
                       shape_str(features.shape()));
    std::vector<double> rep(static_cast<size_t>(c) * h * w);
    for (int ch = 0; ch < c; ++ch)
      std::copy(m.values().begin(), m.values().end(),
                rep.begin() + static_cast<size_t>(ch) * h * w);
    out.push_back(mul(features, Tensor::from({c, h, w}, std::move(rep))));
  }
  return out;
}

// Average of each masked feature map over its mask's support: one c-vector
// per part, zeros for empty masks.
inline Tensor pool_contact_tokens(const std::vector<Tensor>& contact,
                                  const std::vector<Tensor>& masks) {
  std::vector<Tensor> rows;
  for (size_t j = 0; j < contact.size(); ++j) {
    const int c = contact[j].shape()[0];
    const int hw = contact[j].shape()[1] * contact[j].shape()[2];
    double count = 0.0;
    for (double v : masks[j].values()) count += v;
    const double inv = 1.0 / (count + 1e-8);
    Tensor weights = Tensor::full({hw, 1}, inv);
    rows.push_back(matmul(reshape(contact[j], {c, hw}), weights));
  }
  return transpose2d(concat(rows, 1));  // [7, c]
}

// Binarizes heatmaps into per-part masks at the feature resolution,
// average-pooling first when the maps are a stride-2 or stride-4 multiple.
inline std::vector<Tensor> masks_from_heatmaps(const Tensor& heat, int h1,
                                               int w1, double threshold = 0.5) {
  if (heat.shape().size() != 3 || heat.shape()[0] != kNumParts)
    throw ShapeError("masks_from_heatmaps: want [7,h,w], got " +
                     shape_str(heat.shape()));
  NoGradScope no_grad;
  Tensor src = heat;
  if (heat.shape()[1] != h1 || heat.shape()[2] != w1) {
    if (heat.shape()[1] % h1 != 0 || heat.shape()[2] % w1 != 0 ||
        heat.shape()[1] / h1 != heat.shape()[2] / w1 ||
        (heat.shape()[1] / h1 != 2 && heat.shape()[1] / h1 != 4))
      throw ShapeError("masks_from_heatmaps: cannot reduce " +
                       shape_str(heat.shape()) + " to " + std::to_string(h1) +
                       "x" + std::to_string(w1));
    src = avg_pool2d(heat, heat.shape()[1] / h1);
  }
  std::vector<Tensor> masks;
  for (int j = 0; j < kNumParts; ++j) {
    std::vector<double> m(static_cast<size_t>(h1) * w1);
    const double* v = src.values().data() + static_cast<size_t>(j) * h1 * w1;
    for (int i = 0; i < h1 * w1; ++i) m[i] = v[i] >= threshold ? 1.0 : 0.0;
    masks.push_back(Tensor::from({h1, w1}, std::move(m)));
  }
  return masks;
}

inline std::vector<Tensor> zero_masks(int h1, int w1) {
  std::vector<Tensor> masks;
  for (int j = 0; j < kNumParts; ++j) masks.push_back(Tensor::zeros({h1, w1}));
  return masks;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

// Per-joint channel softmax on both pose states, then KL(learner ‖ target)
// averaged over joints. The target side is detached: the transfer branch is
// pulled toward the interactive representation, never the reverse.
inline Tensor alignment_loss(const Tensor& learner, const Tensor& target) {
  if (learner.shape().size() != 2)
    throw ShapeError("alignment_loss: want [joints x c], got " +
                     shape_str(learner.shape()));
  require_same_shape(learner.shape(), target.shape(), "alignment_loss");
  const int joints = learner.shape()[0];
  Tensor eps = Tensor::full(learner.shape(), 1e-30);
  Tensor p = softmax(learner, 1);
  Tensor q = softmax(detach(target), 1);
  Tensor kl = sum_all(
      mul(p, sub(log_elem(add(p, eps)), log_elem(add(q, eps)))));
  return scale(kl, 1.0 / joints);
}

// BCE for both branches plus the alignment term. Predictions and ground
// truth must share shape (callers upsample predictions first).
inline LossBundle total_loss(const Tensor& pred_in, const Tensor& pred_non,
                             const Tensor& gt_in, const Tensor& gt_non,
                             const Tensor& align,
                             const std::array<double, 3>& lambda = {1.0, 1.0,
                                                                    1.0}) {
  LossBundle bundle;
  bundle.interactive = bce_loss(pred_in, gt_in);
  bundle.transfer = bce_loss(pred_non, gt_non);
  bundle.align = align;
  bundle.total = add(add(scale(bundle.interactive, lambda[0]),
                         scale(bundle.transfer, lambda[1])),
                     scale(bundle.align, lambda[2]));
  return bundle;
}

// ---------------------------------------------------------------------------
// The model
// ---------------------------------------------------------------------------

struct AffinityModel {
  ModelConfig cfg;
  // shared trunk
  PyramidEncoder encoder;
  Conv proj4;  // stage-4 channels → c, 1×1
  PoseEncoder pose_encoder;
  PartEmbeddingTable parts;
  // interactive branch
  CrossTransformerBlock part_guide;
  DEQOperator eq_interactive;
  Conv conv_state_in, conv_affinity;
  MultiscaleFuse fuse_in;
  MapNorm norm_in;  // keeps decoder input spatially contrasted
  HeatmapDecoder decode_in;
  // transfer branch
  DEQOperator eq_transfer;
  Conv conv_state_non;
  DEQOperator eq_joint;  // 3 sources: map tokens, contact tokens, pose state
  MultiscaleFuse fuse_non;
  Conv conv_fuse;  // (c + 7c) → c after contact expansion
  MapNorm norm_non;
  HeatmapDecoder decode_non;

  AffinityModel() = default;
  AffinityModel(const ModelConfig& config, Rng& rng)
      : cfg(config),
        encoder(config.channels, config.expansion, rng),
        proj4(config.channels[3], config.c, 1, rng),
        pose_encoder(config.c, config.expansion, rng),
        parts(config.c, rng),
        part_guide(config.c, config.expansion, rng),
        eq_interactive(2, config.c, rng),
        conv_state_in(config.c, config.c, 1, rng),
        conv_affinity(2 * config.c, config.c, 1, rng),
        fuse_in({config.channels[0], config.channels[1], config.channels[2],
                 config.c},
                config.c, rng),
        norm_in(config.c),
        decode_in(config.c, rng),
        eq_transfer(2, config.c, rng),
        conv_state_non(config.c, config.c, 1, rng),
        eq_joint(3, config.c, rng),
        fuse_non({config.channels[0], config.channels[1], config.channels[2],
                  config.c},
                 config.c, rng),
        conv_fuse((1 + kNumParts) * config.c, config.c, 1, rng),
        norm_non(config.c),
        decode_non(config.c, rng) {}

  ParamList parameters() const {
    ParamList out;
    encoder.collect("encoder", out);
    proj4.collect("proj4", out);
    pose_encoder.collect("pose_encoder", out);
    parts.collect("parts", out);
    part_guide.collect("part_guide", out);
    eq_interactive.collect("eq_interactive", out);
    conv_state_in.collect("conv_state_in", out);
    conv_affinity.collect("conv_affinity", out);
    fuse_in.collect("fuse_in", out);
    norm_in.collect("norm_in", out);
    decode_in.collect("decode_in", out);
    eq_transfer.collect("eq_transfer", out);
    conv_state_non.collect("conv_state_non", out);
    eq_joint.collect("eq_joint", out);
    fuse_non.collect("fuse_non", out);
    conv_fuse.collect("conv_fuse", out);
    norm_non.collect("norm_non", out);
    decode_non.collect("decode_non", out);
    return out;
  }

  Tensor pose_tokens(const Tensor& pose_joints) const {
    return pose_encoder.forward(pose_joints);
  }

  InteractiveOutputs interactive_forward(const std::array<Tensor, 4>& stages,
                                         const Tensor& pose_feat) const {
    InteractiveOutputs out;
    Tensor x4 = proj4.forward(stages[3]);
    const int h4 = x4.shape()[1], w4 = x4.shape()[2];
    Tensor tokens4 =
        add(map_to_tokens(x4), token_positions(h4, w4, cfg.c));

    out.guided_tokens = cfg.ablate_text
                            ? tokens4
                            : text_guided_tokens(tokens4, parts.table,
                                                 part_guide);

    if (cfg.ablate_pose) {
      out.z_tokens = Tensor::zeros({h4 * w4, cfg.c});
      out.z_pose = Tensor::zeros({kPoseJoints, cfg.c});
    } else {
      auto [blocks, trace] =
          deq_fuse({tokens4, pose_feat}, eq_interactive, cfg.solver);
      out.z_tokens = blocks[0];
      out.z_pose = blocks[1];
      out.trace = std::move(trace);
    }

    Tensor state_map = conv_state_in.forward(
        add(tokens_to_map(out.z_tokens, h4, w4), x4));
    out.affinity_map = conv_affinity.forward(
        concat({state_map, tokens_to_map(out.guided_tokens, h4, w4)}, 0));
    out.features =
        fuse_in.forward({stages[0], stages[1], stages[2], out.affinity_map});
    out.heatmaps = decode_in.forward(norm_in.forward(out.features));
    return out;
  }

  TransferOutputs transfer_forward(const std::array<Tensor, 4>& stages,
                                   const Tensor& pose_feat,
                                   const Tensor& interactive_features,
                                   const std::vector<Tensor>& masks) const {
    TransferOutputs out;
    Tensor x4 = proj4.forward(stages[3]);
    const int h4 = x4.shape()[1], w4 = x4.shape()[2];
    Tensor tokens4 =
        add(map_to_tokens(x4), token_positions(h4, w4, cfg.c));

    if (cfg.ablate_pose) {
      out.z_tokens = Tensor::zeros({h4 * w4, cfg.c});
      out.z_pose = Tensor::zeros({kPoseJoints, cfg.c});
    } else {
      auto [blocks, trace] =
          deq_fuse({tokens4, pose_feat}, eq_transfer, cfg.solver);
      out.z_tokens = blocks[0];
      out.z_pose = blocks[1];
      out.trace_pair = std::move(trace);
    }

    Tensor state_map = conv_state_non.forward(
        add(tokens_to_map(out.z_tokens, h4, w4), x4));
    Tensor state_tokens =
        add(map_to_tokens(state_map), token_positions(h4, w4, cfg.c));

    out.contact_features = extract_contact_features(interactive_features, masks);
    out.contact_tokens = pool_contact_tokens(out.contact_features, masks);

    if (cfg.ablate_pose) {
      out.z_hat_tokens = Tensor::zeros({h4 * w4, cfg.c});
    } else {
      auto [blocks, trace] =
          deq_fuse({state_tokens, out.contact_tokens, out.z_pose}, eq_joint,
                   cfg.solver);
      out.z_hat_tokens = blocks[0];
      out.trace_joint = std::move(trace);
    }

    out.features =
        fuse_non.forward({stages[0], stages[1], stages[2], state_map});
    const int h1 = out.features.shape()[1], w1 = out.features.shape()[2];

    std::vector<Tensor> fuse_parts;
    fuse_parts.push_back(
        add(out.features,
            bilinear_upsample(tokens_to_map(out.z_hat_tokens, h4, w4), h1, w1)));
    auto part_rows = split(out.contact_tokens, 0,
                           std::vector<int>(kNumParts, 1));
    for (int j = 0; j < kNumParts; ++j)
      fuse_parts.push_back(
          broadcast_spatial(reshape(part_rows[j], {cfg.c}), h1, w1));
    out.fused = conv_fuse.forward(concat(fuse_parts, 0));
    out.heatmaps = decode_non.forward(norm_non.forward(out.fused));
    return out;
  }
};

// ---------------------------------------------------------------------------
// Sample pairs and the training step
// ---------------------------------------------------------------------------

using PointList = std::vector<std::array<int, 2>>;  // (x, y), origin top-left

struct SamplePair {
  std::string id;
  std::string affordance_label;
  std::string object_label;
  Tensor image_in;   // [3,H,W], scene with the interaction
  Tensor image_non;  // [3,H,W], same object without the interaction
  Tensor pose;       // [53,3]
  Tensor gt_in;      // [7,H,W] continuous heatmap targets
  Tensor gt_non;     // [7,H,W]
  std::array<PointList, kNumParts> fixations_in;   // raw annotation points
  std::array<PointList, kNumParts> fixations_non;  // (kept for rank metrics)
};

struct PairForward {
  InteractiveOutputs interactive;
  TransferOutputs transfer;
  LossBundle loss;
};

// Full two-branch forward with teacher-forced contact masks (ground-truth
// interactive heatmaps binarized at 0.5) and image-resolution losses.
inline PairForward training_forward(const AffinityModel& model,
                                    const SamplePair& sample,
                                    const std::array<double, 3>& lambda = {
                                        1.0, 1.0, 1.0}) {
  const int h = sample.image_in.shape()[1], w = sample.image_in.shape()[2];
  PairForward out;
  Tensor pose_feat = model.cfg.ablate_pose
                         ? Tensor::zeros({kPoseJoints, model.cfg.c})
                         : model.pose_tokens(sample.pose);
  auto stages_in = model.encoder.forward(sample.image_in);
  out.interactive = model.interactive_forward(stages_in, pose_feat);

  const int h1 = out.interactive.features.shape()[1];
  const int w1 = out.interactive.features.shape()[2];
  std::vector<Tensor> masks =
      model.cfg.ablate_apparent
          ? zero_masks(h1, w1)
          : masks_from_heatmaps(sample.gt_in, h1, w1);

  auto stages_non = model.encoder.forward(sample.image_non);
  out.transfer = model.transfer_forward(stages_non, pose_feat,
                                        out.interactive.features, masks);

  Tensor align = alignment_loss(out.transfer.z_pose, out.interactive.z_pose);
  out.loss = total_loss(bilinear_upsample(out.interactive.heatmaps, h, w),
                        bilinear_upsample(out.transfer.heatmaps, h, w),
                        sample.gt_in, sample.gt_non, align, lambda);
  return out;
}

// Inference: contact masks come from the interactive branch's own
// prediction, not ground truth.
inline PairForward inference_forward(const AffinityModel& model,
                                     const Tensor& image_in,
                                     const Tensor& image_non,
                                     const Tensor& pose) {
  NoGradScope no_grad;
  PairForward out;
  Tensor pose_feat = model.cfg.ablate_pose
                         ? Tensor::zeros({kPoseJoints, model.cfg.c})
                         : model.pose_tokens(pose);
  auto stages_in = model.encoder.forward(image_in);
  out.interactive = model.interactive_forward(stages_in, pose_feat);

  const int h1 = out.interactive.features.shape()[1];
  const int w1 = out.interactive.features.shape()[2];
  std::vector<Tensor> masks =
      model.cfg.ablate_apparent
          ? zero_masks(h1, w1)
          : masks_from_heatmaps(out.interactive.heatmaps, h1, w1);

  auto stages_non = model.encoder.forward(image_non);
  out.transfer = model.transfer_forward(stages_non, pose_feat,
                                        out.interactive.features, masks);
  return out;
}

struct LossValues {
  double interactive = 0.0;
  double transfer = 0.0;
  double align = 0.0;
  double total = 0.0;
};

struct AdamW {
  double lr = 6e-5;
  double beta1 = 0.9, beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  long long step_count = 0;
  std::vector<std::vector<double>> m, v;  // parallel to the parameter list

  void init(const ParamList& params) {
    m.clear();
    v.clear();
    for (const auto& p : params) {
      m.emplace_back(p.tensor.values().size(), 0.0);
      v.emplace_back(p.tensor.values().size(), 0.0);
    }
    step_count = 0;
  }

  void step(ParamList& params) {
    if (m.size() != params.size())
      throw ConfigError("optimizer state does not match parameter list");
    ++step_count;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
    for (size_t i = 0; i < params.size(); ++i) {
      auto& w = params[i].tensor.mutable_values();
      const auto g = params[i].tensor.grad();
      for (size_t j = 0; j < w.size(); ++j) {
        m[i][j] = beta1 * m[i][j] + (1.0 - beta1) * g[j];
        v[i][j] = beta2 * v[i][j] + (1.0 - beta2) * g[j] * g[j];
        const double m_hat = m[i][j] / bc1;
        const double v_hat = v[i][j] / bc2;
        w[j] -= lr * (m_hat / (std::sqrt(v_hat) + eps) +
                      weight_decay * w[j]);
      }
    }
  }
};

inline void zero_grads(ParamList& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

// One optimizer step over a batch: per-sample graphs, gradients accumulated
// at 1/batch scale, then a single AdamW update. Returns batch-mean losses.
inline LossValues train_step(const AffinityModel& model, ParamList& params,
                             AdamW& opt, const std::vector<SamplePair>& batch,
                             const std::array<double, 3>& lambda = {1.0, 1.0,
                                                                    1.0}) {
  if (batch.empty()) throw ConfigError("train_step: empty batch");
  LossValues values;
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (const auto& sample : batch) {
    Graph graph;
    RecordScope scope(graph);
    PairForward fwd = training_forward(model, sample, lambda);
    const double total = fwd.loss.total.item();
    if (!std::isfinite(total))
      throw NumericError("train_step: non-finite loss");
    values.interactive += inv * fwd.loss.interactive.item();
    values.transfer += inv * fwd.loss.transfer.item();
    values.align += inv * fwd.loss.align.item();
    values.total += inv * total;
    graph.backward(scale(fwd.loss.total, inv).node());
  }
  opt.step(params);
  zero_grads(params);
  return values;
}

}  // namespace affnet
