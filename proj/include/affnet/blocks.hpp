#pragma once

// Architectural building blocks: linear/conv parameter bundles, the
// cross-transformer block, the four-stage pyramid image encoder, the pose
// encoder, the learned part-embedding table, multi-scale feature fusion, and
// the heatmap decoder. Blocks are immutable parameter bundles during forward;
// the optimizer is the single writer between graphs.
//
// Layout conventions: token streams are [L, c] (tokens first), spatial maps
// are [c, h, w]. Where the wider literature writes c×L tables, that is the
// transposed storage of the same data.

#include <cctype>

#include <json.hpp>

#include "affnet/ops.hpp"

namespace affnet {

struct NamedParam {
  std::string name;
  Tensor tensor;
};
using ParamList = std::vector<NamedParam>;

inline Tensor init_param(Shape shape, Rng& rng, double std_dev) {
  std::vector<double> v(static_cast<size_t>(numel(shape)));
  for (double& x : v) x = rng.gaussian() * std_dev;
  return Tensor::from(std::move(shape), std::move(v), true);
}

// ---------------------------------------------------------------------------
// Parameter bundles
// ---------------------------------------------------------------------------

struct Linear {
  Tensor w;  // [in, out]
  Tensor b;  // [out]; undefined for bias-free projections

  Linear() = default;
  Linear(int in, int out, bool bias, Rng& rng) {
    w = init_param({in, out}, rng, 1.0 / std::sqrt(static_cast<double>(in)));
    if (bias) b = Tensor::zeros({out}, true);
  }

  Tensor forward(const Tensor& x) const {  // x: [L, in]
    Tensor y = matmul(x, w);
    if (b.defined()) y = add(y, broadcast_rows(b, y.shape()[0]));
    return y;
  }

  void collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".w", w});
    if (b.defined()) out.push_back({prefix + ".b", b});
  }
};

struct Conv {
  Tensor w;  // [co, ci, k, k]
  Tensor b;  // [co]

  Conv() = default;
  Conv(int ci, int co, int k, Rng& rng) {
    w = init_param({co, ci, k, k}, rng,
                   1.0 / std::sqrt(static_cast<double>(ci) * k * k));
    b = Tensor::zeros({co}, true);
  }

  // Reflect padding so dense heads see interior-like statistics at borders;
  // zero padding leaves every conv stack with a distinct rim response.
  Tensor forward(const Tensor& x, int stride = 1) const {
    Tensor y = conv2d_strided(x, w, stride, PadMode::kReflect);
    return add(y, broadcast_spatial(b, y.shape()[1], y.shape()[2]));
  }

  void collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".w", w});
    out.push_back({prefix + ".b", b});
  }
};

struct LayerNormParams {
  Tensor gain, bias;

  LayerNormParams() = default;
  explicit LayerNormParams(int c) {
    gain = Tensor::full({c}, 1.0, true);
    bias = Tensor::zeros({c}, true);
  }

  Tensor forward(const Tensor& x) const { return layernorm(x, gain, bias); }

  void collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".gain", gain});
    out.push_back({prefix + ".bias", bias});
  }
};

// ---------------------------------------------------------------------------
// Per-channel spatial normalization for [c,h,w] maps with learnable scale and
// shift. Guarantees every channel keeps spatial contrast into the decoders;
// without it a dense head under heavy background pressure can settle on a
// spatially constant output and stall there.
// ---------------------------------------------------------------------------

struct MapNorm {
  Tensor gain, bias;

  MapNorm() = default;
  explicit MapNorm(int c) {
    gain = Tensor::full({c}, 1.0, true);
    bias = Tensor::zeros({c}, true);
  }

  Tensor forward(const Tensor& x) const {
    if (x.shape().size() != 3)
      throw ShapeError("MapNorm: [c,h,w] required, got " +
                       shape_str(x.shape()));
    const int h = x.shape()[1], w = x.shape()[2];
    Tensor mu = global_mean_pool(x);
    Tensor centered = sub(x, broadcast_spatial(mu, h, w));
    Tensor var = global_mean_pool(mul(centered, centered));
    Tensor inv_std = exp_elem(
        scale(log_elem(add(var, Tensor::full(var.shape(), 1e-6))), -0.5));
    Tensor normed = mul(centered, broadcast_spatial(inv_std, h, w));
    return add(mul(normed, broadcast_spatial(gain, h, w)),
               broadcast_spatial(bias, h, w));
  }

  void collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".gain", gain});
    out.push_back({prefix + ".bias", bias});
  }
};

// ---------------------------------------------------------------------------
// Token helpers
// ---------------------------------------------------------------------------

inline Tensor map_to_tokens(const Tensor& x) {  // [c,h,w] → [h·w, c]
  if (x.shape().size() != 3)
    throw ShapeError("map_to_tokens: [c,h,w] required, got " +
                     shape_str(x.shape()));
  const int c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  return transpose2d(reshape(x, {c, h * w}));
}

inline Tensor tokens_to_map(const Tensor& t, int h, int w) {  // [L,c] → [c,h,w]
  if (t.shape().size() != 2 || t.shape()[0] != h * w)
    throw ShapeError("tokens_to_map: got " + shape_str(t.shape()) + " for " +
                     std::to_string(h) + "x" + std::to_string(w));
  const int c = t.shape()[1];
  return reshape(transpose2d(t), {c, h, w});
}

// ---------------------------------------------------------------------------
// Cross-transformer block: Y = MCA(LN(x1), LN(x2)) + x1; O = MLP(LN(Y)) + Y.
// Single head, scores scaled by 1/sqrt(c). Self-attention is forward(x, x).
// ---------------------------------------------------------------------------

struct CrossTransformerBlock {
  int c = 0;
  Linear wq, wk, wv, wo;  // bias-free c×c projections
  LayerNormParams ln_attn, ln_mlp;
  Linear mlp_in, mlp_out;  // c → expansion·c → c

  CrossTransformerBlock() = default;
  CrossTransformerBlock(int c_, int expansion, Rng& rng)
      : c(c_),
        wq(c_, c_, false, rng),
        wk(c_, c_, false, rng),
        wv(c_, c_, false, rng),
        wo(c_, c_, false, rng),
        ln_attn(c_),
        ln_mlp(c_),
        mlp_in(c_, expansion * c_, true, rng),
        mlp_out(expansion * c_, c_, true, rng) {}

  Tensor forward(const Tensor& x1, const Tensor& x2) const {
    if (x1.shape().size() != 2 || x2.shape().size() != 2 ||
        x1.shape()[1] != c || x2.shape()[1] != c)
      throw ShapeError("cross_transformer: channel mismatch, " +
                       shape_str(x1.shape()) + " and " +
                       shape_str(x2.shape()) + " vs c=" + std::to_string(c));
    Tensor q = wq.forward(ln_attn.forward(x1));
    Tensor kv_in = ln_attn.forward(x2);
    Tensor k = wk.forward(kv_in);
    Tensor v = wv.forward(kv_in);
    Tensor scores =
        scale(matmul(q, transpose2d(k)), 1.0 / std::sqrt(static_cast<double>(c)));
    Tensor y = add(wo.forward(matmul(softmax(scores, 1), v)), x1);
    Tensor m = mlp_out.forward(gelu(mlp_in.forward(ln_mlp.forward(y))));
    return add(m, y);
  }

  void collect(const std::string& prefix, ParamList& out) const {
    wq.collect(prefix + ".wq", out);
    wk.collect(prefix + ".wk", out);
    wv.collect(prefix + ".wv", out);
    wo.collect(prefix + ".wo", out);
    ln_attn.collect(prefix + ".ln_attn", out);
    ln_mlp.collect(prefix + ".ln_mlp", out);
    mlp_in.collect(prefix + ".mlp_in", out);
    mlp_out.collect(prefix + ".mlp_out", out);
  }
};

// Query = stage-4 tokens; key/value = those tokens with the 7 part embeddings
// appended along the token axis.
inline Tensor text_guided_tokens(const Tensor& x_in, const Tensor& x_t,
                                 const CrossTransformerBlock& block) {
  return block.forward(x_in, concat({x_in, x_t}, 0));
}

// ---------------------------------------------------------------------------
// Pyramid image encoder: four stages of strided conv + one self-attention
// transformer block; stage i emits c_i×(h/2^{i+1})×(w/2^{i+1}).
// ---------------------------------------------------------------------------

struct PyramidEncoder {
  std::array<int, 4> channels{32, 64, 160, 256};
  std::array<Conv, 4> convs;
  std::array<CrossTransformerBlock, 4> attns;

  PyramidEncoder() = default;
  PyramidEncoder(const std::array<int, 4>& c_i, int expansion, Rng& rng)
      : channels(c_i) {
    int prev = 3;
    for (int i = 0; i < 4; ++i) {
      convs[i] = Conv(prev, channels[i], 3, rng);
      attns[i] = CrossTransformerBlock(channels[i], expansion, rng);
      prev = channels[i];
    }
  }

  std::array<Tensor, 4> forward(const Tensor& img) const {
    if (img.shape().size() != 3 || img.shape()[0] != 3)
      throw ShapeError("encode_image: [3,h,w] required, got " +
                       shape_str(img.shape()));
    const int h = img.shape()[1], w = img.shape()[2];
    if (h % 32 != 0 || w % 32 != 0 || h < 32 || w < 32)
      throw ShapeError("encode_image: spatial size " + std::to_string(h) +
                       "x" + std::to_string(w) + " not divisible by 32");
    std::array<Tensor, 4> out;
    Tensor cur = img;
    for (int i = 0; i < 4; ++i) {
      const int stride = i == 0 ? 4 : 2;
      Tensor m = convs[i].forward(cur, stride);
      const int mh = m.shape()[1], mw = m.shape()[2];
      Tensor tokens = map_to_tokens(m);
      cur = tokens_to_map(attns[i].forward(tokens, tokens), mh, mw);
      out[i] = cur;
    }
    return out;
  }

  void collect(const std::string& prefix, ParamList& out) const {
    for (int i = 0; i < 4; ++i) {
      convs[i].collect(prefix + ".stage" + std::to_string(i + 1) + ".conv",
                       out);
      attns[i].collect(prefix + ".stage" + std::to_string(i + 1) + ".attn",
                       out);
    }
  }
};

// ---------------------------------------------------------------------------
// Pose encoder: linear lift 3→c per joint, then two self-attention layers.
// ---------------------------------------------------------------------------

constexpr int kPoseJoints = 53;

struct PoseEncoder {
  Linear lift;
  CrossTransformerBlock layer1, layer2;

  PoseEncoder() = default;
  PoseEncoder(int c, int expansion, Rng& rng)
      : lift(3, c, true, rng),
        layer1(c, expansion, rng),
        layer2(c, expansion, rng) {}

  Tensor forward(const Tensor& pose) const {  // [53,3] → [53,c]
    if (pose.shape() != Shape{kPoseJoints, 3})
      throw ShapeError("pose_encode: [53,3] required, got " +
                       shape_str(pose.shape()));
    Tensor t = lift.forward(pose);
    t = layer1.forward(t, t);
    return layer2.forward(t, t);
  }

  void collect(const std::string& prefix, ParamList& out) const {
    lift.collect(prefix + ".lift", out);
    layer1.collect(prefix + ".layer1", out);
    layer2.collect(prefix + ".layer2", out);
  }
};

// ---------------------------------------------------------------------------
// Part embeddings: 7 learned c-vectors, one per body part.
// ---------------------------------------------------------------------------

constexpr int kNumParts = 7;

struct PartEmbeddingTable {
  Tensor table;  // [7, c]

  PartEmbeddingTable() = default;
  PartEmbeddingTable(int c, Rng& rng) { table = init_param({kNumParts, c}, rng, 1.0); }

  Tensor row(int part) const {
    if (part < 0 || part >= kNumParts)
      throw ConfigError("part embedding index " + std::to_string(part) +
                        " out of range");
    std::vector<int> sizes;
    if (part > 0) sizes.push_back(part);
    sizes.push_back(1);
    if (part < kNumParts - 1) sizes.push_back(kNumParts - 1 - part);
    auto pieces = split(table, 0, sizes);
    Tensor r = pieces[part > 0 ? 1 : 0];
    return reshape(r, {table.shape()[1]});
  }

  void collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".table", table});
  }
};

// ---------------------------------------------------------------------------
// Multi-scale fusion: project each stage to c channels (1×1 conv), upsample
// to the stage-1 grid, concatenate, and project the 4c stack back to c.
// ---------------------------------------------------------------------------

struct MultiscaleFuse {
  std::array<Conv, 4> proj;
  Conv out;

  MultiscaleFuse() = default;
  MultiscaleFuse(const std::array<int, 4>& in_channels, int c, Rng& rng) {
    for (int i = 0; i < 4; ++i) proj[i] = Conv(in_channels[i], c, 1, rng);
    out = Conv(4 * c, c, 1, rng);
  }

  Tensor forward(const std::array<Tensor, 4>& maps) const {
    const int h1 = maps[0].shape()[1], w1 = maps[0].shape()[2];
    std::vector<Tensor> ups;
    for (int i = 0; i < 4; ++i) {
      Tensor p = proj[i].forward(maps[i]);
      ups.push_back(i == 0 ? p : bilinear_upsample(p, h1, w1));
    }
    return out.forward(concat(ups, 0));
  }

  void collect(const std::string& prefix, ParamList& out_list) const {
    for (int i = 0; i < 4; ++i)
      proj[i].collect(prefix + ".proj" + std::to_string(i + 1), out_list);
    out.collect(prefix + ".out", out_list);
  }
};

// ---------------------------------------------------------------------------
// Heatmap decoder: conv3×3 → relu → conv1×1 to 7 channels → sigmoid.
// ---------------------------------------------------------------------------

struct HeatmapDecoder {
  Conv conv1, conv2;

  HeatmapDecoder() = default;
  HeatmapDecoder(int c, Rng& rng)
      : conv1(c, c, 3, rng), conv2(c, kNumParts, 1, rng) {}

  Tensor forward(const Tensor& feat) const {
    return sigmoid(conv2.forward(relu(conv1.forward(feat))));
  }

  void collect(const std::string& prefix, ParamList& out) const {
    conv1.collect(prefix + ".conv1", out);
    conv2.collect(prefix + ".conv2", out);
  }
};

// ---------------------------------------------------------------------------
// Fixed 2-D sinusoidal position table for token grids. Attention over image
// tokens is content-only; adding these phases lets it bind content to a
// location, which dense localization needs.
// ---------------------------------------------------------------------------

inline Tensor token_positions(int h, int w, int c) {
  std::vector<double> v(static_cast<size_t>(h) * w * c, 0.0);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      double* row = v.data() + (static_cast<size_t>(i) * w + j) * c;
      const double ai = h > 1 ? M_PI * i / (h - 1) : 0.0;  // 0..pi over rows
      const double aj = w > 1 ? M_PI * j / (w - 1) : 0.0;
      for (int base = 0; base + 3 < c; base += 4) {
        const double scale = std::pow(2.0, base / 4);  // octave per group
        row[base + 0] = std::sin(scale * ai);
        row[base + 1] = std::cos(scale * ai);
        row[base + 2] = std::sin(scale * aj);
        row[base + 3] = std::cos(scale * aj);
      }
    }
  return Tensor::from({h * w, c}, std::move(v));
}

// ---------------------------------------------------------------------------
// Checkpoint I/O: a directory of named TNSR files plus a JSON manifest.
// ---------------------------------------------------------------------------

inline std::string sanitize_param_name(const std::string& name) {
  std::string out = name;
  for (char& ch : out)
    if (!std::isalnum(static_cast<unsigned char>(ch))) ch = '_';
  return out;
}

inline void save_checkpoint(const std::filesystem::path& dir,
                            const ParamList& params,
                            const nlohmann::json& extra) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "affnet-checkpoint";
  manifest["version"] = 1;
  nlohmann::json files = nlohmann::json::object();
  int idx = 0;
  for (const auto& p : params) {
    char num[16];
    std::snprintf(num, sizeof num, "p%04d_", idx++);
    const std::string file = std::string(num) + sanitize_param_name(p.name) +
                             ".tnsr";
    save_tnsr(dir / file, p.tensor);
    files[p.name] = file;
  }
  manifest["params"] = files;
  for (auto it = extra.begin(); it != extra.end(); ++it)
    manifest[it.key()] = it.value();
  atomic_write_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline nlohmann::json read_checkpoint_manifest(
    const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_file_bytes(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError("checkpoint manifest " + path.string() +
                    " is not valid JSON (byte offset " +
                    std::to_string(e.byte) + ")");
  }
  if (manifest.value("format", "") != "affnet-checkpoint")
    throw DataError("not a checkpoint manifest: " + path.string());
  return manifest;
}

// Loads values into an existing parameter list (shapes must match the
// manifest's tensors exactly; version/shape mismatches are reported).
inline void load_checkpoint(const std::filesystem::path& dir,
                            ParamList& params, nlohmann::json* manifest_out) {
  nlohmann::json manifest = read_checkpoint_manifest(dir);
  if (manifest.value("version", 0) != 1)
    throw ConfigError("checkpoint " + dir.string() +
                      " has unsupported version " +
                      std::to_string(manifest.value("version", 0)));
  const auto& files = manifest.at("params");
  for (auto& p : params) {
    if (!files.contains(p.name))
      throw ConfigError("checkpoint " + dir.string() + " (version 1) missing parameter " +
                        p.name);
    Tensor t = load_tnsr(dir / files.at(p.name).get<std::string>());
    if (t.shape() != p.tensor.shape())
      throw ConfigError("checkpoint " + dir.string() + " (version 1): parameter " +
                        p.name + " has shape " + shape_str(t.shape()) +
                        ", model expects " + shape_str(p.tensor.shape()));
    p.tensor.mutable_values() = t.values();
  }
  if (manifest_out) *manifest_out = std::move(manifest);
}

}  // namespace affnet
