#pragma once

// Operator-facing entry points: dataset generation, training, evaluation,
// and inference, shared by the command-line tool and by test fixtures. Every
// run writes a resolved_config.json echoing the effective settings, and all
// artifacts are plain files (CSV, SVG, PPM, TNSR, JSON).

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "affnet/data.hpp"
#include "affnet/metrics.hpp"

namespace affnet {

// ---------------------------------------------------------------------------
// Horizontal-flip augmentation. Applied consistently: image columns, ground
// truth heatmaps, annotation points, and the normalized pose x-coordinates
// all mirror about the vertical axis.
// ---------------------------------------------------------------------------

inline Tensor hflip_image(const Tensor& t) {
  const Shape& sh = t.shape();
  if (sh.size() != 3) throw ShapeError("hflip_image expects a [c,h,w] tensor");
  const int c = sh[0], h = sh[1], w = sh[2];
  const std::vector<double>& v = t.values();
  std::vector<double> out(v.size());
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        out[(static_cast<size_t>(ch) * h + y) * w + x] =
            v[(static_cast<size_t>(ch) * h + y) * w + (w - 1 - x)];
  return Tensor::from(sh, std::move(out));
}

inline PointList hflip_points(const PointList& pts, int w) {
  PointList out;
  out.reserve(pts.size());
  for (const auto& p : pts) out.push_back({w - 1 - p[0], p[1]});
  return out;
}

// Pose x is stored normalized (pixel / width), so the mirror of pixel x is
// (w-1) - x, i.e. x' = (w-1)/w - x in normalized coordinates.
inline Tensor hflip_pose(const Tensor& pose, int w) {
  const Shape& sh = pose.shape();
  if (sh.size() != 2 || sh[1] != 3)
    throw ShapeError("hflip_pose expects a [joints,3] tensor");
  std::vector<double> v = pose.values();
  for (int j = 0; j < sh[0]; ++j)
    v[static_cast<size_t>(j) * 3] =
        (w - 1.0) / w - v[static_cast<size_t>(j) * 3];
  return Tensor::from(sh, std::move(v));
}

inline SamplePair hflip_pair(const SamplePair& s) {
  SamplePair out = s;
  const int w_in = s.image_in.shape()[2];
  const int w_non = s.image_non.shape()[2];
  out.image_in = hflip_image(s.image_in);
  out.image_non = hflip_image(s.image_non);
  out.gt_in = hflip_image(s.gt_in);
  out.gt_non = hflip_image(s.gt_non);
  out.pose = hflip_pose(s.pose, w_in);
  for (int j = 0; j < kNumParts; ++j) {
    out.fixations_in[j] = hflip_points(s.fixations_in[j], w_in);
    out.fixations_non[j] = hflip_points(s.fixations_non[j], w_non);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Config serialization
// ---------------------------------------------------------------------------

namespace detail {

inline void require_keys(const nlohmann::json& j,
                         std::initializer_list<const char*> allowed,
                         const std::string& who) {
  if (!j.is_object()) throw ConfigError(who + ": expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : allowed)
      if (it.key() == k) {
        known = true;
        break;
      }
    if (!known) throw ConfigError(who + ": unknown key \"" + it.key() + "\"");
  }
}

// Copies a heatmap/image channel into a standalone [h,w] tensor.
inline Tensor channel_plane(const Tensor& t, int c) {
  const Shape& sh = t.shape();
  if (sh.size() != 3 || c < 0 || c >= sh[0])
    throw ShapeError("channel_plane: bad channel index");
  const size_t plane = static_cast<size_t>(sh[1]) * sh[2];
  const std::vector<double>& v = t.values();
  std::vector<double> out(v.begin() + static_cast<long>(c * plane),
                          v.begin() + static_cast<long>((c + 1) * plane));
  return Tensor::from({sh[1], sh[2]}, std::move(out));
}

}  // namespace detail

inline nlohmann::json solver_to_json(const SolverConfig& s) {
  return {{"tol", s.tol},
          {"max_iter", s.max_iter},
          {"anderson_memory", s.anderson_memory},
          {"damping", s.damping}};
}

inline SolverConfig solver_from_json(const nlohmann::json& j,
                                     SolverConfig base = {}) {
  detail::require_keys(j, {"tol", "max_iter", "anderson_memory", "damping"},
                       "solver config");
  try {
    base.tol = j.value("tol", base.tol);
    base.max_iter = j.value("max_iter", base.max_iter);
    base.anderson_memory = j.value("anderson_memory", base.anderson_memory);
    base.damping = j.value("damping", base.damping);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("solver config: ") + e.what());
  }
  return base;
}

inline nlohmann::json model_config_to_json(const ModelConfig& m) {
  return {{"c", m.c},
          {"channels", m.channels},
          {"expansion", m.expansion},
          {"solver", solver_to_json(m.solver)},
          {"ablate",
           {{"text", m.ablate_text},
            {"pose", m.ablate_pose},
            {"apparent", m.ablate_apparent}}}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j,
                                          ModelConfig base = {}) {
  detail::require_keys(j, {"c", "channels", "expansion", "solver", "ablate"},
                       "model config");
  try {
    base.c = j.value("c", base.c);
    if (j.contains("channels")) {
      const auto& ch = j.at("channels");
      if (!ch.is_array() || ch.size() != 4)
        throw ConfigError("model config: channels must be an array of 4 ints");
      for (int i = 0; i < 4; ++i) base.channels[i] = ch[i].get<int>();
    }
    base.expansion = j.value("expansion", base.expansion);
    if (j.contains("solver"))
      base.solver = solver_from_json(j.at("solver"), base.solver);
    if (j.contains("ablate")) {
      const auto& a = j.at("ablate");
      detail::require_keys(a, {"text", "pose", "apparent"}, "ablate config");
      base.ablate_text = a.value("text", base.ablate_text);
      base.ablate_pose = a.value("pose", base.ablate_pose);
      base.ablate_apparent = a.value("apparent", base.ablate_apparent);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  return base;
}

struct TrainSettings {
  uint64_t seed = 7;
  int steps = 100;
  int batch_size = 4;
  double lr = 6e-5;
  double weight_decay = 0.01;
  std::array<double, 3> lambda{1.0, 1.0, 1.0};
  bool flip = true;  // random horizontal flip augmentation
  ModelConfig model;
};

inline nlohmann::json train_settings_to_json(const TrainSettings& s) {
  return {{"seed", s.seed},
          {"steps", s.steps},
          {"batch_size", s.batch_size},
          {"lr", s.lr},
          {"weight_decay", s.weight_decay},
          {"lambda", s.lambda},
          {"flip", s.flip},
          {"model", model_config_to_json(s.model)}};
}

inline TrainSettings train_settings_from_json(const nlohmann::json& j,
                                              TrainSettings base = {}) {
  detail::require_keys(j,
                       {"seed", "steps", "batch_size", "lr", "weight_decay",
                        "lambda", "flip", "model"},
                       "train config");
  try {
    base.seed = j.value("seed", base.seed);
    base.steps = j.value("steps", base.steps);
    base.batch_size = j.value("batch_size", base.batch_size);
    base.lr = j.value("lr", base.lr);
    base.weight_decay = j.value("weight_decay", base.weight_decay);
    if (j.contains("lambda")) {
      const auto& l = j.at("lambda");
      if (!l.is_array() || l.size() != 3)
        throw ConfigError("train config: lambda must be an array of 3 numbers");
      for (int i = 0; i < 3; ++i) base.lambda[i] = l[i].get<double>();
    }
    base.flip = j.value("flip", base.flip);
    if (j.contains("model"))
      base.model = model_config_from_json(j.at("model"), base.model);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  return base;
}

inline nlohmann::json parse_json_file(const std::filesystem::path& path,
                                      const std::string& who) {
  try {
    return nlohmann::json::parse(read_file_bytes(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(who + " " + path.string() +
                      " is not valid JSON (byte offset " +
                      std::to_string(e.byte) + ")");
  }
}

// ---------------------------------------------------------------------------
// Training checkpoints: model parameters plus optimizer moments, so a resumed
// run continues deterministically from the stored step count.
// ---------------------------------------------------------------------------

inline void save_training_checkpoint(const std::filesystem::path& dir,
                                     const ParamList& params, const AdamW& opt,
                                     long long trained_steps, uint64_t seed,
                                     const ModelConfig& model_cfg) {
  if (opt.m.size() != params.size())
    throw ConfigError("checkpoint: optimizer state does not match parameters");
  ParamList full = params;
  for (size_t i = 0; i < params.size(); ++i) {
    full.push_back({"opt.m." + params[i].name,
                    Tensor::from(params[i].tensor.shape(),
                                 std::vector<double>(opt.m[i]))});
    full.push_back({"opt.v." + params[i].name,
                    Tensor::from(params[i].tensor.shape(),
                                 std::vector<double>(opt.v[i]))});
  }
  nlohmann::json extra;
  extra["trained_steps"] = trained_steps;
  extra["train_seed"] = seed;
  extra["model"] = model_config_to_json(model_cfg);
  extra["optimizer"] = {{"lr", opt.lr},
                        {"beta1", opt.beta1},
                        {"beta2", opt.beta2},
                        {"eps", opt.eps},
                        {"weight_decay", opt.weight_decay},
                        {"step_count", opt.step_count}};
  save_checkpoint(dir, full, extra);
}

// Loads parameters (always) and, when opt is non-null, the stored Adam
// moments and step count. Returns the manifest for its metadata.
inline nlohmann::json load_training_checkpoint(
    const std::filesystem::path& dir, ParamList& params, AdamW* opt) {
  nlohmann::json manifest;
  load_checkpoint(dir, params, &manifest);
  if (opt) {
    ParamList moments;
    for (const auto& p : params) {
      moments.push_back({"opt.m." + p.name, Tensor::zeros(p.tensor.shape())});
      moments.push_back({"opt.v." + p.name, Tensor::zeros(p.tensor.shape())});
    }
    load_checkpoint(dir, moments, nullptr);
    opt->init(params);
    for (size_t i = 0; i < params.size(); ++i) {
      opt->m[i] = moments[2 * i].tensor.values();
      opt->v[i] = moments[2 * i + 1].tensor.values();
    }
    try {
      opt->step_count =
          manifest.value("optimizer", nlohmann::json::object())
              .value("step_count", static_cast<long long>(0));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("checkpoint optimizer metadata: ") +
                        e.what());
    }
  }
  return manifest;
}

inline ModelConfig model_config_from_checkpoint(
    const std::filesystem::path& dir) {
  nlohmann::json manifest = read_checkpoint_manifest(dir);
  if (!manifest.contains("model"))
    throw ConfigError("checkpoint " + dir.string() +
                      " does not record a model config");
  return model_config_from_json(manifest.at("model"), ModelConfig{});
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

struct GenerateResult {
  int count = 0;
  std::filesystem::path dir;
};

inline GenerateResult run_generate(int count, uint64_t seed,
                                   const std::filesystem::path& out_dir,
                                   int image_size = 224) {
  if (count < 1) throw ConfigError("generate: count must be >= 1");
  if (image_size % 32 != 0)
    throw ConfigError(
        "generate: image size must be a multiple of 32 (encoder stride)");
  const auto vocab = affordance_vocabulary();
  std::vector<GeneratedPair> pairs;
  std::vector<RecordKey> keys;
  pairs.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    const std::string& cls = vocab[static_cast<size_t>(i) % vocab.size()].name;
    pairs.push_back(
        generate_synthetic_pair(seed + static_cast<uint64_t>(i), cls,
                                image_size));
    keys.push_back({pairs.back().sample.id, cls,
                    pairs.back().sample.object_label});
  }
  write_dataset(out_dir, pairs);
  for (const char* kind : {"seen", "obj_unseen", "aff_unseen"})
    save_manifest(out_dir / "splits" / (std::string(kind) + ".json"),
                  build_split(keys, kind, seed));
  nlohmann::json resolved = {{"command", "generate"},
                             {"count", count},
                             {"seed", seed},
                             {"image_size", image_size},
                             {"out", out_dir.string()}};
  atomic_write_file(out_dir / "resolved_config.json", resolved.dump(2) + "\n");
  return {count, out_dir};
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

namespace detail {

// Decorrelates per-step RNG streams: nearby (seed, step) pairs must not
// produce overlapping draws, so scramble with a splitmix-style avalanche.
inline uint64_t step_stream_seed(uint64_t seed, long long step) {
  uint64_t s = seed + 0x9e3779b97f4a7c15ULL * static_cast<uint64_t>(step);
  s ^= s >> 30;
  s *= 0xbf58476d1ce4e5b9ULL;
  s ^= s >> 27;
  s *= 0x94d049bb133111ebULL;
  s ^= s >> 31;
  return s;
}

// Off-tape replay of a failing batch to capture solver traces. The forward
// is deterministic, so the replay sees exactly the diverged solves.
inline void dump_failure_traces(const std::filesystem::path& out_dir,
                                const AffinityModel& model,
                                const std::vector<SamplePair>& batch) {
  std::string csv = trace_csv_header();
  int call_id = 0;
  for (const auto& sample : batch) {
    try {
      PairForward fwd = training_forward(model, sample);
      for (const DEQTrace* t :
           {&fwd.interactive.trace, &fwd.transfer.trace_pair,
            &fwd.transfer.trace_joint})
        if (!t->solver.empty()) append_trace_csv(csv, call_id++, *t);
    } catch (const DivergenceError& e) {
      append_trace_csv(csv, call_id++, e.trace);
    } catch (const NumericError&) {
      // forward failed before any solve produced a trace; nothing to record
    }
  }
  atomic_write_file(out_dir / "failure_traces.csv", csv);
}

inline std::map<std::string, const SamplePair*> index_by_id(
    const std::vector<SamplePair>& samples) {
  std::map<std::string, const SamplePair*> by_id;
  for (const auto& s : samples) by_id[s.id] = &s;
  return by_id;
}

inline std::vector<const SamplePair*> select_ids(
    const std::map<std::string, const SamplePair*>& by_id,
    const std::vector<std::string>& ids, const std::string& who) {
  std::vector<const SamplePair*> out;
  for (const auto& id : ids) {
    auto it = by_id.find(id);
    if (it == by_id.end())
      throw DataError(who + ": manifest id " + id + " is not in the dataset");
    out.push_back(it->second);
  }
  return out;
}

}  // namespace detail

struct TrainResult {
  std::vector<LossValues> losses;  // one entry per step of this run
  std::filesystem::path checkpoint_dir;
  long long start_step = 0;  // steps already in the resumed checkpoint
};

inline TrainResult run_train(const std::filesystem::path& data_dir,
                             const std::filesystem::path& out_dir,
                             const std::string& split_kind,
                             TrainSettings settings,
                             const std::filesystem::path& resume = {}) {
  if (settings.steps < 1) throw ConfigError("train: steps must be >= 1");
  if (settings.batch_size < 1)
    throw ConfigError("train: batch_size must be >= 1");

  std::vector<SamplePair> samples = load_dataset(data_dir);
  SplitManifest manifest =
      load_manifest(data_dir / "splits" / (split_kind + ".json"));
  auto by_id = detail::index_by_id(samples);
  auto train_set = detail::select_ids(by_id, manifest.train, "train");
  if (train_set.empty()) throw DataError("train: split has no training ids");

  AdamW opt;
  opt.lr = settings.lr;
  opt.weight_decay = settings.weight_decay;
  long long start_step = 0;
  AffinityModel model;
  ParamList params;
  if (resume.empty()) {
    Rng init_rng(settings.seed);
    model = AffinityModel(settings.model, init_rng);
    params = model.parameters();
    opt.init(params);
  } else {
    // The checkpoint owns the architecture; settings keep the optimizer
    // hyperparameters and the sampling seed.
    settings.model = model_config_from_checkpoint(resume);
    Rng init_rng(settings.seed);
    model = AffinityModel(settings.model, init_rng);
    params = model.parameters();
    nlohmann::json ck = load_training_checkpoint(resume, params, &opt);
    opt.lr = settings.lr;
    opt.weight_decay = settings.weight_decay;
    start_step = ck.value("trained_steps", static_cast<long long>(0));
  }

  std::filesystem::create_directories(out_dir);
  std::string csv = "step,l_in,l_non,l_align,l_total\n";
  TrainResult result;
  result.start_step = start_step;
  for (long long step = start_step + 1; step <= start_step + settings.steps;
       ++step) {
    Rng step_rng(detail::step_stream_seed(settings.seed, step));
    std::vector<SamplePair> batch;
    batch.reserve(static_cast<size_t>(settings.batch_size));
    for (int b = 0; b < settings.batch_size; ++b) {
      const SamplePair* src =
          train_set[static_cast<size_t>(step_rng.uniform_int(
              static_cast<int>(train_set.size())))];
      const bool flip = settings.flip && step_rng.uniform() < 0.5;
      batch.push_back(flip ? hflip_pair(*src) : *src);
    }
    LossValues lv;
    try {
      lv = train_step(model, params, opt, batch, settings.lambda);
    } catch (const NumericError&) {
      detail::dump_failure_traces(out_dir, model, batch);
      atomic_write_file(out_dir / "loss.csv", csv);
      throw;
    }
    char line[192];
    std::snprintf(line, sizeof line, "%lld,%.9e,%.9e,%.9e,%.9e\n", step,
                  lv.interactive, lv.transfer, lv.align, lv.total);
    csv += line;
    result.losses.push_back(lv);
  }
  atomic_write_file(out_dir / "loss.csv", csv);
  result.checkpoint_dir = out_dir / "checkpoint";
  save_training_checkpoint(result.checkpoint_dir, params, opt,
                           start_step + settings.steps, settings.seed,
                           settings.model);
  nlohmann::json resolved = {{"command", "train"},
                             {"data", data_dir.string()},
                             {"out", out_dir.string()},
                             {"split", split_kind},
                             {"resume", resume.string()},
                             {"start_step", start_step},
                             {"settings", train_settings_to_json(settings)}};
  atomic_write_file(out_dir / "resolved_config.json", resolved.dump(2) + "\n");
  return result;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalResult {
  MetricReport report_in, report_non;
  std::vector<CurvePoint> curve;  // transfer-branch PR/F, averaged per image
  std::map<int, int> iteration_histogram;
  int deq_calls = 0;
  int samples = 0;
};

inline EvalResult run_eval(const std::filesystem::path& data_dir,
                           const std::filesystem::path& checkpoint,
                           const std::filesystem::path& out_dir,
                           const std::string& split_kind,
                           const std::string& subset = "test") {
  ModelConfig mc = model_config_from_checkpoint(checkpoint);
  Rng rng(1);  // construction values are overwritten by the checkpoint
  AffinityModel model(mc, rng);
  ParamList params = model.parameters();
  load_checkpoint(checkpoint, params, nullptr);

  std::vector<SamplePair> samples = load_dataset(data_dir);
  SplitManifest manifest =
      load_manifest(data_dir / "splits" / (split_kind + ".json"));
  const std::vector<std::string>* ids = nullptr;
  if (subset == "train")
    ids = &manifest.train;
  else if (subset == "val")
    ids = &manifest.val;
  else if (subset == "test")
    ids = &manifest.test;
  else
    throw ConfigError("eval: unknown subset \"" + subset +
                      "\" (train|val|test)");
  auto by_id = detail::index_by_id(samples);
  auto eval_set = detail::select_ids(by_id, *ids, "eval");
  if (eval_set.empty()) throw DataError("eval: subset \"" + subset +
                                        "\" has no samples");

  EvalResult result;
  std::vector<MetricRow> rows_in, rows_non;
  std::string per_in = "id,split,class,part,kld,sim,nss\n";
  std::string per_non = per_in;
  std::vector<std::vector<CurvePoint>> curves;
  std::string traces = trace_csv_header();
  const auto& names = part_names();

  for (const SamplePair* sp : eval_set) {
    PairForward fwd =
        inference_forward(model, sp->image_in, sp->image_non, sp->pose);
    NoGradScope no_grad;
    const int h = sp->image_in.shape()[1], w = sp->image_in.shape()[2];
    const int hn = sp->image_non.shape()[1], wn = sp->image_non.shape()[2];
    Tensor pred_in = bilinear_upsample(fwd.interactive.heatmaps, h, w);
    Tensor pred_non = bilinear_upsample(fwd.transfer.heatmaps, hn, wn);
    for (int part : affordance_class(sp->affordance_label).parts) {
      if (sp->fixations_in[part].empty() || sp->fixations_non[part].empty())
        throw DataError("eval: sample " + sp->id + " has no points for part " +
                        names[static_cast<size_t>(part)]);
      Tensor pi = detail::channel_plane(pred_in, part);
      Tensor gi = detail::channel_plane(sp->gt_in, part);
      Tensor pn = detail::channel_plane(pred_non, part);
      Tensor gn = detail::channel_plane(sp->gt_non, part);
      MetricRow row_in{split_kind, sp->affordance_label,
                       names[static_cast<size_t>(part)], kld(pi, gi),
                       sim(pi, gi), nss(pi, sp->fixations_in[part])};
      MetricRow row_non{split_kind, sp->affordance_label,
                        names[static_cast<size_t>(part)], kld(pn, gn),
                        sim(pn, gn), nss(pn, sp->fixations_non[part])};
      rows_in.push_back(row_in);
      rows_non.push_back(row_non);
      per_in += sp->id + "," + row_in.split + "," + row_in.affordance + "," +
                row_in.part + "," + detail::fmt_g(row_in.kld) + "," +
                detail::fmt_g(row_in.sim) + "," + detail::fmt_g(row_in.nss) +
                "\n";
      per_non += sp->id + "," + row_non.split + "," + row_non.affordance +
                 "," + row_non.part + "," + detail::fmt_g(row_non.kld) + "," +
                 detail::fmt_g(row_non.sim) + "," +
                 detail::fmt_g(row_non.nss) + "\n";
      curves.push_back(pr_f_curves(pn, gn));
    }
    for (const DEQTrace* t :
         {&fwd.interactive.trace, &fwd.transfer.trace_pair,
          &fwd.transfer.trace_joint})
      if (!t->solver.empty()) {
        append_trace_csv(traces, result.deq_calls++, *t);
        ++result.iteration_histogram[t->iterations];
      }
    ++result.samples;
  }

  result.report_in = aggregate(rows_in);
  result.report_non = aggregate(rows_non);
  result.curve = average_curves(curves);

  std::string hist = "iterations,count\n";
  for (const auto& [iters, count] : result.iteration_histogram)
    hist += std::to_string(iters) + "," + std::to_string(count) + "\n";

  atomic_write_file(out_dir / "metrics_in.csv", per_in);
  atomic_write_file(out_dir / "metrics_non.csv", per_non);
  atomic_write_file(out_dir / "report_in.csv", report_csv(result.report_in));
  atomic_write_file(out_dir / "report_non.csv", report_csv(result.report_non));
  atomic_write_file(out_dir / "curve.csv", curve_csv(result.curve));
  atomic_write_file(out_dir / "curve_pr.svg", curve_svg(result.curve, "pr"));
  atomic_write_file(out_dir / "curve_f.svg", curve_svg(result.curve, "f"));
  atomic_write_file(out_dir / "deq_histogram.csv", hist);
  atomic_write_file(out_dir / "traces.csv", traces);

  nlohmann::json summary = {
      {"samples", result.samples},
      {"deq_calls", result.deq_calls},
      {"overall_in",
       {{"kld", result.report_in.overall.kld},
        {"sim", result.report_in.overall.sim},
        {"nss", result.report_in.overall.nss}}},
      {"overall_non",
       {{"kld", result.report_non.overall.kld},
        {"sim", result.report_non.overall.sim},
        {"nss", result.report_non.overall.nss}}}};
  atomic_write_file(out_dir / "summary.json", summary.dump(2) + "\n");
  nlohmann::json resolved = {{"command", "eval"},
                             {"data", data_dir.string()},
                             {"checkpoint", checkpoint.string()},
                             {"out", out_dir.string()},
                             {"split", split_kind},
                             {"subset", subset},
                             {"model", model_config_to_json(mc)}};
  atomic_write_file(out_dir / "resolved_config.json", resolved.dump(2) + "\n");
  return result;
}

// ---------------------------------------------------------------------------
// infer
// ---------------------------------------------------------------------------

struct InferResult {
  std::vector<std::filesystem::path> heatmap_files;
  std::vector<std::filesystem::path> overlay_files;
};

// Red-glow overlay: out = 0.5 * image + 0.5 * (v, 0, 0) per pixel.
inline Tensor overlay_heatmap(const Tensor& image, const Tensor& heat) {
  const Shape& sh = image.shape();
  if (sh.size() != 3 || sh[0] != 3)
    throw ShapeError("overlay_heatmap expects a [3,h,w] image");
  if (heat.shape() != Shape{sh[1], sh[2]})
    throw ShapeError("overlay_heatmap: heatmap does not match image size");
  const std::vector<double>& img = image.values();
  const std::vector<double>& v = heat.values();
  std::vector<double> out(img.size());
  const size_t plane = v.size();
  for (size_t i = 0; i < plane; ++i) {
    out[i] = 0.5 * img[i] + 0.5 * v[i];
    out[plane + i] = 0.5 * img[plane + i];
    out[2 * plane + i] = 0.5 * img[2 * plane + i];
  }
  return Tensor::from(sh, std::move(out));
}

inline InferResult run_infer(const std::filesystem::path& checkpoint,
                             const std::filesystem::path& image_in_path,
                             const std::filesystem::path& image_non_path,
                             const std::filesystem::path& pose_path,
                             const std::filesystem::path& out_dir) {
  ModelConfig mc = model_config_from_checkpoint(checkpoint);
  Rng rng(1);
  AffinityModel model(mc, rng);
  ParamList params = model.parameters();
  load_checkpoint(checkpoint, params, nullptr);

  Tensor image_in = read_ppm(image_in_path);
  Tensor image_non = read_ppm(image_non_path);
  Tensor pose = load_tnsr(pose_path);
  if (pose.shape() != Shape{kPoseJoints, 3})
    throw DataError("infer: pose tensor " + pose_path.string() +
                    " must have shape [" + std::to_string(kPoseJoints) +
                    ",3]");

  PairForward fwd = inference_forward(model, image_in, image_non, pose);
  NoGradScope no_grad;
  InferResult result;
  const auto& names = part_names();
  struct Branch {
    const char* tag;
    Tensor pred;
    const Tensor* image;
  };
  std::array<Branch, 2> branches{
      Branch{"in",
             bilinear_upsample(fwd.interactive.heatmaps,
                               image_in.shape()[1], image_in.shape()[2]),
             &image_in},
      Branch{"non",
             bilinear_upsample(fwd.transfer.heatmaps, image_non.shape()[1],
                               image_non.shape()[2]),
             &image_non}};
  for (const auto& branch : branches) {
    for (int j = 0; j < kNumParts; ++j) {
      Tensor plane = detail::channel_plane(branch.pred, j);
      const std::string stem =
          std::string(branch.tag) + "_" + names[static_cast<size_t>(j)];
      const auto heat_path = out_dir / ("heat_" + stem + ".tnsr");
      const auto overlay_path = out_dir / ("overlay_" + stem + ".ppm");
      std::filesystem::create_directories(out_dir);
      save_tnsr(heat_path, plane);
      write_ppm(overlay_heatmap(*branch.image, plane), overlay_path);
      result.heatmap_files.push_back(heat_path);
      result.overlay_files.push_back(overlay_path);
    }
  }
  nlohmann::json resolved = {{"command", "infer"},
                             {"checkpoint", checkpoint.string()},
                             {"interactive_image", image_in_path.string()},
                             {"non_interactive_image", image_non_path.string()},
                             {"pose", pose_path.string()},
                             {"out", out_dir.string()},
                             {"model", model_config_to_json(mc)}};
  atomic_write_file(out_dir / "resolved_config.json", resolved.dump(2) + "\n");
  return result;
}

}  // namespace affnet
