#pragma once

// Command-line front end over the run_* entry points. Exit codes: 0 success,
// 2 configuration problem, 3 data/IO problem, 4 numerical failure.

#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "affnet/runner.hpp"

namespace affnet {

inline int run_cli(int argc, const char* const* argv) {
  CLI::App app{
      "interactive-affinity toolkit: synthetic paired-scene datasets, "
      "two-branch training, saliency-metric evaluation, and inference"};
  app.require_subcommand(1);

  // generate
  int gen_count = 0;
  uint64_t gen_seed = 1;
  int gen_size = 224;
  std::string gen_out;
  auto* gen = app.add_subcommand(
      "generate", "write a synthetic dataset plus split manifests");
  gen->add_option("--count", gen_count, "number of scene pairs")->required();
  gen->add_option("--seed", gen_seed, "base RNG seed (default 1)");
  gen->add_option("--size", gen_size,
                  "square image size, multiple of 32 (default 224)");
  gen->add_option("--out", gen_out, "output dataset directory")->required();

  // train
  std::string tr_data, tr_out, tr_config, tr_split = "seen", tr_ablate,
                                          tr_resume;
  long long tr_steps = -1;
  long long tr_seed = -1;
  auto* tr = app.add_subcommand("train",
                                "train the two-branch model on a split");
  tr->add_option("--data", tr_data, "dataset directory")->required();
  tr->add_option("--out", tr_out, "run output directory")->required();
  tr->add_option("--config", tr_config, "training config JSON");
  tr->add_option("--split", tr_split, "split manifest kind")
      ->check(CLI::IsMember({"seen", "obj_unseen", "aff_unseen"}));
  tr->add_option("--ablate", tr_ablate, "disable one guidance stream")
      ->check(CLI::IsMember({"text", "pose", "apparent"}));
  tr->add_option("--resume", tr_resume, "checkpoint directory to resume from");
  tr->add_option("--steps", tr_steps, "override config step count");
  tr->add_option("--seed", tr_seed, "override config seed");

  // eval
  std::string ev_data, ev_ckpt, ev_out, ev_split = "seen", ev_subset = "test";
  auto* ev = app.add_subcommand("eval",
                                "evaluate a checkpoint and write reports");
  ev->add_option("--data", ev_data, "dataset directory")->required();
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint directory")->required();
  ev->add_option("--out", ev_out, "report output directory")->required();
  ev->add_option("--split", ev_split, "split manifest kind")
      ->check(CLI::IsMember({"seen", "obj_unseen", "aff_unseen"}));
  ev->add_option("--subset", ev_subset, "which id list to evaluate")
      ->check(CLI::IsMember({"train", "val", "test"}));

  // infer
  std::string in_ckpt, in_img_in, in_img_non, in_pose, in_out;
  auto* inf = app.add_subcommand(
      "infer", "predict per-part heatmaps for one scene pair");
  inf->add_option("--checkpoint", in_ckpt, "checkpoint directory")->required();
  inf->add_option("--interactive-image", in_img_in,
                  "PPM image of the scene with the interaction")
      ->required();
  inf->add_option("--non-interactive-image", in_img_non,
                  "PPM image of the scene without the interaction")
      ->required();
  inf->add_option("--pose", in_pose, "TNSR pose tensor, [53,3]")->required();
  inf->add_option("--out", in_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) {
      GenerateResult r = run_generate(gen_count, gen_seed, gen_out, gen_size);
      std::printf("wrote %d scene pairs + 3 split manifests to %s\n", r.count,
                  r.dir.string().c_str());
    } else if (tr->parsed()) {
      TrainSettings settings;
      if (!tr_config.empty())
        settings = train_settings_from_json(
            parse_json_file(tr_config, "train config"), settings);
      if (tr_steps >= 0) settings.steps = static_cast<int>(tr_steps);
      if (tr_seed >= 0) settings.seed = static_cast<uint64_t>(tr_seed);
      if (!tr_ablate.empty()) {
        if (!tr_resume.empty())
          throw ConfigError(
              "train: --ablate cannot change on --resume; the checkpoint "
              "records the architecture flags");
        if (tr_ablate == "text") settings.model.ablate_text = true;
        if (tr_ablate == "pose") settings.model.ablate_pose = true;
        if (tr_ablate == "apparent") settings.model.ablate_apparent = true;
      }
      TrainResult r = run_train(tr_data, tr_out, tr_split, settings,
                                tr_resume.empty()
                                    ? std::filesystem::path{}
                                    : std::filesystem::path(tr_resume));
      std::printf("trained steps %lld..%lld; final l_total %.6g; "
                  "checkpoint at %s\n",
                  r.start_step + 1,
                  r.start_step + static_cast<long long>(r.losses.size()),
                  r.losses.back().total, r.checkpoint_dir.string().c_str());
    } else if (ev->parsed()) {
      EvalResult r = run_eval(ev_data, ev_ckpt, ev_out, ev_split, ev_subset);
      std::printf("evaluated %d samples (%d solver calls); transfer-branch "
                  "kld %.6g sim %.6g nss %.6g; reports in %s\n",
                  r.samples, r.deq_calls, r.report_non.overall.kld,
                  r.report_non.overall.sim, r.report_non.overall.nss,
                  ev_out.c_str());
    } else if (inf->parsed()) {
      InferResult r = run_infer(in_ckpt, in_img_in, in_img_non, in_pose,
                                in_out);
      std::printf("wrote %zu heatmaps + %zu overlays to %s\n",
                  r.heatmap_files.size(), r.overlay_files.size(),
                  in_out.c_str());
    }
    return 0;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const ShapeError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 3;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return 4;
  } catch (const std::filesystem::filesystem_error& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}

inline int run_cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  argv.reserve(args.size());
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace affnet
