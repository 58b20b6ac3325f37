// Command-line front end for the distillation lab.
//
//   vsrdistill <command> [--config PATH] [--preset desk|tiny] [--seed N] [--out DIR] [--resume CKPT]
//
// Failures print one JSON line to stderr and exit with the error's code
// (see run::ErrorCode); bad flags exit with 2.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "vsrd/evalkit.hpp"
#include "vsrd/runner.hpp"

namespace {

using namespace vsrd;
namespace fs = std::filesystem;

struct Common {
  std::string config;
  std::string preset = "desk";
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string resume;
  long stop_at = -1;
  bool quiet = false;
};

void add_common(CLI::App* sub, Common& c, bool resumable) {
  sub->add_option("--config", c.config, "JSON experiment configuration")->check(CLI::ExistingFile);
  sub->add_option("--preset", c.preset, "built-in configuration when --config is absent")
      ->check(CLI::IsMember({"desk", "tiny"}));
  sub->add_option("--seed", c.seed, "global seed (overrides the configuration)");
  sub->add_option("--out", c.out, "run directory (overrides out_dir; relative paths honour VSRDISTILL_OUT_ROOT)");
  if (resumable) {
    sub->add_option("--resume", c.resume, "checkpoint directory of this stage to continue from");
    sub->add_option("--stop-at", c.stop_at, "checkpoint and stop after this many iterations");
  }
  sub->add_flag("--quiet", c.quiet, "no progress output");
}

run::ExperimentConfig effective_config(const Common& c) {
  run::ExperimentConfig cfg = c.config.empty() ? (c.preset == "tiny" ? run::tiny_experiment() : run::desk_config())
                                               : run::load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (!c.out.empty()) cfg.out_dir = c.out;
  cfg.validate();
  return cfg;
}

run::StageOptions stage_options(const Common& c) {
  run::StageOptions o;
  if (!c.resume.empty()) o.resume = fs::path(c.resume);
  o.stop_at = c.stop_at;
  o.quiet = c.quiet;
  return o;
}

void status(const std::string& command, const run::RunPaths& paths, bool completed) {
  std::printf("{\"status\":\"ok\",\"command\":\"%s\",\"out\":\"%s\",\"completed\":%s}\n", command.c_str(),
              paths.root.string().c_str(), completed ? "true" : "false");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale one-step video super-resolution distillation lab"};
  app.require_subcommand(1);

  Common common;
  bool allow_raw_init = false;
  std::string grid;
  std::uint64_t oracle_seed = 7;

  struct Cmd {
    const char* name;
    const char* help;
    bool resumable;
  };
  const Cmd cmds[] = {
      {"make-data", "generate and export the synthetic dataset", false},
      {"pretrain", "stage 0: flow-matching pretraining", true},
      {"distill-init", "stage 1: guidance distillation and progressive step halving", true},
      {"distill-dual", "stage 2: dual-stream distribution-matching and adversarial distillation", true},
      {"refine", "stage 3: preference-pair construction and preference fine-tuning", true},
      {"eval", "metrics of every available model on the evaluation split", false},
      {"ablate", "stage and stream ablation grids", false},
      {"plot", "loss curves, metric bars and temporal profiles", false},
      {"pipeline", "make-data, all four stages, then eval", false},
  };
  std::map<std::string, CLI::App*> subs;
  for (const Cmd& c : cmds) {
    CLI::App* s = app.add_subcommand(c.name, c.help);
    add_common(s, common, c.resumable);
    subs[c.name] = s;
  }
  subs["distill-dual"]->add_flag("--allow-raw-init", allow_raw_init,
                                 "start from the pretrained model when no stage-1 checkpoint exists");
  subs["ablate"]
      ->add_option("--grid", grid, "three-stage, dual-stream or stability")
      ->required()
      ->check(CLI::IsMember({"three-stage", "dual-stream", "stability"}));
  CLI::App* oracle = app.add_subcommand("oracle-bench", "one-dimensional Gaussian checks of the score and gradients");
  oracle->add_option("--seed", oracle_seed, "Monte-Carlo seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << app.help() << "\n";
    std::cerr << "{\"error\":\"usage\",\"code\":2,\"message\":\"" << e.what() << "\"}\n";
    return 2;
  }

  try {
    if (oracle->parsed()) {
      eval::OracleConfig oc;
      oc.seed = oracle_seed;
      const eval::OracleReport r = eval::gaussian_oracle_bench(oc);
      std::cout << r.summary();
      return r.passed() ? 0 : static_cast<int>(run::ErrorCode::Failure);
    }

    const run::ExperimentConfig cfg = effective_config(common);
    const run::RunPaths paths{run::resolve_out(cfg.out_dir)};
    fs::create_directories(paths.root);
    run::save_config(cfg, paths.root / "config.json");
    run::StageOptions opt = stage_options(common);
    opt.allow_raw_init = allow_raw_init;

    auto parsed = [&](const char* name) { return subs.at(name)->parsed(); };
    if (parsed("make-data")) {
      run::make_data(cfg, paths);
      status("make-data", paths, true);
    } else if (parsed("pretrain")) {
      status("pretrain", paths, run::pretrain(cfg, paths, opt));
    } else if (parsed("distill-init")) {
      status("distill-init", paths, run::distill_init(cfg, paths, opt));
    } else if (parsed("distill-dual")) {
      status("distill-dual", paths, run::distill_dual(cfg, paths, opt));
    } else if (parsed("refine")) {
      status("refine", paths, run::refine(cfg, paths, opt));
    } else if (parsed("eval")) {
      for (const eval::MetricsReport& r : run::evaluate(cfg, paths))
        std::printf("%-12s psnr %8.4f  ssim %7.4f  warp %9.4f  hf_ratio %7.4f\n", r.model.c_str(), r.mean.psnr,
                    r.mean.ssim, r.mean.warp, r.mean.hf_ratio);
      status("eval", paths, true);
    } else if (parsed("ablate")) {
      std::cout << run::ablate(cfg, paths, grid);
      status("ablate", paths, true);
    } else if (parsed("plot")) {
      for (const fs::path& p : run::plot(cfg, paths)) std::printf("%s\n", p.string().c_str());
      status("plot", paths, true);
    } else if (parsed("pipeline")) {
      run::make_data(cfg, paths);
      const bool done = run::pretrain(cfg, paths, opt) && run::distill_init(cfg, paths, opt) &&
                        run::distill_dual(cfg, paths, opt) && run::refine(cfg, paths, opt);
      if (done) run::evaluate(cfg, paths);
      status("pipeline", paths, done);
    }
    return 0;
  } catch (const std::exception& e) {
    std::cerr << run::error_line(e) << "\n";
    return static_cast<int>(run::classify(e));
  }
}
