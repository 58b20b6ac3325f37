#pragma once

// Experiment configuration, checkpoints and the stage-by-stage pipeline used by
// the command-line tool.
//
// Output layout under the run root:
//   config.json                the effective configuration
//   data/                      exported dataset (manifest.json + blobs)
//   stage0/ .. stage3/         log.csv, checkpoint/ (latest), final/ (completed)
//   stage3/pairs/              preference pairs; stage3/margins.json
//   eval/                      metrics_<model>.csv, summary.json
//   ablate/                    <grid>.csv and <grid>.txt
//   plots/                     PPM images

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "vsrd/denoiser.hpp"
#include "vsrd/evalkit.hpp"
#include "vsrd/stage_dpo.hpp"
#include "vsrd/stage_dual.hpp"
#include "vsrd/stage_pgd.hpp"
#include "vsrd/synthdata.hpp"

namespace vsrd::run {

inline constexpr int kSchemaVersion = 1;

/// Process exit codes; each failure class has its own.
enum class ErrorCode : int {
  Ok = 0,
  Failure = 1,
  Usage = 2,
  ConfigParse = 3,
  ConfigUnknownKey = 4,
  ConfigInvariant = 5,
  ConfigVersion = 6,
  Io = 7,
  CheckpointMismatch = 8,
  MissingPrerequisite = 9,
  Divergence = 10,
  Contract = 11,
  Domain = 12,
};

const char* to_string(ErrorCode c);

class RunError : public std::runtime_error {
 public:
  RunError(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

/// Maps any library exception to its error code.
ErrorCode classify(const std::exception& e);
/// One-line JSON record {"error": ..., "code": ..., "message": ...}.
std::string error_line(const std::exception& e);

struct DataSection {
  Index items = 576;
  data::DatasetConfig dataset;
};

struct EvalSection {
  std::string split = "val";  // "val" or "test"
  std::uint64_t seed = 11;    // noise draws of the evaluated samplers
  int base_steps = 16;        // Euler steps of the pretrained model row
};

struct AblationSection {
  int stage2_iterations = 120;
  int stage3_iterations = 60;
  int stability_iterations = 60;
  int seeds = 3;
};

struct RunnerSection {
  int checkpoint_every = 50;  // 0: only at the end of a stage
};

struct ExperimentConfig {
  int schema_version = kSchemaVersion;
  std::uint64_t seed = 1234;
  std::string out_dir = "runs/desk";
  /// Iteration counts are reduced relative to full-scale training.
  bool scaled = true;
  DataSection data;
  DenoiserConfig model;
  pgd::Stage0Config stage0;
  pgd::PDSchedule stage1;
  dual::Stage2Config stage2;
  dpo::Stage3Config stage3;
  EvalSection eval;
  AblationSection ablation;
  RunnerSection runner;

  /// Throws RunError(ConfigInvariant) naming the offending section.
  void validate() const;
};

/// Desk-scale defaults.
ExperimentConfig desk_config();
/// A few-second configuration for tests.
ExperimentConfig tiny_experiment();

std::string to_json(const ExperimentConfig& cfg);
/// Strict: unknown keys, wrong types, a different schema version and invariant
/// violations each raise a RunError with their own code. Missing keys keep defaults.
ExperimentConfig config_from_json(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
void save_config(const ExperimentConfig& cfg, const std::filesystem::path& path);
/// Digest of everything except the output directory.
std::string config_hash(const ExperimentConfig& cfg);

// ---- checkpoints ---------------------------------------------------------------------

/// Manifest plus one float64 blob per array. Randomness is a pure function of
/// (seed, stage, iteration), so (seed, iteration) is the complete RNG state.
struct Checkpoint {
  std::string stage;
  long iteration = 0;
  std::uint64_t seed = 0;
  std::string config_hash;
  bool scaled = true;
  DenoiserConfig model;
  std::map<std::string, ParamSet> groups;
  std::map<std::string, long> counters;
};

/// Written to a sibling temporary directory first, then renamed over `dir`.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

Checkpoint to_checkpoint(const pgd::Stage0State& s);
Checkpoint to_checkpoint(const pgd::Stage1State& s);
Checkpoint to_checkpoint(const dual::DualStreamState& s);
Checkpoint to_checkpoint(const dpo::Stage3State& s);

pgd::Stage0State stage0_from(const Checkpoint& c, const pgd::Stage0Config& cfg);
pgd::Stage1State stage1_from(const Checkpoint& c, const pgd::PDSchedule& schedule);
dual::DualStreamState stage2_from(const Checkpoint& c, const dual::Stage2Config& cfg);
dpo::Stage3State stage3_from(const Checkpoint& c, const dpo::Stage3Config& cfg);

// ---- pipeline -----------------------------------------------------------------------

struct RunPaths {
  std::filesystem::path root;
  std::filesystem::path data() const { return root / "data"; }
  std::filesystem::path stage(int n) const { return root / ("stage" + std::to_string(n)); }
  std::filesystem::path log(int n) const { return stage(n) / "log.csv"; }
  std::filesystem::path checkpoint(int n) const { return stage(n) / "checkpoint"; }
  std::filesystem::path final_checkpoint(int n) const { return stage(n) / "final"; }
  std::filesystem::path eval() const { return root / "eval"; }
};

/// `out` if absolute; otherwise resolved under $VSRDISTILL_OUT_ROOT when set.
std::filesystem::path resolve_out(const std::string& out);

struct StageOptions {
  std::optional<std::filesystem::path> resume;  // checkpoint directory of the same stage
  long stop_at = -1;                            // stop (and checkpoint) once this many iterations are done
  bool allow_raw_init = false;                  // stage 2 without a stage-1 checkpoint
  bool quiet = false;
};

/// Imports `paths.data()` when present, otherwise generates and exports it.
data::Dataset obtain_dataset(const ExperimentConfig& cfg, const RunPaths& paths);

void make_data(const ExperimentConfig& cfg, const RunPaths& paths);
/// Each returns true when the stage ran to completion.
bool pretrain(const ExperimentConfig& cfg, const RunPaths& paths, const StageOptions& opt = {});
bool distill_init(const ExperimentConfig& cfg, const RunPaths& paths, const StageOptions& opt = {});
bool distill_dual(const ExperimentConfig& cfg, const RunPaths& paths, const StageOptions& opt = {});
bool refine(const ExperimentConfig& cfg, const RunPaths& paths, const StageOptions& opt = {});

/// One-step sampler with per-item noise derived from `seed`.
eval::Sampler one_step_sampler(const DenoiserParams& params, std::uint64_t seed);
/// Euler sampler with `steps` steps, same noise convention.
eval::Sampler multi_step_sampler(const DenoiserParams& params, int steps, std::uint64_t seed);

/// Evaluates every available model (bicubic input, pretrained, stage 1..3) on the configured split.
std::vector<eval::MetricsReport> evaluate(const ExperimentConfig& cfg, const RunPaths& paths);

/// Stage-3 margins recorded by `refine`.
struct Margins {
  double before = 0.0;
  double after = 0.0;
  std::size_t pairs = 0;
};
Margins read_margins(const RunPaths& paths);

/// "three-stage", "dual-stream" or "stability". Writes ablate/<grid>.csv and .txt; returns the text report.
std::string ablate(const ExperimentConfig& cfg, const RunPaths& paths, const std::string& grid);

/// Curves from every stage log, metric bars from eval/summary.json and
/// temporal profiles of the first evaluated item.
std::vector<std::filesystem::path> plot(const ExperimentConfig& cfg, const RunPaths& paths);

}  // namespace vsrd::run
