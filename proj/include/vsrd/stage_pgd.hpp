#pragma once

// Base flow-matching training with condition dropout, then guidance
// distillation and step-halving progressive distillation down to one step.

#include <cstdint>
#include <string>
#include <vector>

#include "vsrd/denoiser.hpp"
#include "vsrd/optim.hpp"
#include "vsrd/synthdata.hpp"
#include "vsrd/training.hpp"

namespace vsrd::pgd {

// ---- stage 0 ------------------------------------------------------------------

struct Stage0Config {
  int iterations = 3000;
  int batch = 4;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double clip_norm = 1.0;
  double p_drop = 0.1;
  double t_min = 0.3;
  double t_max = 1.0;
  void validate() const;
};

/// mean((v(z_t) - (eps - z0))^2) with z_t = diffuse(z0, eps, t).
ad::Var flow_matching_loss(const Binding& params, const DenoiserConfig& config, const LatentVideo& z0, double t,
                           const LatentVideo& eps, const flow::ConditionBundle& cond);
double flow_matching_loss(const DenoiserParams& params, const LatentVideo& z0, double t, const LatentVideo& eps,
                          const flow::ConditionBundle& cond);
LossGrad flow_matching_grad(const DenoiserParams& params, const LatentVideo& z0, double t, const LatentVideo& eps,
                            const flow::ConditionBundle& cond);

struct Stage0State {
  DenoiserParams params;
  Adam opt;
  long iteration = 0;
};

Stage0State make_stage0_state(const DenoiserConfig& model, const Stage0Config& cfg, std::uint64_t seed);

/// Columns: iteration, phase, loss, grad_norm, lr.
CsvLog stage0_log();

/// Trains until `state.iteration == cfg.iterations` or the hook says stop.
/// Throws DivergenceError("stage0", it, ...) on a non-finite loss.
void run_stage0(const Stage0Config& cfg, Stage0State& state, const data::Dataset& ds, std::uint64_t seed,
                CsvLog* log = nullptr, const ProgressHook& hook = {});

/// Mean flow-matching loss over fixed (t, eps) draws on the given items.
double validation_loss(const DenoiserParams& params, const data::Dataset& ds, const std::vector<Index>& items,
                       std::uint64_t seed);

// ---- stage 1 ------------------------------------------------------------------

struct PDSchedule {
  int start_steps = 64;
  int cfg_iterations = 100;
  int phase_iterations = 100;
  int teacher_refresh_interval = 50;
  double cfg_weight = 3.0;
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double clip_norm = 1.0;
  int batch = 2;
  double cfg_t_min = 0.02;
  void validate() const;

  /// Step counts K of the progressive phases: start_steps, start_steps/2, ..., 2.
  std::vector<int> phases() const;
  long total_iterations() const;
};

/// Conditional student velocity regressed on (1 + w) v_T(c) - w v_T(null).
/// Teacher forwards run on the tape behind a stop-gradient.
ad::Var cfg_distill_loss(const Binding& student, const Binding& teacher, const DenoiserConfig& config,
                         const LatentVideo& z_t, double t, const flow::ConditionBundle& cond, double w);
LossGrad cfg_distill_grad(const DenoiserParams& student, const DenoiserParams& teacher, const LatentVideo& z_t,
                          double t, const flow::ConditionBundle& cond, double w);

/// Two teacher Euler steps t -> t_mid -> t_end.
LatentVideo pd_target(const DenoiserParams& teacher, const LatentVideo& z_t, double t, double t_mid, double t_end,
                      const flow::ConditionBundle& cond);

/// mean((z_t + (t_end - t) v_S(z_t) - target)^2).
ad::Var pd_loss(const Binding& student, const DenoiserConfig& config, const LatentVideo& target,
                const LatentVideo& z_t, double t, double t_end, const flow::ConditionBundle& cond);
LossGrad pd_grad(const DenoiserParams& student, const LatentVideo& target, const LatentVideo& z_t, double t,
                 double t_end, const flow::ConditionBundle& cond);

struct Stage1State {
  DenoiserParams student;
  DenoiserParams teacher;
  Adam opt;
  long iteration = 0;
  long refreshes = 0;
};

/// Student and teacher both start as copies of the stage-0 model.
Stage1State make_stage1_state(const DenoiserParams& base, const PDSchedule& schedule);

struct PhaseInfo {
  std::string name;  // "cfg" or "pd<K>"
  int steps = 0;     // teacher step count K (0 for cfg)
  long begin = 0;    // first iteration of the phase
  long end = 0;      // one past the last
};

std::vector<PhaseInfo> phase_table(const PDSchedule& schedule);
const PhaseInfo& phase_at(const std::vector<PhaseInfo>& table, long iteration);

/// Columns: iteration, phase, loss, grad_norm, lr, refreshed.
CsvLog stage1_log();

/// At the first iteration of every progressive phase, and at every multiple of
/// the refresh interval counted from the start of the progressive part, the
/// teacher becomes a copy of the student before that iteration's update. The
/// optimizer state is reset at each phase boundary.
void run_stage1(const PDSchedule& schedule, Stage1State& state, const data::Dataset& ds, std::uint64_t seed,
                CsvLog* log = nullptr, const ProgressHook& hook = {});

/// Euler sampling with `steps` uniform steps from a seeded noise draw.
LatentVideo sample_video(const DenoiserParams& params, const flow::ConditionBundle& cond, int steps,
                         std::uint64_t noise_seed);

}  // namespace vsrd::pgd
