#pragma once

// One-step distillation by alternating updates: the fake score model and the
// feature discriminator heads ("auxiliary" updates), then the student, pulled
// by a normalized distribution-matching gradient plus an adversarial and a
// feature-matching term computed on real/fake score features.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "vsrd/denoiser.hpp"
#include "vsrd/optim.hpp"
#include "vsrd/synthdata.hpp"
#include "vsrd/training.hpp"

namespace vsrd::dual {

enum class Mode {
  Joint,       // both streams every student update
  DmdOnly,     // lambda_gan = lambda_fm = 0, heads never trained
  GanOnly,     // lambda_dmd = 0
  Sequential,  // first half DmdOnly, second half GanOnly
};

const char* to_string(Mode m);
Mode mode_from_string(const std::string& s);

struct Stage2Config {
  double lambda_dmd = 1.0;
  double lambda_gan = 0.1;
  double lambda_fm = 0.05;
  int interval = 3;  // auxiliary updates per student update
  int iterations = 300;
  double lr = 2e-4;
  double lr_fake = 2e-4;
  double lr_heads = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double clip_norm = 1.0;
  int batch = 2;
  double t_min = 0.2;
  double t_max = 0.98;
  double guard = 1e-6;
  int head_hidden = 32;
  Mode mode = Mode::Joint;
  /// Stop-gradient on the student features inside the generator loss as well,
  /// which removes the adversarial gradient from the student entirely.
  bool literal_sg = false;
  void validate() const;
};

/// Student generation at t = 1: eps - v_S(eps, 1, cond).
LatentVideo one_step_generate(const DenoiserParams& student, const LatentVideo& eps,
                              const flow::ConditionBundle& cond);
ad::Var one_step_generate(const Binding& student, const DenoiserConfig& config, const LatentVideo& eps,
                          const flow::ConditionBundle& cond);

/// mean((v_F(z_t) - (eps2 - z0_s))^2) with z_t = diffuse(z0_s, eps2, t); z0_s is data.
ad::Var fake_score_loss(const Binding& fake, const DenoiserConfig& config, const LatentVideo& z0_s, double t,
                        const LatentVideo& eps2, const flow::ConditionBundle& cond);
LossGrad fake_score_grad(const DenoiserParams& fake, const LatentVideo& z0_s, double t, const LatentVideo& eps2,
                         const flow::ConditionBundle& cond);

/// (z0_F - z0_R) / max(mean|z0_S - z0_R|, guard); the mean runs over every element.
LatentVideo dmd_grad(const LatentVideo& z0_s, const LatentVideo& z0_f, const LatentVideo& z0_r, double guard);

/// mean((z0_S - sg[z0_S - grad])^2), whose gradient in z0_S is 2 grad / numel.
ad::Var dmd_loss(const ad::Var& z0_s, const LatentVideo& grad);

/// Per-level channel concatenation of real- and fake-score features at (z_t, t, cond).
FeatureStack extract_disc_features(const DenoiserParams& real, const DenoiserParams& fake, const LatentVideo& z_t,
                                   double t, const flow::ConditionBundle& cond);

/// Hinge losses on discriminator values (scalars or 1x1 nodes).
double gan_d_loss(double d_real, double d_fake);
double gan_g_loss(double d_fake);
ad::Var gan_d_loss(const ad::Var& d_real, const ad::Var& d_fake);
ad::Var gan_g_loss(const ad::Var& d_fake);

/// Mean over levels of the per-level mean squared difference.
double feature_matching_loss(const FeatureStack& h_s, const FeatureStack& h_hr);
ad::Var feature_matching_loss(const std::vector<ad::Var>& h_s, const std::vector<ad::Var>& h_hr);

struct DualStreamState {
  DenoiserParams student;
  DenoiserParams real;  // frozen
  DenoiserParams fake;
  DiscriminatorHeads heads;
  Adam opt_student;
  Adam opt_fake;
  Adam opt_heads;
  long iteration = 0;
  long aux_updates = 0;
  long student_updates = 0;
};

/// Real and fake score models start from the teacher; heads from `seed`.
DualStreamState make_dual_state(const DenoiserParams& init_student, const DenoiserParams& teacher,
                                const Stage2Config& cfg, std::uint64_t seed);

struct UpdateRecord {
  long iteration = 0;
  std::string phase;  // "aux" or "student"
  double l_diff = NAN;
  double l_d = NAN;
  double l_dmd = NAN;
  double l_g = NAN;
  double l_fm = NAN;
  double l_total = NAN;
  double grad_norm = NAN;  // student gradient norm (student updates only)
  /// Largest |d L_D / d theta| over real and fake backbone parameters.
  double backbone_grad_max = NAN;
};

/// Effective loss weights at `iteration` under the configured mode.
struct Weights {
  double dmd, gan, fm;
  bool train_heads;
};
Weights weights_at(const Stage2Config& cfg, long iteration);

/// One auxiliary update on the given batch items; `rng` supplies t and noise.
/// Both update kinds advance `state.iteration` by one.
UpdateRecord auxiliary_update(DualStreamState& state, const Stage2Config& cfg, const data::Dataset& ds,
                              const std::vector<Index>& batch, Rng& rng);
/// One student update. With `grads_out`, the averaged student gradient is also returned.
UpdateRecord student_update(DualStreamState& state, const Stage2Config& cfg, const data::Dataset& ds,
                            const std::vector<Index>& batch, Rng& rng, ParamSet* grads_out = nullptr);

/// Loop iteration `it` is a student update iff (it + 1) % (interval + 1) == 0.
bool is_student_iteration(const Stage2Config& cfg, long it);

/// Columns: iteration, phase, l_diff, l_d, l_dmd, l_g, l_fm, student_grad_norm.
CsvLog stage2_log();

/// Runs repeating blocks of `interval` auxiliary updates and one student
/// update until `state.iteration == cfg.iterations`.
void run_stage2(const Stage2Config& cfg, DualStreamState& state, const data::Dataset& ds, std::uint64_t seed,
                CsvLog* log = nullptr, const ProgressHook& hook = {});

}  // namespace vsrd::dual
