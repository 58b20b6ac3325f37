#include "vsrd/stage_pgd.hpp"

#include <algorithm>
#include <cmath>

namespace vsrd::pgd {

using ad::Var;

namespace {

template <typename Build>
LossGrad taped_loss(const DenoiserParams& params, Build&& build) {
  ad::Tape tape;
  const Binding b = bind_params(tape, params.tensors, true);
  const Var loss = build(tape, b);
  tape.backward(loss);
  return LossGrad{loss.item(), gradients(b)};
}

void check_finite(double loss, const char* phase, long it) {
  if (!std::isfinite(loss)) throw DivergenceError(phase, it, std::string(phase) + ": non-finite loss at iteration " +
                                                                 std::to_string(it));
}

}  // namespace

// ---- stage 0 ------------------------------------------------------------------

void Stage0Config::validate() const {
  if (iterations < 0 || batch < 1) throw ContractViolation("stage0: iterations >= 0 and batch >= 1 required");
  if (!(lr > 0.0)) throw ContractViolation("stage0: learning rate must be positive");
  if (!(p_drop >= 0.0 && p_drop < 1.0)) throw ContractViolation("stage0: p_drop must lie in [0, 1)");
  if (!(t_min > 0.0 && t_min <= t_max && t_max <= 1.0)) throw ContractViolation("stage0: need 0 < t_min <= t_max <= 1");
}

Var flow_matching_loss(const Binding& params, const DenoiserConfig& config, const LatentVideo& z0, double t,
                       const LatentVideo& eps, const flow::ConditionBundle& cond) {
  require_same_shape(z0, eps, "flow_matching_loss");
  require_finite(z0, "flow_matching_loss");
  require_finite(eps, "flow_matching_loss");
  if (!(t > 0.0 && t <= 1.0)) throw ContractViolation("flow_matching_loss: t must lie in (0, 1]");
  const flow::Timestep ts(t);
  const LatentVideo z_t = flow::diffuse(z0, eps, ts);
  const LatentVideo target = flow::velocity_target(z0, eps);
  ad::Tape& tape = *params.tape;
  const ForwardResult r = denoiser_forward(params, config, video_var(tape, z_t), z0.shape(), t, cond, false);
  return ad::mse(r.velocity, video_var(tape, target));
}

double flow_matching_loss(const DenoiserParams& params, const LatentVideo& z0, double t, const LatentVideo& eps,
                          const flow::ConditionBundle& cond) {
  ad::Tape tape;
  const Binding b = bind_params(tape, params.tensors, false);
  return flow_matching_loss(b, params.config, z0, t, eps, cond).item();
}

LossGrad flow_matching_grad(const DenoiserParams& params, const LatentVideo& z0, double t, const LatentVideo& eps,
                            const flow::ConditionBundle& cond) {
  return taped_loss(params, [&](ad::Tape&, const Binding& b) {
    return flow_matching_loss(b, params.config, z0, t, eps, cond);
  });
}

Stage0State make_stage0_state(const DenoiserConfig& model, const Stage0Config& cfg, std::uint64_t seed) {
  cfg.validate();
  return Stage0State{init_params(model, derive_seed(seed, {hash_name("stage0.init")})),
                     Adam(AdamConfig{cfg.lr, cfg.beta1, cfg.beta2, 1e-8, cfg.clip_norm}), 0};
}

CsvLog stage0_log() { return CsvLog({"iteration", "phase", "loss", "grad_norm", "lr"}); }

void run_stage0(const Stage0Config& cfg, Stage0State& state, const data::Dataset& ds, std::uint64_t seed,
                CsvLog* log, const ProgressHook& hook) {
  cfg.validate();
  if (ds.n_train < 1) throw ContractViolation("stage0: dataset has no training items");
  while (state.iteration < cfg.iterations) {
    const long it = state.iteration;
    Rng rng = iteration_rng(seed, "stage0", it);
    ParamSet grads;
    double loss = 0.0;
    for (Index i : draw_batch(ds, rng, cfg.batch)) {
      const data::VideoPair& item = ds.items[static_cast<std::size_t>(i)];
      const double t = rng.uniform(cfg.t_min, cfg.t_max);
      const LatentVideo eps = rng.normal_video(item.hr.shape());
      flow::ConditionBundle cond = condition_of(item);
      if (rng.uniform() < cfg.p_drop) cond = cond.as_null();
      const LossGrad lg = flow_matching_grad(state.params, item.hr, t, eps, cond);
      loss += lg.loss / cfg.batch;
      accumulate(grads, lg.grads, 1.0 / cfg.batch);
    }
    check_finite(loss, "stage0", it);
    const double gnorm = state.opt.step(state.params.tensors, grads);
    state.iteration = it + 1;
    if (log) log->add({std::to_string(it), "stage0", fmt(loss), fmt(gnorm), fmt(state.opt.config().lr)});
    if (hook && !hook(state.iteration)) return;
  }
}

double validation_loss(const DenoiserParams& params, const data::Dataset& ds, const std::vector<Index>& items,
                       std::uint64_t seed) {
  if (items.empty()) throw ContractViolation("validation_loss: no items");
  double total = 0.0;
  for (Index i : items) {
    const data::VideoPair& item = ds.items.at(static_cast<std::size_t>(i));
    Rng rng(derive_seed(seed, {hash_name("validation"), static_cast<std::uint64_t>(i)}));
    const double t = rng.uniform(0.02, 0.98);
    const LatentVideo eps = rng.normal_video(item.hr.shape());
    total += flow_matching_loss(params, item.hr, t, eps, condition_of(item));
  }
  return total / static_cast<double>(items.size());
}

// ---- stage 1 ------------------------------------------------------------------

void PDSchedule::validate() const {
  if (start_steps < 2 || (start_steps & (start_steps - 1)) != 0)
    throw ContractViolation("pd schedule: start_steps must be a power of two >= 2");
  if (teacher_refresh_interval < 1) throw ContractViolation("pd schedule: refresh interval must be >= 1");
  if (cfg_iterations < 0 || phase_iterations < 1) throw ContractViolation("pd schedule: bad iteration counts");
  if (!(cfg_weight >= 0.0)) throw ContractViolation("pd schedule: cfg weight must be >= 0");
  if (!(lr > 0.0) || batch < 1) throw ContractViolation("pd schedule: lr > 0 and batch >= 1 required");
  if (!(cfg_t_min > 0.0 && cfg_t_min <= 1.0)) throw ContractViolation("pd schedule: cfg_t_min must lie in (0, 1]");
}

std::vector<int> PDSchedule::phases() const {
  std::vector<int> ks;
  for (int k = start_steps; k >= 2; k /= 2) ks.push_back(k);
  return ks;
}

long PDSchedule::total_iterations() const {
  return cfg_iterations + static_cast<long>(phases().size()) * phase_iterations;
}

Var cfg_distill_loss(const Binding& student, const Binding& teacher, const DenoiserConfig& config,
                     const LatentVideo& z_t, double t, const flow::ConditionBundle& cond, double w) {
  if (!(w >= 0.0)) throw ContractViolation("cfg_distill_loss: guidance weight must be >= 0");
  if (student.tape != teacher.tape) throw ContractViolation("cfg_distill_loss: bindings on different tapes");
  ad::Tape& tape = *student.tape;
  const Var zv = video_var(tape, z_t);
  const Var v_c = denoiser_forward(teacher, config, zv, z_t.shape(), t, cond, false).velocity;
  const Var v_u = denoiser_forward(teacher, config, zv, z_t.shape(), t, cond.as_null(), false).velocity;
  const Var target = ad::stop_gradient(ad::sub(ad::scale(v_c, 1.0 + w), ad::scale(v_u, w)));
  if (!target.value().allFinite()) throw ContractViolation("cfg_distill_loss: non-finite guidance target");
  const Var v_s = denoiser_forward(student, config, zv, z_t.shape(), t, cond, false).velocity;
  return ad::mse(v_s, target);
}

LossGrad cfg_distill_grad(const DenoiserParams& student, const DenoiserParams& teacher, const LatentVideo& z_t,
                          double t, const flow::ConditionBundle& cond, double w) {
  ad::Tape tape;
  const Binding s = bind_params(tape, student.tensors, true);
  const Binding tb = bind_params(tape, teacher.tensors, false);
  const Var loss = cfg_distill_loss(s, tb, student.config, z_t, t, cond, w);
  tape.backward(loss);
  return LossGrad{loss.item(), gradients(s)};
}

LatentVideo pd_target(const DenoiserParams& teacher, const LatentVideo& z_t, double t, double t_mid, double t_end,
                      const flow::ConditionBundle& cond) {
  if (!(t_end <= t_mid && t_mid <= t)) throw ContractViolation("pd_target: need t_end <= t_mid <= t");
  const flow::Timestep t0(t), t1(t_mid), t2(t_end);
  const LatentVideo z_mid = t1.value() == t0.value() ? z_t : flow::euler_step(z_t, denoise(teacher, z_t, t0, cond), t0, t1);
  if (t2.value() == t1.value()) return z_mid;
  return flow::euler_step(z_mid, denoise(teacher, z_mid, t1, cond), t1, t2);
}

Var pd_loss(const Binding& student, const DenoiserConfig& config, const LatentVideo& target, const LatentVideo& z_t,
            double t, double t_end, const flow::ConditionBundle& cond) {
  require_same_shape(target, z_t, "pd_loss");
  if (!(t_end <= t)) throw ContractViolation("pd_loss: t_end must not exceed t");
  ad::Tape& tape = *student.tape;
  const Var zv = video_var(tape, z_t);
  const Var v = denoiser_forward(student, config, zv, z_t.shape(), t, cond, false).velocity;
  const Var jump = ad::add(zv, ad::scale(v, t_end - t));
  return ad::mse(jump, video_var(tape, target));
}

LossGrad pd_grad(const DenoiserParams& student, const LatentVideo& target, const LatentVideo& z_t, double t,
                 double t_end, const flow::ConditionBundle& cond) {
  return taped_loss(student, [&](ad::Tape&, const Binding& b) {
    return pd_loss(b, student.config, target, z_t, t, t_end, cond);
  });
}

Stage1State make_stage1_state(const DenoiserParams& base, const PDSchedule& schedule) {
  schedule.validate();
  return Stage1State{base, base,
                     Adam(AdamConfig{schedule.lr, schedule.beta1, schedule.beta2, 1e-8, schedule.clip_norm}), 0, 0};
}

std::vector<PhaseInfo> phase_table(const PDSchedule& schedule) {
  std::vector<PhaseInfo> table;
  long at = 0;
  if (schedule.cfg_iterations > 0) {
    table.push_back({"cfg", 0, 0, schedule.cfg_iterations});
    at = schedule.cfg_iterations;
  }
  for (int k : schedule.phases()) {
    table.push_back({"pd" + std::to_string(k), k, at, at + schedule.phase_iterations});
    at += schedule.phase_iterations;
  }
  return table;
}

const PhaseInfo& phase_at(const std::vector<PhaseInfo>& table, long iteration) {
  for (const PhaseInfo& p : table)
    if (iteration >= p.begin && iteration < p.end) return p;
  throw ContractViolation("phase_at: iteration " + std::to_string(iteration) + " outside the schedule");
}

CsvLog stage1_log() { return CsvLog({"iteration", "phase", "loss", "grad_norm", "lr", "refreshed"}); }

void run_stage1(const PDSchedule& schedule, Stage1State& state, const data::Dataset& ds, std::uint64_t seed,
                CsvLog* log, const ProgressHook& hook) {
  schedule.validate();
  if (ds.n_train < 1) throw ContractViolation("stage1: dataset has no training items");
  const std::vector<PhaseInfo> table = phase_table(schedule);
  const long total = schedule.total_iterations();
  while (state.iteration < total) {
    const long it = state.iteration;
    const PhaseInfo& phase = phase_at(table, it);
    if (it == phase.begin && it > 0) state.opt.reset();

    bool refreshed = false;
    if (phase.steps > 0) {
      const long pd_it = it - schedule.cfg_iterations;
      if (it == phase.begin || pd_it % schedule.teacher_refresh_interval == 0) {
        state.teacher = state.student;
        ++state.refreshes;
        refreshed = true;
      }
    }

    Rng rng = iteration_rng(seed, "stage1", it);
    ParamSet grads;
    double loss = 0.0;
    for (Index i : draw_batch(ds, rng, schedule.batch)) {
      const data::VideoPair& item = ds.items[static_cast<std::size_t>(i)];
      const flow::ConditionBundle cond = condition_of(item);
      const LatentVideo eps = rng.normal_video(item.hr.shape());
      LossGrad lg;
      if (phase.steps == 0) {
        const double t = rng.uniform(schedule.cfg_t_min, 1.0);
        const LatentVideo z_t = flow::diffuse(item.hr, eps, flow::Timestep(t));
        lg = cfg_distill_grad(state.student, state.teacher, z_t, t, cond, schedule.cfg_weight);
      } else {
        // student jumps across two consecutive teacher gridpoints
        const int k = phase.steps;
        const int j = rng.integer(1, k / 2);
        const double t = 2.0 * j / k;
        const double t_mid = (2.0 * j - 1.0) / k;
        const double t_end = (2.0 * j - 2.0) / k;
        const LatentVideo z_t = flow::diffuse(item.hr, eps, flow::Timestep(t));
        const LatentVideo target = pd_target(state.teacher, z_t, t, t_mid, t_end, cond);
        lg = pd_grad(state.student, target, z_t, t, t_end, cond);
      }
      loss += lg.loss / schedule.batch;
      accumulate(grads, lg.grads, 1.0 / schedule.batch);
    }
    check_finite(loss, phase.name.c_str(), it);
    const double gnorm = state.opt.step(state.student.tensors, grads);
    state.iteration = it + 1;
    if (log)
      log->add({std::to_string(it), phase.name, fmt(loss), fmt(gnorm), fmt(state.opt.config().lr),
                refreshed ? "1" : "0"});
    if (hook && !hook(state.iteration)) return;
  }
}

LatentVideo sample_video(const DenoiserParams& params, const flow::ConditionBundle& cond, int steps,
                         std::uint64_t noise_seed) {
  Rng rng(noise_seed);
  const LatentVideo eps = rng.normal_video(cond.lr_latent.shape());
  const std::vector<double> schedule = flow::uniform_schedule(steps);
  return flow::sample(
      [&](const LatentVideo& z, flow::Timestep t) { return denoise(params, z, t, cond); }, schedule, eps);
}

}  // namespace vsrd::pgd
