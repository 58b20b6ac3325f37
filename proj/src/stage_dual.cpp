#include "vsrd/stage_dual.hpp"

#include <algorithm>
#include <cmath>

namespace vsrd::dual {

using ad::Var;

const char* to_string(Mode m) {
  switch (m) {
    case Mode::Joint:
      return "joint";
    case Mode::DmdOnly:
      return "dmd_only";
    case Mode::GanOnly:
      return "gan_only";
    case Mode::Sequential:
      return "sequential";
  }
  return "?";
}

Mode mode_from_string(const std::string& s) {
  for (Mode m : {Mode::Joint, Mode::DmdOnly, Mode::GanOnly, Mode::Sequential})
    if (s == to_string(m)) return m;
  throw ContractViolation("unknown stage-2 mode '" + s + "'");
}

void Stage2Config::validate() const {
  if (!(lambda_dmd >= 0.0 && lambda_gan >= 0.0 && lambda_fm >= 0.0))
    throw ContractViolation("stage2: loss weights must be >= 0");
  if (interval < 1) throw ContractViolation("stage2: interval must be >= 1");
  if (iterations < 0 || batch < 1) throw ContractViolation("stage2: iterations >= 0 and batch >= 1 required");
  if (!(guard > 0.0)) throw ContractViolation("stage2: guard must be > 0");
  if (!(lr > 0.0 && lr_fake > 0.0 && lr_heads > 0.0)) throw ContractViolation("stage2: learning rates must be > 0");
  if (!(t_min > 0.0 && t_min <= t_max && t_max <= 1.0)) throw ContractViolation("stage2: need 0 < t_min <= t_max <= 1");
  if (head_hidden < 1) throw ContractViolation("stage2: head_hidden must be >= 1");
}

// ---- losses ---------------------------------------------------------------------

Var one_step_generate(const Binding& student, const DenoiserConfig& config, const LatentVideo& eps,
                      const flow::ConditionBundle& cond) {
  ad::Tape& tape = *student.tape;
  const Var e = video_var(tape, eps);
  const Var v = denoiser_forward(student, config, e, eps.shape(), 1.0, cond, false).velocity;
  return ad::sub(e, v);
}

LatentVideo one_step_generate(const DenoiserParams& student, const LatentVideo& eps,
                              const flow::ConditionBundle& cond) {
  LatentVideo z0 = flow::predict_clean(eps, denoise(student, eps, flow::Timestep(1.0), cond), flow::Timestep(1.0));
  if (!z0.all_finite()) throw DivergenceError("generate", 0, "one_step_generate: non-finite output");
  return z0;
}

Var fake_score_loss(const Binding& fake, const DenoiserConfig& config, const LatentVideo& z0_s, double t,
                    const LatentVideo& eps2, const flow::ConditionBundle& cond) {
  require_same_shape(z0_s, eps2, "fake_score_loss");
  const flow::Timestep ts(t);
  const LatentVideo z_t = flow::diffuse(z0_s, eps2, ts);
  ad::Tape& tape = *fake.tape;
  const Var v = denoiser_forward(fake, config, video_var(tape, z_t), z_t.shape(), t, cond, false).velocity;
  return ad::mse(v, video_var(tape, flow::velocity_target(z0_s, eps2)));
}

LossGrad fake_score_grad(const DenoiserParams& fake, const LatentVideo& z0_s, double t, const LatentVideo& eps2,
                         const flow::ConditionBundle& cond) {
  ad::Tape tape;
  const Binding b = bind_params(tape, fake.tensors, true);
  const Var loss = fake_score_loss(b, fake.config, z0_s, t, eps2, cond);
  tape.backward(loss);
  return LossGrad{loss.item(), gradients(b)};
}

LatentVideo dmd_grad(const LatentVideo& z0_s, const LatentVideo& z0_f, const LatentVideo& z0_r, double guard) {
  require_same_shape(z0_s, z0_f, "dmd_grad");
  require_same_shape(z0_s, z0_r, "dmd_grad");
  if (!(guard > 0.0)) throw ContractViolation("dmd_grad: guard must be > 0");
  const double denom = std::max((z0_s.array() - z0_r.array()).abs().mean(), guard);
  return LatentVideo(z0_s.shape(), (z0_f.array() - z0_r.array()) / denom);
}

Var dmd_loss(const Var& z0_s, const LatentVideo& grad) {
  if (z0_s.value().size() != grad.numel()) throw ContractViolation("dmd_loss: shape mismatch");
  ad::Tape& tape = *z0_s.tape();
  const Eigen::Map<const Eigen::MatrixXd> g(grad.array().data(), z0_s.rows(), z0_s.cols());
  const Var anchor = tape.constant(z0_s.value() - g);
  return ad::mse(z0_s, anchor);
}

FeatureStack extract_disc_features(const DenoiserParams& real, const DenoiserParams& fake, const LatentVideo& z_t,
                                   double t, const flow::ConditionBundle& cond) {
  if (!(real.config == fake.config)) throw ContractViolation("extract_disc_features: backbone configs differ");
  if (!(t > 0.0)) throw ContractViolation("extract_disc_features: discriminator inputs must be diffused (t > 0)");
  const flow::Timestep ts(t);
  auto [vr, fr] = denoise_with_features(real, z_t, ts, cond);
  auto [vf, ff] = denoise_with_features(fake, z_t, ts, cond);
  return concat_features(fr, ff);
}

double gan_d_loss(double d_real, double d_fake) {
  return std::max(0.0, 1.0 - d_real) + std::max(0.0, 1.0 + d_fake);
}

double gan_g_loss(double d_fake) { return -d_fake; }

Var gan_d_loss(const Var& d_real, const Var& d_fake) {
  return ad::add(ad::relu(ad::add_scalar(ad::scale(d_real, -1.0), 1.0)), ad::relu(ad::add_scalar(d_fake, 1.0)));
}

Var gan_g_loss(const Var& d_fake) { return ad::scale(d_fake, -1.0); }

double feature_matching_loss(const FeatureStack& h_s, const FeatureStack& h_hr) {
  if (h_s.levels.size() != h_hr.levels.size() || h_s.levels.empty())
    throw ContractViolation("feature_matching_loss: level count mismatch");
  double acc = 0.0;
  for (std::size_t l = 0; l < h_s.levels.size(); ++l) {
    const auto& a = h_s.levels[l];
    const auto& b = h_hr.levels[l];
    if (a.rows() != b.rows() || a.cols() != b.cols())
      throw ContractViolation("feature_matching_loss: level shape mismatch");
    acc += (a - b).squaredNorm() / static_cast<double>(a.size());
  }
  return acc / static_cast<double>(h_s.levels.size());
}

Var feature_matching_loss(const std::vector<Var>& h_s, const std::vector<Var>& h_hr) {
  if (h_s.size() != h_hr.size() || h_s.empty()) throw ContractViolation("feature_matching_loss: level count mismatch");
  Var total = ad::mse(h_s[0], h_hr[0]);
  for (std::size_t l = 1; l < h_s.size(); ++l) total = ad::add(total, ad::mse(h_s[l], h_hr[l]));
  return ad::scale(total, 1.0 / static_cast<double>(h_s.size()));
}

// ---- state and updates -----------------------------------------------------------

DualStreamState make_dual_state(const DenoiserParams& init_student, const DenoiserParams& teacher,
                                const Stage2Config& cfg, std::uint64_t seed) {
  cfg.validate();
  if (!(init_student.config == teacher.config)) throw ContractViolation("stage2: student and teacher configs differ");
  auto adam = [&](double lr) { return Adam(AdamConfig{lr, cfg.beta1, cfg.beta2, 1e-8, cfg.clip_norm}); };
  return DualStreamState{init_student,
                         teacher,
                         teacher,
                         init_heads(head_config_for(teacher.config, cfg.head_hidden),
                                    derive_seed(seed, {hash_name("stage2.heads")})),
                         adam(cfg.lr),
                         adam(cfg.lr_fake),
                         adam(cfg.lr_heads),
                         0,
                         0,
                         0};
}

Weights weights_at(const Stage2Config& cfg, long iteration) {
  Mode m = cfg.mode;
  if (m == Mode::Sequential) m = iteration < cfg.iterations / 2 ? Mode::DmdOnly : Mode::GanOnly;
  switch (m) {
    case Mode::DmdOnly:
      return {cfg.lambda_dmd, 0.0, 0.0, false};
    case Mode::GanOnly:
      return {0.0, cfg.lambda_gan, cfg.lambda_fm, true};
    default:
      return {cfg.lambda_dmd, cfg.lambda_gan, cfg.lambda_fm, true};
  }
}

bool is_student_iteration(const Stage2Config& cfg, long it) { return (it + 1) % (cfg.interval + 1) == 0; }

namespace {

double max_abs(const ParamSet& p) {
  double m = 0.0;
  for (const auto& [_, a] : p) m = std::max(m, a.size() ? a.cwiseAbs().maxCoeff() : 0.0);
  return m;
}

void check_finite(double v, const char* phase, long it) {
  if (!std::isfinite(v))
    throw DivergenceError(phase, it, std::string("stage2 ") + phase + ": non-finite loss at iteration " +
                                         std::to_string(it));
}

}  // namespace

UpdateRecord auxiliary_update(DualStreamState& state, const Stage2Config& cfg, const data::Dataset& ds,
                              const std::vector<Index>& batch, Rng& rng) {
  const long it = state.iteration;
  const Weights w = weights_at(cfg, it);
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  UpdateRecord rec;
  rec.iteration = it;
  rec.phase = "aux";

  struct Draw {
    LatentVideo z0_s;
    double t;
    LatentVideo eps;
  };
  std::vector<Draw> draws;
  ParamSet fake_grads;
  double l_diff = 0.0;
  for (Index i : batch) {
    const data::VideoPair& item = ds.items.at(static_cast<std::size_t>(i));
    const flow::ConditionBundle cond = condition_of(item);
    const LatentVideo eps = rng.normal_video(item.hr.shape());
    LatentVideo z0_s = one_step_generate(state.student, eps, cond);
    const double t = rng.uniform(cfg.t_min, cfg.t_max);
    const LatentVideo eps2 = rng.normal_video(item.hr.shape());
    const LossGrad lg = fake_score_grad(state.fake, z0_s, t, eps2, cond);
    l_diff += inv_b * lg.loss;
    accumulate(fake_grads, lg.grads, inv_b);
    const double t_d = rng.uniform(cfg.t_min, cfg.t_max);
    draws.push_back({std::move(z0_s), t_d, rng.normal_video(item.hr.shape())});
  }
  check_finite(l_diff, "aux", it);
  state.opt_fake.step(state.fake.tensors, fake_grads);
  rec.l_diff = l_diff;

  if (w.train_heads) {
    ParamSet head_grads;
    double l_d = 0.0;
    double backbone_max = 0.0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const data::VideoPair& item = ds.items.at(static_cast<std::size_t>(batch[b]));
      const flow::ConditionBundle cond = condition_of(item);
      const Draw& d = draws[b];
      const flow::Timestep ts(d.t);
      const LatentVideo zs_t = flow::diffuse(d.z0_s, d.eps, ts);
      const LatentVideo zhr_t = flow::diffuse(item.hr, d.eps, ts);

      // backbones are bound as trainable leaves only to confirm the
      // stop-gradient leaves them without gradient
      ad::Tape tape;
      const Binding real = bind_params(tape, state.real.tensors, true);
      const Binding fake = bind_params(tape, state.fake.tensors, true);
      const Binding heads = bind_params(tape, state.heads.tensors, true);
      auto features = [&](const LatentVideo& z) {
        const Var zv = video_var(tape, z);
        const ForwardResult fr = denoiser_forward(real, state.real.config, zv, z.shape(), d.t, cond, true);
        const ForwardResult ff = denoiser_forward(fake, state.fake.config, zv, z.shape(), d.t, cond, true);
        std::vector<Var> h = concat_features(fr.features, ff.features);
        for (Var& v : h) v = ad::stop_gradient(v);
        return std::pair{h, fr.grid};
      };
      const auto [h_fake, grid] = features(zs_t);
      const auto [h_real, grid_r] = features(zhr_t);
      const Var d_fake = disc_forward(heads, state.heads.config, h_fake, grid).value;
      const Var d_real = disc_forward(heads, state.heads.config, h_real, grid_r).value;
      const Var loss = gan_d_loss(d_real, d_fake);
      tape.backward(loss);
      l_d += inv_b * loss.item();
      accumulate(head_grads, gradients(heads), inv_b);
      backbone_max = std::max({backbone_max, max_abs(gradients(real)), max_abs(gradients(fake))});
    }
    check_finite(l_d, "aux", it);
    state.opt_heads.step(state.heads.tensors, head_grads);
    rec.l_d = l_d;
    rec.backbone_grad_max = backbone_max;
  }
  ++state.aux_updates;
  ++state.iteration;
  return rec;
}

UpdateRecord student_update(DualStreamState& state, const Stage2Config& cfg, const data::Dataset& ds,
                            const std::vector<Index>& batch, Rng& rng, ParamSet* grads_out) {
  const long it = state.iteration;
  const Weights w = weights_at(cfg, it);
  const bool adversarial = w.gan > 0.0 || w.fm > 0.0;
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  UpdateRecord rec;
  rec.iteration = it;
  rec.phase = "student";
  double l_dmd = 0.0, l_g = 0.0, l_fm = 0.0, l_total = 0.0;
  ParamSet grads;

  for (Index i : batch) {
    const data::VideoPair& item = ds.items.at(static_cast<std::size_t>(i));
    const flow::ConditionBundle cond = condition_of(item);
    const VideoShape shape = item.hr.shape();
    const LatentVideo eps = rng.normal_video(shape);
    const double t = rng.uniform(cfg.t_min, cfg.t_max);
    const LatentVideo eps_t = rng.normal_video(shape);  // shared by the student and HR diffusions

    ad::Tape tape;
    const Binding student = bind_params(tape, state.student.tensors, true);
    const Binding real = bind_params(tape, state.real.tensors, false);
    const Binding fake = bind_params(tape, state.fake.tensors, false);
    const Var z0_s = one_step_generate(student, state.student.config, eps, cond);
    const Var zs_t = ad::add(ad::scale(z0_s, 1.0 - t), ad::scale(video_var(tape, eps_t), t));

    const ForwardResult fr = denoiser_forward(real, state.real.config, zs_t, shape, t, cond, adversarial);
    const ForwardResult ff = denoiser_forward(fake, state.fake.config, zs_t, shape, t, cond, adversarial);
    const LatentVideo zs_t_val = to_video(zs_t, shape);
    const flow::Timestep ts(t);
    const LatentVideo z0_r = flow::predict_clean(zs_t_val, to_video(fr.velocity, shape), ts);
    const LatentVideo z0_f = flow::predict_clean(zs_t_val, to_video(ff.velocity, shape), ts);
    const LatentVideo g = dmd_grad(to_video(z0_s, shape), z0_f, z0_r, cfg.guard);
    const Var dmd = dmd_loss(z0_s, g);
    Var total = ad::scale(dmd, w.dmd);
    l_dmd += inv_b * dmd.item();

    if (adversarial) {
      const Binding heads = bind_params(tape, state.heads.tensors, false);
      std::vector<Var> h_s = concat_features(fr.features, ff.features);
      const Var zhr_t = video_var(tape, flow::diffuse(item.hr, eps_t, ts));
      const ForwardResult hr_r = denoiser_forward(real, state.real.config, zhr_t, shape, t, cond, true);
      const ForwardResult hr_f = denoiser_forward(fake, state.fake.config, zhr_t, shape, t, cond, true);
      const std::vector<Var> h_hr = concat_features(hr_r.features, hr_f.features);

      std::vector<Var> h_s_for_d = h_s;
      if (cfg.literal_sg)
        for (Var& v : h_s_for_d) v = ad::stop_gradient(v);
      const Var gen = gan_g_loss(disc_forward(heads, state.heads.config, h_s_for_d, fr.grid).value);
      const Var fm = feature_matching_loss(h_s, h_hr);
      total = ad::add(total, ad::add(ad::scale(gen, w.gan), ad::scale(fm, w.fm)));
      l_g += inv_b * gen.item();
      l_fm += inv_b * fm.item();
    }
    tape.backward(total);
    l_total += inv_b * total.item();
    accumulate(grads, gradients(student), inv_b);
  }
  check_finite(l_total, "student", it);
  rec.l_dmd = l_dmd;
  if (adversarial) {
    rec.l_g = l_g;
    rec.l_fm = l_fm;
  }
  rec.l_total = l_total;
  rec.grad_norm = state.opt_student.step(state.student.tensors, grads);
  if (grads_out) *grads_out = std::move(grads);
  ++state.student_updates;
  ++state.iteration;
  return rec;
}

CsvLog stage2_log() {
  return CsvLog({"iteration", "phase", "l_diff", "l_d", "l_dmd", "l_g", "l_fm", "student_grad_norm"});
}

void run_stage2(const Stage2Config& cfg, DualStreamState& state, const data::Dataset& ds, std::uint64_t seed,
                CsvLog* log, const ProgressHook& hook) {
  cfg.validate();
  if (ds.n_train < 1) throw ContractViolation("stage2: dataset has no training items");
  auto cell = [](double v) { return std::isnan(v) ? std::string() : fmt(v); };
  while (state.iteration < cfg.iterations) {
    const long it = state.iteration;
    Rng rng = iteration_rng(seed, "stage2", it);
    const std::vector<Index> batch = draw_batch(ds, rng, cfg.batch);
    const UpdateRecord r = is_student_iteration(cfg, it) ? student_update(state, cfg, ds, batch, rng)
                                                         : auxiliary_update(state, cfg, ds, batch, rng);
    if (log)
      log->add({std::to_string(it), r.phase, cell(r.l_diff), cell(r.l_d), cell(r.l_dmd), cell(r.l_g), cell(r.l_fm),
                cell(r.grad_norm)});
    if (hook && !hook(state.iteration)) return;
  }
}

}  // namespace vsrd::dual
