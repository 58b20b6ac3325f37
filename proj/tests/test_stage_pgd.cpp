#include <doctest.h>

#include <cmath>
#include <map>

#include "support/test_support.hpp"
#include "vsrd/evalkit.hpp"
#include "vsrd/stage_pgd.hpp"

using namespace vsrd;
using namespace vsrd::pgd;
using flow::Timestep;

namespace {

double max_abs_diff(const LatentVideo& a, const LatentVideo& b) { return (a.array() - b.array()).abs().maxCoeff(); }

}  // namespace

TEST_CASE("affine fixture produces the declared velocity") {
  const VideoShape s = test::tiny_shape();
  const flow::ConditionBundle cond = test::random_cond(s, 1);
  const LatentVideo z = test::random_video(s, 2);
  const LatentVideo v = denoise(test::affine_model(0.5, -2.0, 0.25), z, Timestep(0.3), cond);
  CHECK(max_abs_diff(v, LatentVideo(s, 0.5 * z.array() - 2.0 * cond.lr_latent.array() + 0.25)) <= 1e-12);
}

TEST_CASE("flow_matching_loss examples") {
  const VideoShape s = test::tiny_shape();
  const LatentVideo z0 = test::random_video(s, 3);
  const LatentVideo eps = test::random_video(s, 4);
  const double t = 0.4;

  SUBCASE("exact prediction gives zero") {
    // with lr = z0, v = (z_t - z0) / t equals eps - z0
    const flow::ConditionBundle cond{z0, 1, false};
    CHECK(flow_matching_loss(test::affine_model(1 / t, -1 / t, 0.0), z0, t, eps, cond) <= 1e-24);
  }
  SUBCASE("constant offset of one gives one") {
    const flow::ConditionBundle cond{z0, 1, false};
    CHECK(flow_matching_loss(test::affine_model(1 / t, -1 / t, 1.0), z0, t, eps, cond) ==
          doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("equals the MSE of denoise against eps - z0") {
    const DenoiserParams p = test::tiny_model(5);
    const flow::ConditionBundle cond = test::random_cond(s, 6);
    const LatentVideo v = denoise(p, flow::diffuse(z0, eps, Timestep(t)), Timestep(t), cond);
    const double want = (v.array() - (eps.array() - z0.array())).square().mean();
    CHECK(flow_matching_loss(p, z0, t, eps, cond) == doctest::Approx(want).epsilon(1e-13));
  }
  SUBCASE("contract") {
    const flow::ConditionBundle cond = test::random_cond(s, 6);
    CHECK_THROWS_AS(flow_matching_loss(test::tiny_model(5), z0, 0.0, eps, cond), ContractViolation);
    LatentVideo bad = eps;
    bad.array()[0] = INFINITY;
    CHECK_THROWS_AS(flow_matching_loss(test::tiny_model(5), z0, t, bad, cond), ContractViolation);
  }
}

TEST_CASE("flow_matching_loss gradient matches finite differences") {
  const DenoiserParams p = test::tiny_model(7);
  const VideoShape s = test::tiny_shape();
  const LatentVideo z0 = test::random_video(s, 8, 0.5);
  const LatentVideo eps = test::random_video(s, 9);
  for (const bool null : {false, true}) {
    flow::ConditionBundle cond = test::random_cond(s, 10);
    cond.is_null = null;
    const test::GradCheck r = test::gradient_check(p.tensors, [&](const Binding& b) {
      return flow_matching_loss(b, p.config, z0, 0.35, eps, cond);
    });
    INFO(r.str());
    CHECK(r.rel_error < 1e-4);
    CHECK(flow_matching_grad(p, z0, 0.35, eps, cond).loss ==
          doctest::Approx(flow_matching_loss(p, z0, 0.35, eps, cond)).epsilon(1e-14));
  }
}

TEST_CASE("cfg_distill_loss") {
  const VideoShape s = test::tiny_shape();
  const LatentVideo z = test::random_video(s, 11);
  const flow::ConditionBundle cond = test::random_cond(s, 12);
  const DenoiserParams teacher = test::tiny_model(13);

  SUBCASE("w = 0 with student == teacher is exactly zero") {
    CHECK(cfg_distill_grad(teacher, teacher, z, 0.5, cond, 0.0).loss == 0.0);
  }
  SUBCASE("condition-blind teacher: target is v_cond for every w") {
    const DenoiserParams blind = test::affine_model(0.7, 0.2, -0.1);
    for (double w : {0.0, 1.0, 3.0, 6.0}) CHECK(cfg_distill_grad(blind, blind, z, 0.5, cond, w).loss <= 1e-26);
  }
  SUBCASE("guided target equals (1 + w) v_c - w v_u") {
    const DenoiserParams student = test::tiny_model(14);
    const double w = 3.0;
    const LatentVideo vc = denoise(teacher, z, Timestep(0.5), cond);
    const LatentVideo vu = denoise(teacher, z, Timestep(0.5), cond.as_null());
    const LatentVideo vs = denoise(student, z, Timestep(0.5), cond);
    const double want = (vs.array() - ((1 + w) * vc.array() - w * vu.array())).square().mean();
    CHECK(cfg_distill_grad(student, teacher, z, 0.5, cond, w).loss == doctest::Approx(want).epsilon(1e-13));
  }
  SUBCASE("teacher receives exactly zero gradient") {
    const DenoiserParams student = test::tiny_model(14);
    ad::Tape tape;
    const Binding sb = bind_params(tape, student.tensors, true);
    const Binding tb = bind_params(tape, teacher.tensors, true);
    tape.backward(cfg_distill_loss(sb, tb, student.config, z, 0.5, cond, 3.0));
    for (const auto& [name, g] : gradients(tb)) {
      INFO(name);
      CHECK(g.cwiseAbs().maxCoeff() == 0.0);
    }
    CHECK(global_norm(gradients(sb)) > 0.0);
  }
  SUBCASE("gradient matches finite differences") {
    const DenoiserParams student = test::tiny_model(14);
    const test::GradCheck r = test::gradient_check(student.tensors, [&](const Binding& b) {
      const Binding tb = bind_params(*b.tape, teacher.tensors, false);
      return cfg_distill_loss(b, tb, student.config, z, 0.5, cond, 3.0);
    });
    INFO(r.str());
    CHECK(r.rel_error < 1e-4);
  }
}

TEST_CASE("pd_target") {
  const VideoShape s = test::tiny_shape();
  const LatentVideo z = test::random_video(s, 15);
  const flow::ConditionBundle cond = test::random_cond(s, 16);

  SUBCASE("constant teacher velocity is linear in the time span") {
    const DenoiserParams teacher = test::affine_model(0.0, 0.0, 0.8);
    const LatentVideo got = pd_target(teacher, z, 0.75, 0.5, 0.25, cond);
    CHECK(max_abs_diff(got, LatentVideo(s, z.array() + (0.25 - 0.75) * 0.8)) <= 1e-12);
  }
  SUBCASE("degenerate interval is the identity") {
    CHECK(pd_target(test::tiny_model(17), z, 0.5, 0.5, 0.5, cond) == z);
  }
  SUBCASE("two teacher Euler steps") {
    const DenoiserParams teacher = test::tiny_model(17);
    const LatentVideo mid = flow::euler_step(z, denoise(teacher, z, Timestep(0.75), cond), Timestep(0.75), Timestep(0.5));
    const LatentVideo end = flow::euler_step(mid, denoise(teacher, mid, Timestep(0.5), cond), Timestep(0.5), Timestep(0.25));
    CHECK(pd_target(teacher, z, 0.75, 0.5, 0.25, cond) == end);
  }
  SUBCASE("non-monotone times") {
    CHECK_THROWS_AS(pd_target(test::tiny_model(17), z, 0.5, 0.6, 0.25, cond), ContractViolation);
  }
}

TEST_CASE("two-step Euler target has second-order local error on the Gaussian flow") {
  // exact flow of N(m, s^2) data: affine transport between Gaussian marginals
  const double m = 0.4, s = 0.7, t = 0.6;
  const auto sd = [&](double u) { return std::sqrt((1 - u) * (1 - u) * s * s + u * u); };
  const auto exact = [&](double z, double u) { return (1 - u) * m + sd(u) / sd(t) * (z - (1 - t) * m); };
  const auto two_step = [&](double z, double dt) {
    const double tm = t - dt / 2, te = t - dt;
    const double zm = z + (tm - t) * eval::gaussian_velocity(z, t, m, s);
    return zm + (te - tm) * eval::gaussian_velocity(zm, tm, m, s);
  };
  for (double z : {-1.0, 0.3, 1.7}) {
    const double e1 = std::abs(two_step(z, 0.2) - exact(z, t - 0.2));
    const double e2 = std::abs(two_step(z, 0.1) - exact(z, t - 0.1));
    const double e3 = std::abs(two_step(z, 0.05) - exact(z, t - 0.05));
    INFO("z " << z << " errors " << e1 << " " << e2 << " " << e3);
    CHECK(e1 / e2 == doctest::Approx(4.0).epsilon(0.2));
    CHECK(e2 / e3 == doctest::Approx(4.0).epsilon(0.1));
  }
}

TEST_CASE("pd_loss") {
  const VideoShape s = test::tiny_shape();
  const LatentVideo z = test::random_video(s, 18);
  const flow::ConditionBundle cond = test::random_cond(s, 19);
  const double t = 0.75, t_mid = 0.5, t_end = 0.25;

  SUBCASE("student == teacher with constant velocity gives zero") {
    const DenoiserParams m = test::affine_model(0.0, 0.0, -0.6);
    CHECK(pd_grad(m, pd_target(m, z, t, t_mid, t_end, cond), z, t, t_end, cond).loss <= 1e-26);
  }
  SUBCASE("velocity offset c gives (t - t_end)^2 c^2") {
    const double c = 0.3;
    const DenoiserParams teacher = test::affine_model(0.0, 0.0, -0.6);
    const DenoiserParams student = test::affine_model(0.0, 0.0, -0.6 + c);
    const double loss = pd_grad(student, pd_target(teacher, z, t, t_mid, t_end, cond), z, t, t_end, cond).loss;
    CHECK(loss == doctest::Approx((t - t_end) * (t - t_end) * c * c).epsilon(1e-12));
  }
  SUBCASE("gradient matches finite differences") {
    const DenoiserParams teacher = test::tiny_model(20);
    const DenoiserParams student = test::tiny_model(21);
    const LatentVideo target = pd_target(teacher, z, t, t_mid, t_end, cond);
    const test::GradCheck r = test::gradient_check(student.tensors, [&](const Binding& b) {
      return pd_loss(b, student.config, target, z, t, t_end, cond);
    });
    INFO(r.str());
    CHECK(r.rel_error < 1e-4);
  }
  SUBCASE("contract") {
    CHECK_THROWS_AS(pd_grad(test::tiny_model(21), z, z, 0.25, 0.5, cond), ContractViolation);
    CHECK_THROWS_AS(pd_grad(test::tiny_model(21), LatentVideo::Zero(VideoShape{1, 4, 4, 3}), z, t, t_end, cond),
                    ContractViolation);
  }
}

TEST_CASE("schedule bookkeeping") {
  PDSchedule sc;
  CHECK(sc.phases() == std::vector<int>{64, 32, 16, 8, 4, 2});
  CHECK(sc.total_iterations() == sc.cfg_iterations + 6L * sc.phase_iterations);
  const auto table = phase_table(sc);
  REQUIRE(table.size() == 7);
  CHECK(table[0].name == "cfg");
  CHECK(table[1].name == "pd64");
  CHECK(table[1].begin == sc.cfg_iterations);
  CHECK(phase_at(table, sc.cfg_iterations - 1).name == "cfg");
  CHECK(phase_at(table, sc.total_iterations() - 1).name == "pd2");
  CHECK_THROWS_AS(phase_at(table, sc.total_iterations()), ContractViolation);
  sc.start_steps = 48;
  CHECK_THROWS_AS(sc.validate(), ContractViolation);
  sc = PDSchedule{};
  sc.teacher_refresh_interval = 0;
  CHECK_THROWS_AS(sc.validate(), ContractViolation);
}

TEST_CASE("stage 0 trains, is deterministic and reports divergence") {
  const data::Dataset ds = test::tiny_dataset(12, 4);
  Stage0Config cfg;
  cfg.iterations = 40;
  cfg.batch = 2;
  const auto val = ds.indices(data::Split::Train);

  Stage0State a = make_stage0_state(tiny_config(), cfg, 1);
  const double before = validation_loss(a.params, ds, val, 9);
  CsvLog log_a = stage0_log();
  run_stage0(cfg, a, ds, 1, &log_a);
  const double after = validation_loss(a.params, ds, val, 9);
  INFO("validation loss " << before << " -> " << after);
  CHECK(after < before);
  CHECK(a.iteration == 40);
  CHECK(log_a.rows().size() == 40);

  Stage0State b = make_stage0_state(tiny_config(), cfg, 1);
  CsvLog log_b = stage0_log();
  run_stage0(cfg, b, ds, 1, &log_b);
  CHECK(bitwise_equal(a.params.tensors, b.params.tensors));
  CHECK(log_a.str() == log_b.str());

  Stage0Config wild = cfg;
  wild.lr = 1e300;
  wild.clip_norm = 0.0;
  Stage0State c = make_stage0_state(tiny_config(), wild, 1);
  try {
    run_stage0(wild, c, ds, 1);
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    CHECK(e.phase() == "stage0");
    CHECK(e.iteration() >= 1);
  }
}

TEST_CASE("stage 1: teacher refresh copies the student at every interval multiple") {
  const data::Dataset ds = test::tiny_dataset(8, 5);
  PDSchedule sc;
  sc.start_steps = 4;
  sc.cfg_iterations = 3;
  sc.phase_iterations = 12;
  sc.teacher_refresh_interval = 5;
  sc.batch = 1;
  Stage1State st = make_stage1_state(test::tiny_model(22), sc);

  std::map<long, ParamSet> student_after, teacher_after;
  std::map<long, long> opt_steps;
  student_after[0] = st.student.tensors;
  teacher_after[0] = st.teacher.tensors;
  CsvLog log = stage1_log();
  run_stage1(sc, st, ds, 3, &log, [&](long done) {
    student_after[done] = st.student.tensors;
    teacher_after[done] = st.teacher.tensors;
    opt_steps[done] = st.opt.steps();
    return true;
  });
  REQUIRE(st.iteration == sc.total_iterations());

  long refreshes = 0;
  for (long it = 0; it < sc.total_iterations(); ++it) {
    const long pd_it = it - sc.cfg_iterations;
    const bool phase_start = it == sc.cfg_iterations || it == sc.cfg_iterations + sc.phase_iterations;
    const bool expected = pd_it >= 0 && (phase_start || pd_it % 5 == 0);
    INFO("iteration " << it);
    CHECK((log.rows()[static_cast<std::size_t>(it)][5] == "1") == expected);
    if (expected) {
      ++refreshes;
      CHECK(bitwise_equal(teacher_after[it + 1], student_after[it]));
    } else {
      CHECK(bitwise_equal(teacher_after[it + 1], teacher_after[it]));
    }
  }
  CHECK(st.refreshes == refreshes);
  CHECK(refreshes == 6);  // pd iterations 0, 5, 10 | 12, 15, 20
  // optimizer state restarts at each phase boundary
  CHECK(opt_steps[sc.cfg_iterations + 1] == 1);
  CHECK(opt_steps[sc.cfg_iterations + sc.phase_iterations + 1] == 1);
  CHECK(opt_steps[sc.cfg_iterations] == sc.cfg_iterations);
}

TEST_CASE("stage 1: each phase ends below its starting loss") {
  const data::Dataset ds = test::tiny_dataset(12, 6);
  Stage0Config c0;
  c0.iterations = 60;
  c0.batch = 2;
  Stage0State base = make_stage0_state(tiny_config(), c0, 2);
  run_stage0(c0, base, ds, 2);

  PDSchedule sc;
  sc.start_steps = 4;
  sc.cfg_iterations = 24;
  sc.phase_iterations = 24;
  sc.teacher_refresh_interval = 50;
  sc.batch = 2;
  sc.lr = 1e-3;
  Stage1State st = make_stage1_state(base.params, sc);
  CsvLog log = stage1_log();
  run_stage1(sc, st, ds, 4, &log);
  const std::vector<double> loss = log.column("loss");
  for (const PhaseInfo& ph : phase_table(sc)) {
    double first = 0.0, last = 0.0;
    for (long i = 0; i < 6; ++i) {
      first += loss[static_cast<std::size_t>(ph.begin + i)];
      last += loss[static_cast<std::size_t>(ph.end - 1 - i)];
    }
    INFO(ph.name << ": first " << first / 6 << " last " << last / 6);
    CHECK(last < first);
  }
}

TEST_CASE("sample_video is deterministic") {
  const DenoiserParams p = test::tiny_model(23);
  const flow::ConditionBundle cond = test::random_cond(test::tiny_shape(), 24);
  const LatentVideo a = sample_video(p, cond, 4, 7);
  CHECK(a == sample_video(p, cond, 4, 7));
  CHECK(a.shape() == test::tiny_shape());
  CHECK_FALSE(a == sample_video(p, cond, 4, 8));
}
