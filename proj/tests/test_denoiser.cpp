#include <doctest.h>

#include <cmath>

#include "support/test_support.hpp"
#include "vsrd/denoiser.hpp"
#include "vsrd/evalkit.hpp"

using namespace vsrd;
using flow::Timestep;

TEST_CASE("feature taps follow depth fractions") {
  DenoiserConfig c;
  c.depth = 30;
  CHECK(c.feature_taps() == std::vector<int>{9, 18, 27});
  c.depth = 6;
  CHECK(c.feature_taps() == std::vector<int>{2, 4, 5});
  CHECK(tiny_config().feature_taps() == std::vector<int>{1, 2});
  c.feature_fractions = {0.5, 0.4};
  CHECK_THROWS_AS(c.validate(), ContractViolation);
  c = DenoiserConfig{};
  c.width = 10;
  c.heads = 4;
  CHECK_THROWS_AS(init_params(c, 1), ContractViolation);
}

TEST_CASE("init_params is deterministic in (config, seed)") {
  const DenoiserParams a = init_params(tiny_config(), 4);
  const DenoiserParams b = init_params(tiny_config(), 4);
  const DenoiserParams c = init_params(tiny_config(), 5);
  CHECK(bitwise_equal(a.tensors, b.tensors));
  CHECK_FALSE(bitwise_equal(a.tensors, c.tensors));
  CHECK(all_finite(a.tensors));
  CHECK(a.tensors.count("cond.null") == 1);
  CHECK(a.tensors.count("cond.table") == 1);
  CHECK(param_count(a.tensors) == param_count(c.tensors));
}

TEST_CASE("denoise: shapes, determinism, finiteness") {
  const DenoiserParams p = test::tiny_model(1);
  for (const VideoShape& s : {VideoShape{2, 4, 4, 3}, VideoShape{4, 8, 8, 3}, VideoShape{1, 2, 6, 3}}) {
    const flow::ConditionBundle cond = test::random_cond(s, 2);
    const LatentVideo z = LatentVideo::Zero(s);
    const LatentVideo v1 = denoise(p, z, Timestep(0.5), cond);
    const LatentVideo v2 = denoise(p, z, Timestep(0.5), cond);
    CHECK(v1.shape() == s);
    CHECK(v1.all_finite());
    CHECK(v1 == v2);
  }
}

TEST_CASE("prior velocity is the Gaussian posterior velocity around the LR latent") {
  DenoiserParams p = test::tiny_model(4);
  p.tensors.at("final.w").setZero();
  p.tensors.at("final.b").setZero();
  p.tensors.at("skip.w").setZero();
  p.config.prior_var = 0.04;
  const VideoShape s = test::tiny_shape();
  const flow::ConditionBundle cond = test::random_cond(s, 5);
  const LatentVideo z = test::random_video(s, 6);
  for (double t : {0.1, 0.5, 0.9}) {
    const LatentVideo v = denoise(p, z, Timestep(t), cond);
    for (Index i = 0; i < z.numel(); ++i)
      CHECK(v.array()[i] ==
            doctest::Approx(eval::gaussian_velocity(z.array()[i], t, cond.lr_latent.array()[i], 0.2)).epsilon(1e-12));
  }
  // endpoints: nothing known about eps at t = 0; z_t is pure noise at t = 1
  CHECK(denoise(p, z, Timestep(0.0), cond).array().isApprox(-z.array(), 1e-14));
  CHECK(denoise(p, z, Timestep(1.0), cond).array().isApprox(z.array() - cond.lr_latent.array(), 1e-14));
  // the null condition keeps the LR latent, so the prior term is unchanged
  CHECK(denoise(p, z, Timestep(0.5), cond.as_null()) == denoise(p, z, Timestep(0.5), cond));

  p.config.prior_velocity = false;
  CHECK(denoise(p, z, Timestep(0.5), cond).array().abs().maxCoeff() == 0.0);
  p.config.prior_var = 0.0;
  CHECK_THROWS_AS(p.config.validate(), ContractViolation);
}

TEST_CASE("denoise: contract errors") {
  const DenoiserParams p = test::tiny_model(1);
  const VideoShape s = test::tiny_shape();
  const flow::ConditionBundle cond = test::random_cond(s, 2);
  CHECK_THROWS_AS(denoise(p, LatentVideo::Zero(VideoShape{2, 4, 4, 2}), Timestep(0.5), cond), ContractViolation);
  CHECK_THROWS_AS(denoise(p, LatentVideo::Zero(VideoShape{2, 3, 4, 3}), Timestep(0.5), cond), ContractViolation);
  CHECK_THROWS_AS(denoise(p, LatentVideo::Zero(s), Timestep(0.5), test::random_cond(VideoShape{2, 8, 8, 3}, 2)),
                  ContractViolation);
  LatentVideo bad = LatentVideo::Zero(s);
  bad.array()[3] = std::nan("");
  CHECK_THROWS_AS(denoise(p, bad, Timestep(0.5), cond), ContractViolation);
  flow::ConditionBundle wrong_class = cond;
  wrong_class.cond_class = 7;
  CHECK_THROWS_AS(denoise(p, LatentVideo::Zero(s), Timestep(0.5), wrong_class), ContractViolation);
}

TEST_CASE("null and class conditions produce different velocities") {
  const DenoiserParams p = test::tiny_model(3);
  const VideoShape s = test::tiny_shape();
  const flow::ConditionBundle cond = test::random_cond(s, 4);
  const LatentVideo z = test::random_video(s, 5);
  const LatentVideo vc = denoise(p, z, Timestep(0.5), cond);
  const LatentVideo vn = denoise(p, z, Timestep(0.5), cond.as_null());
  CHECK((vc.array() - vn.array()).abs().maxCoeff() > 1e-6);
  flow::ConditionBundle other = cond;
  other.cond_class = 0;
  CHECK((vc.array() - denoise(p, z, Timestep(0.5), other).array()).abs().maxCoeff() > 1e-6);
}

TEST_CASE("denoise_with_features agrees with denoise") {
  const DenoiserParams p = test::tiny_model(6);
  const VideoShape s{2, 4, 4, 3};
  const flow::ConditionBundle cond = test::random_cond(s, 7);
  const LatentVideo z = test::random_video(s, 8);
  const auto [v, feats] = denoise_with_features(p, z, Timestep(0.3), cond);
  CHECK(v == denoise(p, z, Timestep(0.3), cond));
  REQUIRE(feats.levels.size() == p.config.feature_taps().size());
  const TokenGrid g = token_grid(p.config, s);
  CHECK(feats.grid == g);
  for (const auto& m : feats.levels) {
    CHECK(m.rows() == g.count());
    CHECK(m.cols() == p.config.width);
  }
  const auto again = denoise_with_features(p, z, Timestep(0.3), cond);
  for (std::size_t l = 0; l < feats.levels.size(); ++l) CHECK(feats.levels[l] == again.second.levels[l]);

  // features follow the parameters, not a cached copy
  DenoiserParams q = p;
  q.tensors.at("blocks.0.fc1.w")(0, 0) += 0.5;
  const auto changed = denoise_with_features(q, z, Timestep(0.3), cond);
  CHECK((changed.second.levels[0] - feats.levels[0]).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("d mean(velocity) / d params matches finite differences") {
  const DenoiserParams p = test::tiny_model(9);
  const VideoShape s = test::tiny_shape();
  const flow::ConditionBundle cond = test::random_cond(s, 10);
  const LatentVideo z = test::random_video(s, 11);
  const test::GradCheck r = test::gradient_check(p.tensors, [&](const Binding& b) {
    const ad::Var zv = video_var(*b.tape, z);
    return ad::mean(denoiser_forward(b, p.config, zv, s, 0.4, cond, false).velocity);
  });
  INFO(r.str());
  CHECK(r.analytic_norm > 0.0);
  CHECK(r.rel_error < 1e-4);
}

TEST_CASE("discriminator heads") {
  const DenoiserConfig cfg = tiny_config();
  const HeadConfig hc = head_config_for(cfg, 4);
  CHECK(hc.levels == 2);
  CHECK(hc.in_channels == 2 * cfg.width);

  const DenoiserParams real = test::tiny_model(12);
  const DenoiserParams fake = test::tiny_model(13);
  const VideoShape s = test::tiny_shape();
  const flow::ConditionBundle cond = test::random_cond(s, 14);
  const LatentVideo z = test::random_video(s, 15);
  const FeatureStack h = concat_features(denoise_with_features(real, z, Timestep(0.5), cond).second,
                                         denoise_with_features(fake, z, Timestep(0.5), cond).second);
  CHECK(h.levels[0].cols() == 2 * cfg.width);

  SUBCASE("zero features and zero final layer give D = 0") {
    FeatureStack zero = h;
    for (auto& m : zero.levels) m.setZero();
    const DiscOutput d = disc_forward(init_heads(hc, 1), zero);
    CHECK(d.value == 0.0);
    CHECK(d.logit_maps.size() == 2);
  }
  SUBCASE("deterministic and non-constant for random heads") {
    const DiscriminatorHeads heads = init_heads(hc, 2, false);
    const DiscOutput a = disc_forward(heads, h);
    CHECK(a.value == disc_forward(heads, h).value);
    FeatureStack doubled = h;
    for (auto& m : doubled.levels) m *= 2.0;
    CHECK(std::abs(disc_forward(heads, doubled).value - a.value) > 1e-9);
    for (const auto& m : a.logit_maps) CHECK(m.rows() == h.grid.count());
  }
  SUBCASE("level mismatch is rejected") {
    FeatureStack one = h;
    one.levels.pop_back();
    CHECK_THROWS_AS(disc_forward(init_heads(hc, 1), one), ContractViolation);
  }
}

TEST_CASE("heads on stop-gradient features leave backbones with exactly zero gradient") {
  const DenoiserParams real = test::tiny_model(16);
  const DenoiserParams fake = test::tiny_model(17);
  const VideoShape s = test::tiny_shape();
  const flow::ConditionBundle cond = test::random_cond(s, 18);
  const LatentVideo z = test::random_video(s, 19);
  const DiscriminatorHeads heads = init_heads(head_config_for(real.config, 4), 3, false);

  ad::Tape tape;
  const Binding br = bind_params(tape, real.tensors, true);
  const Binding bf = bind_params(tape, fake.tensors, true);
  const Binding bh = bind_params(tape, heads.tensors, true);
  const ad::Var zv = video_var(tape, z);
  const ForwardResult fr = denoiser_forward(br, real.config, zv, s, 0.5, cond, true);
  const ForwardResult ff = denoiser_forward(bf, fake.config, zv, s, 0.5, cond, true);
  std::vector<ad::Var> feats = concat_features(fr.features, ff.features);
  for (auto& f : feats) f = ad::stop_gradient(f);
  tape.backward(disc_forward(bh, heads.config, feats, fr.grid).value);

  for (const Binding* b : {&br, &bf})
    for (const auto& [name, g] : gradients(*b)) {
      INFO(name);
      CHECK(g.cwiseAbs().maxCoeff() == 0.0);
    }
  CHECK(global_norm(gradients(bh)) > 0.0);
}

TEST_CASE("identity codec round trip") {
  const IdentityCodec codec;
  const LatentVideo x = test::random_video(VideoShape{2, 3, 5, 3}, 20);
  CHECK(codec.decode(codec.encode(x)) == x);
  CHECK(codec.encode(x).shape() == x.shape());
  CHECK(codec.latent_shape(x.shape()) == x.shape());
}
