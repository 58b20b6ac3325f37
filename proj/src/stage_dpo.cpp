#include "vsrd/stage_dpo.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>

#include <json.hpp>

#include "vsrd/blob.hpp"
#include "vsrd/evalkit.hpp"
#include "vsrd/stage_dual.hpp"

namespace vsrd::dpo {

using ad::Var;

void Stage3Config::validate() const {
  if (candidates < 2) throw ContractViolation("stage3: candidates must be >= 2");
  if (!(beta > 0.0)) throw ContractViolation("stage3: beta must be > 0");
  if (pairs_total < 1) throw ContractViolation("stage3: pairs_total must be >= 1");
  if (iterations < 0 || batch < 1) throw ContractViolation("stage3: iterations >= 0 and batch >= 1 required");
  if (!(lr > 0.0)) throw ContractViolation("stage3: lr must be > 0");
  if (!(t_min >= 0.0 && t_min <= t_max && t_max <= 1.0)) throw ContractViolation("stage3: need 0 <= t_min <= t_max <= 1");
  if (!(weights.fidelity >= 0.0 && weights.detail >= 0.0 && weights.temporal >= 0.0))
    throw ContractViolation("stage3: scorer weights must be >= 0");
}

std::vector<LatentVideo> generate_candidates(const DenoiserParams& student, const flow::ConditionBundle& cond, int k,
                                             std::uint64_t seed) {
  if (k < 2) throw ContractViolation("generate_candidates: k must be >= 2");
  std::vector<LatentVideo> out;
  out.reserve(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) {
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(i)}));
    out.push_back(dual::one_step_generate(student, rng.normal_video(cond.lr_latent.shape()), cond));
  }
  return out;
}

double quality_score(const LatentVideo& candidate, const flow::ConditionBundle& cond, const ScoreContext& ctx,
                     const ScorerWeights& w) {
  require_same_shape(candidate, cond.lr_latent, "quality_score");
  double score = 0.0;
  if (ctx.hr) {
    require_same_shape(candidate, *ctx.hr, "quality_score");
    score -= w.fidelity * (candidate.array() - ctx.hr->array()).square().mean();
  }
  score += w.detail * data::hf_energy(candidate) / std::max(data::hf_energy(cond.lr_latent), 1e-12);
  if (ctx.scene) {
    const double warp = eval::warp_error_gt(candidate, data::gt_flow(*ctx.scene), data::visibility_mask(*ctx.scene));
    score -= w.temporal * warp / eval::kWarpScale;
  }
  return score;
}

std::pair<std::size_t, std::size_t> best_and_worst(const std::vector<double>& scores) {
  if (scores.empty()) throw ContractViolation("best_and_worst: no scores");
  std::size_t best = 0, worst = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[best]) best = i;
    if (scores[i] < scores[worst]) worst = i;
  }
  return {best, worst};
}

std::vector<PreferencePair> build_preference_dataset(const DenoiserParams& student, const data::Dataset& ds,
                                                     const Stage3Config& cfg, std::uint64_t seed,
                                                     std::size_t* skipped) {
  cfg.validate();
  std::vector<Index> train = ds.indices(data::Split::Train);
  if (train.empty()) throw ContractViolation("build_preference_dataset: no training items");
  Rng perm(derive_seed(seed, {hash_name("stage3.items")}));
  std::shuffle(train.begin(), train.end(), perm.engine());
  train.resize(std::min(train.size(), static_cast<std::size_t>(cfg.pairs_total)));

  std::vector<PreferencePair> pairs;
  std::size_t n_skipped = 0;
  for (Index i : train) {
    const data::VideoPair& item = ds.items.at(static_cast<std::size_t>(i));
    const flow::ConditionBundle cond = condition_of(item);
    const std::vector<LatentVideo> cands =
        generate_candidates(student, cond, cfg.candidates, derive_seed(seed, {static_cast<std::uint64_t>(i)}));
    std::vector<double> scores;
    for (const LatentVideo& c : cands) scores.push_back(quality_score(c, cond, {&item.hr, &item.scene}, cfg.weights));
    const auto [b, w] = best_and_worst(scores);
    if (!(scores[b] > scores[w])) {
      std::clog << "stage3: item " << i << " skipped, all candidate scores equal\n";
      ++n_skipped;
      continue;
    }
    pairs.push_back(PreferencePair{i, cond, cands[b], cands[w], scores[b], scores[w]});
  }
  if (skipped) *skipped = n_skipped;
  return pairs;
}

double dpo_inner(const DpoTerms& x, double beta) {
  if (!(beta > 0.0)) throw ContractViolation("dpo: beta must be > 0");
  return -0.5 * beta * ((x.s_w - x.ref_w) - (x.s_l - x.ref_l));
}

double dpo_loss(const DpoTerms& terms, double beta) {
  const double inner = dpo_inner(terms, beta);
  // -log sigmoid(x) = log1p(exp(-x)), evaluated without overflow
  return inner >= 0.0 ? std::log1p(std::exp(-inner)) : -inner + std::log1p(std::exp(inner));
}

namespace {

/// mean((eps - z0) - v(diffuse(z0, eps, t)))^2 on the binding's tape.
Var branch_error(const Binding& params, const DenoiserConfig& config, const LatentVideo& z0, double t,
                 const LatentVideo& eps, const flow::ConditionBundle& cond) {
  ad::Tape& tape = *params.tape;
  const LatentVideo z_t = flow::diffuse(z0, eps, flow::Timestep(t));
  const Var v = denoiser_forward(params, config, video_var(tape, z_t), z_t.shape(), t, cond, false).velocity;
  return ad::mse(v, video_var(tape, flow::velocity_target(z0, eps)));
}

std::pair<double, double> reference_terms(const DenoiserParams& ref, const PreferencePair& pair, double t,
                                          const LatentVideo& eps) {
  ad::Tape tape;
  const Binding b = bind_params(tape, ref.tensors, false);
  return {branch_error(b, ref.config, pair.z_w, t, eps, pair.cond).item(),
          branch_error(b, ref.config, pair.z_l, t, eps, pair.cond).item()};
}

void check_pair(const PreferencePair& pair, const LatentVideo& eps) {
  require_same_shape(pair.z_w, pair.z_l, "dpo_loss");
  require_same_shape(pair.z_w, eps, "dpo_loss");
}

}  // namespace

DpoResult dpo_loss(const Binding& student, const DenoiserParams& reference, const PreferencePair& pair, double t,
                   const LatentVideo& eps, double beta) {
  check_pair(pair, eps);
  if (!(beta > 0.0)) throw ContractViolation("dpo: beta must be > 0");
  const auto [ref_w, ref_l] = reference_terms(reference, pair, t, eps);
  const Var s_w = branch_error(student, reference.config, pair.z_w, t, eps, pair.cond);
  const Var s_l = branch_error(student, reference.config, pair.z_l, t, eps, pair.cond);
  const Var inner = ad::scale(ad::add_scalar(ad::sub(s_w, s_l), -(ref_w - ref_l)), -0.5 * beta);
  const Var loss = ad::scale(ad::log_sigmoid(inner), -1.0);
  return DpoResult{loss, inner.item()};
}

LossGrad dpo_grad(const DenoiserParams& student, const DenoiserParams& reference, const PreferencePair& pair,
                  double t, const LatentVideo& eps, double beta, double* inner) {
  if (!(student.config == reference.config)) throw ContractViolation("dpo: student and reference configs differ");
  ad::Tape tape;
  const Binding b = bind_params(tape, student.tensors, true);
  const DpoResult r = dpo_loss(b, reference, pair, t, eps, beta);
  tape.backward(r.loss);
  if (inner) *inner = r.inner;
  return LossGrad{r.loss.item(), gradients(b)};
}

namespace {

DpoTerms terms_of(const DenoiserParams& student, const DenoiserParams& reference, const PreferencePair& pair,
                  double t, const LatentVideo& eps) {
  check_pair(pair, eps);
  const auto [s_w, s_l] = reference_terms(student, pair, t, eps);
  const auto [ref_w, ref_l] = reference_terms(reference, pair, t, eps);
  return DpoTerms{s_w, ref_w, s_l, ref_l};
}

}  // namespace

double mean_margin(const DenoiserParams& student, const DenoiserParams& reference,
                   const std::vector<PreferencePair>& pairs, const Stage3Config& cfg, std::uint64_t seed) {
  if (pairs.empty()) throw ContractViolation("mean_margin: no pairs");
  double acc = 0.0;
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    Rng rng(derive_seed(seed, {hash_name("stage3.margin"), k}));
    const double t = rng.uniform(cfg.t_min, cfg.t_max);
    const LatentVideo eps = rng.normal_video(pairs[k].z_w.shape());
    acc += dpo_inner(terms_of(student, reference, pairs[k], t, eps), cfg.beta);
  }
  return acc / static_cast<double>(pairs.size());
}

Stage3State make_stage3_state(const DenoiserParams& init, const Stage3Config& cfg) {
  cfg.validate();
  return Stage3State{init, init, Adam(AdamConfig{cfg.lr, cfg.beta1, cfg.beta2, 1e-8, cfg.clip_norm}), 0};
}

CsvLog stage3_log() { return CsvLog({"iteration", "phase", "loss", "inner", "grad_norm"}); }

void run_stage3(const Stage3Config& cfg, Stage3State& state, const std::vector<PreferencePair>& pairs,
                std::uint64_t seed, CsvLog* log, const ProgressHook& hook) {
  cfg.validate();
  if (pairs.empty()) throw ContractViolation("stage3: no preference pairs");
  const double inv_b = 1.0 / cfg.batch;
  while (state.iteration < cfg.iterations) {
    const long it = state.iteration;
    Rng rng = iteration_rng(seed, "stage3", it);
    ParamSet grads;
    double loss = 0.0, inner = 0.0;
    for (int b = 0; b < cfg.batch; ++b) {
      const PreferencePair& p = pairs[static_cast<std::size_t>(rng.integer(0, static_cast<int>(pairs.size()) - 1))];
      const double t = rng.uniform(cfg.t_min, cfg.t_max);
      const LatentVideo eps = rng.normal_video(p.z_w.shape());
      double in = 0.0;
      const LossGrad lg = dpo_grad(state.student, state.reference, p, t, eps, cfg.beta, &in);
      loss += inv_b * lg.loss;
      inner += inv_b * in;
      accumulate(grads, lg.grads, inv_b);
    }
    if (!std::isfinite(loss))
      throw DivergenceError("stage3", it, "stage3: non-finite loss at iteration " + std::to_string(it));
    const double gn = state.opt.step(state.student.tensors, grads);
    ++state.iteration;
    if (log) log->add({std::to_string(it), "dpo", fmt(loss), fmt(inner), fmt(gn)});
    if (hook && !hook(state.iteration)) return;
  }
}

// ---- persistence ------------------------------------------------------------------

namespace {

using nlohmann::json;

std::string blob_name(const char* prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%05zu.bin", prefix, i);
  return buf;
}

}  // namespace

void export_pairs(const std::vector<PreferencePair>& pairs, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json items = json::array();
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const PreferencePair& p = pairs[i];
    write_f64_blob(dir / blob_name("w", i), p.z_w.array().data(), static_cast<std::size_t>(p.z_w.numel()));
    write_f64_blob(dir / blob_name("l", i), p.z_l.array().data(), static_cast<std::size_t>(p.z_l.numel()));
    items.push_back({{"item", p.item},
                     {"cond_class", p.cond.cond_class},
                     {"is_null", p.cond.is_null},
                     {"score_w", p.score_w},
                     {"score_l", p.score_l},
                     {"w", blob_name("w", i)},
                     {"l", blob_name("l", i)}});
  }
  json shape = json::array();
  if (!pairs.empty()) {
    const VideoShape s = pairs.front().z_w.shape();
    shape = {s.frames, s.height, s.width, s.channels};
  }
  const json manifest{{"format", "vsrdistill-pairs"}, {"version", 1},    {"dtype", "float64"},
                      {"endianness", "little"},      {"shape", shape}, {"pairs", items}};
  std::ofstream out(dir / "manifest.json");
  if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(1) << "\n";
}

std::vector<PreferencePair> import_pairs(const std::filesystem::path& dir, const data::Dataset& ds) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("missing preference manifest in " + dir.string());
  std::vector<PreferencePair> pairs;
  try {
    const json m = json::parse(in);
    if (m.at("format") != "vsrdistill-pairs" || m.at("version") != 1)
      throw IoError("unsupported preference manifest in " + dir.string());
    for (const json& j : m.at("pairs")) {
      const Index item = j.at("item").get<Index>();
      if (item < 0 || item >= ds.size()) throw IoError("preference pair refers to a missing dataset item");
      const data::VideoPair& vp = ds.items[static_cast<std::size_t>(item)];
      const VideoShape s = vp.hr.shape();
      const auto n = static_cast<std::size_t>(s.numel());
      auto load = [&](const char* key) {
        const std::vector<double> v = read_f64_blob(dir / j.at(key).get<std::string>(), n);
        return LatentVideo(s, Eigen::Map<const Eigen::ArrayXd>(v.data(), static_cast<Index>(v.size())));
      };
      flow::ConditionBundle cond{vp.lr_up, j.at("cond_class").get<int>(), j.at("is_null").get<bool>()};
      pairs.push_back(PreferencePair{item, std::move(cond), load("w"), load("l"), j.at("score_w").get<double>(),
                                     j.at("score_l").get<double>()});
    }
  } catch (const json::exception& e) {
    throw IoError("malformed preference manifest: " + std::string(e.what()));
  }
  return pairs;
}

}  // namespace vsrd::dpo
