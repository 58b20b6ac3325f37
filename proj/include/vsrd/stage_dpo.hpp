#pragma once

// Preference fine-tuning of the one-step student: sample candidates per input,
// rank them with a proxy quality score, keep best/worst as a pair, and train
// with a pairwise objective relative to a frozen reference copy.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include "vsrd/denoiser.hpp"
#include "vsrd/optim.hpp"
#include "vsrd/synthdata.hpp"
#include "vsrd/training.hpp"

namespace vsrd::dpo {

struct ScorerWeights {
  double fidelity = 1.0;  // -MSE against the HR reference
  double detail = 0.5;    // HF energy relative to the degraded input
  double temporal = 0.5;  // -warp error under ground-truth flow
};

struct Stage3Config {
  int candidates = 5;
  int pairs_total = 200;
  double beta = 500.0;
  int iterations = 150;
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double clip_norm = 1.0;
  int batch = 2;
  double t_min = 0.2;
  double t_max = 1.0;
  ScorerWeights weights;
  void validate() const;
};

struct PreferencePair {
  Index item = 0;  // dataset index of the source clip
  flow::ConditionBundle cond;
  LatentVideo z_w;
  LatentVideo z_l;
  double score_w = 0.0;
  double score_l = 0.0;
};

/// k one-step outputs from noise draws derived from (seed, i).
std::vector<LatentVideo> generate_candidates(const DenoiserParams& student, const flow::ConditionBundle& cond, int k,
                                             std::uint64_t seed);

/// Optional references for the proxy score: HR clip and ground-truth motion.
struct ScoreContext {
  const LatentVideo* hr = nullptr;
  const data::SceneSpec* scene = nullptr;
};

/// Higher is better. Terms without a reference are skipped.
double quality_score(const LatentVideo& candidate, const flow::ConditionBundle& cond, const ScoreContext& ctx,
                     const ScorerWeights& w);

/// Index of the best and worst score; ties go to the lowest index.
std::pair<std::size_t, std::size_t> best_and_worst(const std::vector<double>& scores);

/// One pair per selected training item; items whose best and worst scores tie are skipped.
std::vector<PreferencePair> build_preference_dataset(const DenoiserParams& student, const data::Dataset& ds,
                                                     const Stage3Config& cfg, std::uint64_t seed,
                                                     std::size_t* skipped = nullptr);

/// The four squared errors entering the objective.
struct DpoTerms {
  double s_w, ref_w, s_l, ref_l;
};

/// inner = -(beta / 2) [(s_w - ref_w) - (s_l - ref_l)].
double dpo_inner(const DpoTerms& terms, double beta);
/// -log sigmoid(inner).
double dpo_loss(const DpoTerms& terms, double beta);

struct DpoResult {
  ad::Var loss;
  double inner = 0.0;
};

/// Taped objective for one pair with shared (t, eps) on both branches.
DpoResult dpo_loss(const Binding& student, const DenoiserParams& reference, const PreferencePair& pair, double t,
                   const LatentVideo& eps, double beta);
LossGrad dpo_grad(const DenoiserParams& student, const DenoiserParams& reference, const PreferencePair& pair,
                  double t, const LatentVideo& eps, double beta, double* inner = nullptr);

/// Mean inner margin over all pairs at (t, eps) draws fixed by `seed`.
double mean_margin(const DenoiserParams& student, const DenoiserParams& reference,
                   const std::vector<PreferencePair>& pairs, const Stage3Config& cfg, std::uint64_t seed);

struct Stage3State {
  DenoiserParams student;
  DenoiserParams reference;  // frozen
  Adam opt;
  long iteration = 0;
};

Stage3State make_stage3_state(const DenoiserParams& init, const Stage3Config& cfg);

/// Columns: iteration, phase, loss, inner, grad_norm.
CsvLog stage3_log();

void run_stage3(const Stage3Config& cfg, Stage3State& state, const std::vector<PreferencePair>& pairs,
                std::uint64_t seed, CsvLog* log = nullptr, const ProgressHook& hook = {});

/// Pairs directory: manifest.json plus w_NNNNN.bin / l_NNNNN.bin.
void export_pairs(const std::vector<PreferencePair>& pairs, const std::filesystem::path& dir);
std::vector<PreferencePair> import_pairs(const std::filesystem::path& dir, const data::Dataset& ds);

}  // namespace vsrd::dpo
