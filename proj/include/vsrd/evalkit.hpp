#pragma once

// Image/video metrics, the one-dimensional Gaussian oracle for the score and
// distribution-matching gradients, training-dynamics summaries and plain
// raster plots.

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "vsrd/synthdata.hpp"
#include "vsrd/video.hpp"

namespace vsrd::eval {

inline constexpr double kPsnrCap = 100.0;
inline constexpr double kWarpScale = 1e3;

/// 10 log10(peak^2 / MSE); identical inputs give kPsnrCap.
double psnr(const LatentVideo& a, const LatentVideo& b, double peak = 1.0);

struct SsimParams {
  int window = 7;  // uniform window edge
  double k1 = 0.01;
  double k2 = 0.03;
  double peak = 1.0;
};

/// Mean local SSIM over every frame, channel and fully inside window position.
double ssim(const LatentVideo& a, const LatentVideo& b, const SsimParams& p = {});

/// Mean squared difference between frame k and frame k + 1 warped back by
/// `flow`, over pixels with mask = 1 and all channels, times kWarpScale.
double warp_error_gt(const LatentVideo& video, const data::FlowField& flow, const LatentVideo& mask);

enum class ProfileAxis { Row, Column };

/// Pixel line `index` of every frame stacked into a (1, frames, length, channels) image.
LatentVideo temporal_profile(const LatentVideo& video, Index index, ProfileAxis axis = ProfileAxis::Row);

// ---- Gaussian oracle -------------------------------------------------------------

/// One-dimensional setting: data ~ N(0, 1); student sample x0 = mu + sigma * e.
struct OracleConfig {
  std::uint64_t seed = 7;
  int score_grid = 201;
  std::vector<double> score_times{0.05, 0.25, 0.5, 0.75, 1.0};
  Index mc_samples = 100000;
  /// (mu, sigma, t) test points for the gradient estimator.
  std::vector<std::array<double, 3>> points{{1.0, 1.0, 0.5},  {0.5, 0.7, 0.3}, {-0.8, 1.5, 0.5},
                                            {0.3, 0.5, 0.7},  {1.5, 2.0, 0.2}, {-1.2, 0.8, 0.8},
                                            {2.0, 1.0, 0.9}};
  int flow_steps = 500;
  double flow_lr = 0.1;
  Index flow_samples = 20000;
  double flow_mu0 = 2.0;
  double flow_sigma0 = 0.4;

  double tol_score = 1e-4;
  double tol_mc = 0.05;
  double tol_cosine = 0.99;
  double tol_flow = 0.05;
};

/// Optimal velocity E[eps - x0 | z_t] for data N(m, s^2), closed form.
double gaussian_velocity(double z, double t, double m, double s);
/// The same posterior expectation by trapezoid quadrature over x0.
double gaussian_velocity_quadrature(double z, double t, double m, double s);
/// Score of the diffused marginal N((1-t) m, (1-t)^2 s^2 + t^2).
double gaussian_marginal_score(double z, double t, double m, double s);

/// KL(student_t || data_t) by quadrature on a fixed grid.
double gaussian_kl_quadrature(double mu, double sigma, double t);
/// d KL / d(mu, sigma) by central differences of the quadrature KL.
Eigen::Vector2d gaussian_kl_gradient(double mu, double sigma, double t);

/// Monte-Carlo estimate of E[-(s_real - s_fake) dz_t/d(mu, sigma)] with exact scores.
Eigen::Vector2d dmd_estimator(double mu, double sigma, double t, Index samples, std::uint64_t seed);
/// The normalized distribution-matching direction: parameter gradient of the
/// mean-squared surrogate over one latent whose elements are the draws.
Eigen::Vector2d normalized_dmd_direction(double mu, double sigma, double t, Index samples, std::uint64_t seed,
                                         double guard = 1e-6);

struct OraclePoint {
  double mu = 0.0, sigma = 0.0, t = 0.0;
  Eigen::Vector2d oracle = Eigen::Vector2d::Zero();
  Eigen::Vector2d estimate = Eigen::Vector2d::Zero();
  double rel_error = 0.0;
  double cosine = 0.0;  // normalized direction vs oracle
};

struct OracleReport {
  double score_max_rel_error = 0.0;
  std::vector<OraclePoint> points;
  double max_mc_rel_error = 0.0;
  double min_cosine = 1.0;
  double final_mu = 0.0;
  double final_sigma = 0.0;
  bool score_ok = false;
  bool mc_ok = false;
  bool cosine_ok = false;
  bool flow_ok = false;
  bool passed() const { return score_ok && mc_ok && cosine_ok && flow_ok; }
  std::string summary() const;
};

OracleReport gaussian_oracle_bench(const OracleConfig& cfg = {});

// ---- training dynamics -------------------------------------------------------------

struct TraceStats {
  double mean = 0.0;
  double variance = 0.0;
  double median = 0.0;
  double max = 0.0;
  double max_over_median = 0.0;
};

TraceStats trace_stats(const std::vector<double>& trace);

struct StabilityReport {
  TraceStats a;
  TraceStats b;
  std::string label_a;
  std::string label_b;
  std::string table() const;
};

/// Gradient-norm statistics of two traces. Reported, never asserted.
StabilityReport stability_diagnostic(const std::vector<double>& trace_a, const std::vector<double>& trace_b,
                                     std::string label_a = "A", std::string label_b = "B");

// ---- model evaluation ------------------------------------------------------------

struct ItemMetrics {
  Index item = 0;
  double psnr = 0.0;
  double ssim = 0.0;
  double warp = 0.0;
  double hf_ratio = 0.0;
};

struct MetricsReport {
  std::string model;
  std::string stage;
  std::uint64_t seed = 0;
  std::vector<ItemMetrics> items;
  ItemMetrics mean;  // item = -1

  /// Header comments, column names, one row per item, then the mean row.
  std::string to_csv() const;
};

/// Produces a reconstruction for dataset item `index`.
using Sampler = std::function<LatentVideo(const data::VideoPair& item, Index index)>;

MetricsReport evaluate_model(const Sampler& sampler, const data::Dataset& ds, data::Split split,
                             const std::string& model, const std::string& stage, std::uint64_t seed);

// ---- plots ------------------------------------------------------------------------

/// Binary PPM; values are clamped to [0, 1]. `image` is (1, H, W, 1 or 3).
void write_ppm(const std::filesystem::path& path, const LatentVideo& image);

struct Series {
  std::string name;
  std::vector<double> y;
};

/// Line chart of all series on shared axes, optionally on a log10 y axis.
LatentVideo line_plot(const std::vector<Series>& series, Index height = 240, Index width = 400, bool log_y = false);
LatentVideo bar_plot(const std::vector<double>& values, Index height = 240, Index width = 400);

/// Reads CSV logs with a header row and numeric columns.
std::map<std::string, std::vector<double>> read_csv_columns(const std::filesystem::path& path);

/// Writes loss / gradient-norm curves for every log and per-metric bars across
/// reports into `out_dir`. Returns the written files.
std::vector<std::filesystem::path> emit_plots(const std::map<std::string, std::filesystem::path>& logs,
                                              const std::vector<MetricsReport>& reports,
                                              const std::filesystem::path& out_dir);

}  // namespace vsrd::eval
