#include "vsrd/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include "vsrd/blob.hpp"
#include "vsrd/flowcore.hpp"
#include "vsrd/rng.hpp"
#include "vsrd/stage_dual.hpp"
#include "vsrd/training.hpp"

namespace vsrd::eval {

// ---- metrics ----------------------------------------------------------------------

double psnr(const LatentVideo& a, const LatentVideo& b, double peak) {
  require_same_shape(a, b, "psnr");
  if (!(peak > 0.0)) throw ContractViolation("psnr: peak must be > 0");
  const double mse = (a.array() - b.array()).square().mean();
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / mse));
}

double ssim(const LatentVideo& a, const LatentVideo& b, const SsimParams& p) {
  require_same_shape(a, b, "ssim");
  const VideoShape s = a.shape();
  const int w = p.window;
  if (w < 1 || s.height < w || s.width < w) throw ContractViolation("ssim: window larger than the frame");
  const double c1 = (p.k1 * p.peak) * (p.k1 * p.peak);
  const double c2 = (p.k2 * p.peak) * (p.k2 * p.peak);
  const double n = static_cast<double>(w) * w;
  double acc = 0.0;
  Index count = 0;
  for (Index t = 0; t < s.frames; ++t)
    for (Index c = 0; c < s.channels; ++c)
      for (Index y = 0; y + w <= s.height; ++y)
        for (Index x = 0; x + w <= s.width; ++x) {
          double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
          for (Index dy = 0; dy < w; ++dy)
            for (Index dx = 0; dx < w; ++dx) {
              const double va = a(t, y + dy, x + dx, c);
              const double vb = b(t, y + dy, x + dx, c);
              sa += va;
              sb += vb;
              saa += va * va;
              sbb += vb * vb;
              sab += va * vb;
            }
          const double ma = sa / n, mb = sb / n;
          const double va = saa / n - ma * ma, vb = sbb / n - mb * mb, cov = sab / n - ma * mb;
          acc += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
          ++count;
        }
  return acc / static_cast<double>(count);
}

double warp_error_gt(const LatentVideo& video, const data::FlowField& flow, const LatentVideo& mask) {
  const VideoShape s = video.shape();
  if (s.frames < 2) throw ContractViolation("warp_error_gt: need at least two frames");
  if (!(flow.shape() == VideoShape{s.frames - 1, s.height, s.width, 2}))
    throw ContractViolation("warp_error_gt: flow shape does not match the video");
  if (!(mask.shape() == VideoShape{s.frames - 1, s.height, s.width, 1}))
    throw ContractViolation("warp_error_gt: mask shape does not match the video");
  const LatentVideo warped = data::warp_to_previous(video, flow);
  double acc = 0.0, weight = 0.0;
  for (Index k = 0; k + 1 < s.frames; ++k)
    for (Index y = 0; y < s.height; ++y)
      for (Index x = 0; x < s.width; ++x) {
        const double m = mask(k, y, x, 0);
        if (m == 0.0) continue;
        for (Index c = 0; c < s.channels; ++c) {
          const double d = video(k, y, x, c) - warped(k, y, x, c);
          acc += m * d * d;
        }
        weight += m * static_cast<double>(s.channels);
      }
  return weight > 0.0 ? kWarpScale * acc / weight : 0.0;
}

LatentVideo temporal_profile(const LatentVideo& video, Index index, ProfileAxis axis) {
  const VideoShape s = video.shape();
  const bool row = axis == ProfileAxis::Row;
  const Index lines = row ? s.height : s.width;
  const Index length = row ? s.width : s.height;
  if (index < 0 || index >= lines) throw ContractViolation("temporal_profile: line index out of range");
  LatentVideo out(VideoShape{1, s.frames, length, s.channels});
  for (Index k = 0; k < s.frames; ++k)
    for (Index i = 0; i < length; ++i)
      for (Index c = 0; c < s.channels; ++c) out(0, k, i, c) = row ? video(k, index, i, c) : video(k, i, index, c);
  return out;
}

// ---- Gaussian oracle -----------------------------------------------------------------

namespace {

void check_oracle_args(double t, double s, const char* what) {
  if (!(t > 0.0 && t <= 1.0)) throw DomainError(std::string(what) + ": t must be in (0, 1]");
  if (!(s > 0.0)) throw ContractViolation(std::string(what) + ": standard deviation must be > 0");
}

double velocity_to_score(double z, double v, double t) {
  Eigen::Array<double, 1, 1> za, va;
  za << z;
  va << v;
  return flow::score_from_velocity(za, va, t)(0);
}

/// Scores of the student and data marginals at the draws `z`, both recovered from optimal velocities.
Eigen::ArrayXd scores(const Eigen::ArrayXd& z, double t, double m, double s) {
  Eigen::ArrayXd v(z.size());
  for (Index i = 0; i < z.size(); ++i) v[i] = gaussian_velocity(z[i], t, m, s);
  return flow::score_from_velocity(z, v, t);
}

double norm_pdf_log(double x, double mean, double var) {
  return -0.5 * (x - mean) * (x - mean) / var - 0.5 * std::log(2.0 * std::numbers::pi * var);
}

}  // namespace

double gaussian_velocity(double z, double t, double m, double s) {
  check_oracle_args(t, s, "gaussian_velocity");
  const double a = 1.0 - t, b = t;
  const double var = a * a * s * s + b * b;
  return (b - a * s * s) * (z - a * m) / var - m;
}

double gaussian_velocity_quadrature(double z, double t, double m, double s) {
  check_oracle_args(t, s, "gaussian_velocity_quadrature");
  const double a = 1.0 - t, b = t;
  constexpr int n = 24001;
  const double lo = m - 12.0 * s, h = 24.0 * s / (n - 1);
  Eigen::ArrayXd x = Eigen::ArrayXd::LinSpaced(n, lo, lo + h * (n - 1));
  Eigen::ArrayXd logw = -0.5 * ((x - m) / s).square() - 0.5 * ((z - a * x) / b).square();
  Eigen::ArrayXd w = (logw - logw.maxCoeff()).exp();
  w[0] *= 0.5;
  w[n - 1] *= 0.5;
  const double norm = w.sum();
  if (!(norm > 0.0) || !std::isfinite(norm)) throw DomainError("gaussian_velocity_quadrature: integration failed");
  const double e_x0 = (w * x).sum() / norm;
  const double e_eps = (w * (z - a * x) / b).sum() / norm;
  return e_eps - e_x0;
}

double gaussian_marginal_score(double z, double t, double m, double s) {
  check_oracle_args(t, s, "gaussian_marginal_score");
  const double a = 1.0 - t;
  return -(z - a * m) / (a * a * s * s + t * t);
}

double gaussian_kl_quadrature(double mu, double sigma, double t) {
  check_oracle_args(t, sigma, "gaussian_kl_quadrature");
  const double a = 1.0 - t;
  const double m1 = a * mu, v1 = a * a * sigma * sigma + t * t;
  const double v0 = a * a + t * t;
  constexpr int n = 4001;
  const double sd = std::sqrt(v1);
  const double lo = m1 - 12.0 * sd, h = 24.0 * sd / (n - 1);
  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    const double z = lo + h * i;
    const double lp = norm_pdf_log(z, m1, v1);
    const double term = std::exp(lp) * (lp - norm_pdf_log(z, 0.0, v0));
    acc += (i == 0 || i == n - 1) ? 0.5 * term : term;
  }
  return acc * h;
}

Eigen::Vector2d gaussian_kl_gradient(double mu, double sigma, double t) {
  constexpr double h = 1e-5;
  return {(gaussian_kl_quadrature(mu + h, sigma, t) - gaussian_kl_quadrature(mu - h, sigma, t)) / (2 * h),
          (gaussian_kl_quadrature(mu, sigma + h, t) - gaussian_kl_quadrature(mu, sigma - h, t)) / (2 * h)};
}

Eigen::Vector2d dmd_estimator(double mu, double sigma, double t, Index samples, std::uint64_t seed) {
  check_oracle_args(t, sigma, "dmd_estimator");
  if (samples < 1) throw ContractViolation("dmd_estimator: samples must be >= 1");
  Rng rng(seed);
  const Eigen::ArrayXd e0 = rng.normal_array(samples);
  const Eigen::ArrayXd e1 = rng.normal_array(samples);
  const double a = 1.0 - t;
  const Eigen::ArrayXd z = a * (mu + sigma * e0) + t * e1;
  const Eigen::ArrayXd diff = scores(z, t, mu, sigma) - scores(z, t, 0.0, 1.0);
  return {(diff * a).mean(), (diff * a * e0).mean()};
}

Eigen::Vector2d normalized_dmd_direction(double mu, double sigma, double t, Index samples, std::uint64_t seed,
                                         double guard) {
  check_oracle_args(t, sigma, "normalized_dmd_direction");
  if (samples < 1) throw ContractViolation("normalized_dmd_direction: samples must be >= 1");
  Rng rng(seed);
  const Eigen::ArrayXd e0 = rng.normal_array(samples);
  const Eigen::ArrayXd e1 = rng.normal_array(samples);
  const VideoShape shape{1, 1, samples, 1};
  const LatentVideo z0_s(shape, mu + sigma * e0);
  const LatentVideo z_t = flow::diffuse(z0_s, LatentVideo(shape, e1), flow::Timestep(t));
  LatentVideo v_f(shape), v_r(shape);
  for (Index i = 0; i < samples; ++i) {
    v_f.array()[i] = gaussian_velocity(z_t.array()[i], t, mu, sigma);
    v_r.array()[i] = gaussian_velocity(z_t.array()[i], t, 0.0, 1.0);
  }
  const LatentVideo z0_f = flow::predict_clean(z_t, v_f, flow::Timestep(t));
  const LatentVideo z0_r = flow::predict_clean(z_t, v_r, flow::Timestep(t));
  const LatentVideo g = dual::dmd_grad(z0_s, z0_f, z0_r, guard);
  return {2.0 * g.array().mean(), 2.0 * (g.array() * e0).mean()};
}

std::string OracleReport::summary() const {
  std::ostringstream os;
  os << std::setprecision(6);
  os << "score identity: max rel error " << score_max_rel_error << (score_ok ? "  PASS" : "  FAIL") << '\n';
  os << "distribution-matching estimator vs integrated KL gradient:\n";
  os << "  mu      sigma   t      oracle(mu, sigma)            estimate(mu, sigma)          rel_err    cosine\n";
  for (const OraclePoint& p : points) {
    char line[256];
    std::snprintf(line, sizeof line, "  %-7.3g %-7.3g %-6.3g (%+.5e, %+.5e) (%+.5e, %+.5e) %.3e  %.6f\n", p.mu,
                  p.sigma, p.t, p.oracle[0], p.oracle[1], p.estimate[0], p.estimate[1], p.rel_error, p.cosine);
    os << line;
  }
  os << "  max rel error " << max_mc_rel_error << (mc_ok ? "  PASS" : "  FAIL") << '\n';
  os << "  min cosine of normalized direction " << min_cosine << (cosine_ok ? "  PASS" : "  FAIL") << '\n';
  os << "gradient flow: final mu " << final_mu << ", sigma " << final_sigma << (flow_ok ? "  PASS" : "  FAIL")
     << '\n';
  os << (passed() ? "oracle bench: PASS" : "oracle bench: FAIL") << '\n';
  return os.str();
}

OracleReport gaussian_oracle_bench(const OracleConfig& cfg) {
  if (cfg.score_grid < 2 || cfg.points.empty() || cfg.mc_samples < 1 || cfg.flow_samples < 1)
    throw ContractViolation("gaussian_oracle_bench: invalid configuration");
  OracleReport rep;

  // score identity on data N(0.7, 0.6^2)
  constexpr double m = 0.7, s = 0.6;
  for (double t : cfg.score_times) {
    const double a = 1.0 - t;
    const double sd = std::sqrt(a * a * s * s + t * t);
    for (int i = 0; i < cfg.score_grid; ++i) {
      const double z = a * m + sd * (-4.0 + 8.0 * i / (cfg.score_grid - 1));
      const double exact = gaussian_marginal_score(z, t, m, s);
      const double denom = std::max(std::abs(exact), 1e-6);
      for (double v : {gaussian_velocity(z, t, m, s), gaussian_velocity_quadrature(z, t, m, s)}) {
        const double err = std::abs(velocity_to_score(z, v, t) - exact) / denom;
        if (!std::isfinite(err)) throw DomainError("gaussian_oracle_bench: non-finite score error");
        rep.score_max_rel_error = std::max(rep.score_max_rel_error, err);
      }
    }
  }
  rep.score_ok = rep.score_max_rel_error < cfg.tol_score;

  for (std::size_t k = 0; k < cfg.points.size(); ++k) {
    const auto [mu, sigma, t] = cfg.points[k];
    OraclePoint p{mu, sigma, t};
    p.oracle = gaussian_kl_gradient(mu, sigma, t);
    p.estimate = dmd_estimator(mu, sigma, t, cfg.mc_samples, derive_seed(cfg.seed, {1, k}));
    p.rel_error = (p.estimate - p.oracle).norm() / p.oracle.norm();
    const Eigen::Vector2d d = normalized_dmd_direction(mu, sigma, t, cfg.mc_samples, derive_seed(cfg.seed, {2, k}));
    p.cosine = d.dot(p.oracle) / (d.norm() * p.oracle.norm());
    rep.max_mc_rel_error = std::max(rep.max_mc_rel_error, p.rel_error);
    rep.min_cosine = std::min(rep.min_cosine, p.cosine);
    rep.points.push_back(p);
  }
  rep.mc_ok = rep.max_mc_rel_error < cfg.tol_mc;
  rep.cosine_ok = rep.min_cosine > cfg.tol_cosine;

  double mu = cfg.flow_mu0, sigma = cfg.flow_sigma0;
  Rng trng(derive_seed(cfg.seed, {3}));
  for (int step = 0; step < cfg.flow_steps; ++step) {
    const double t = trng.uniform(0.2, 0.98);
    const Eigen::Vector2d d = normalized_dmd_direction(mu, sigma, t, cfg.flow_samples,
                                                       derive_seed(cfg.seed, {4, static_cast<std::uint64_t>(step)}));
    mu -= cfg.flow_lr * d[0];
    sigma = std::max(1e-3, sigma - cfg.flow_lr * d[1]);
  }
  rep.final_mu = mu;
  rep.final_sigma = sigma;
  rep.flow_ok = std::abs(mu) < cfg.tol_flow && std::abs(sigma - 1.0) < cfg.tol_flow;
  return rep;
}

// ---- training dynamics -----------------------------------------------------------------

TraceStats trace_stats(const std::vector<double>& trace) {
  std::vector<double> v;
  for (double x : trace)
    if (std::isfinite(x)) v.push_back(x);
  if (v.empty()) throw ContractViolation("trace_stats: empty trace");
  TraceStats st;
  const double n = static_cast<double>(v.size());
  for (double x : v) st.mean += x / n;
  for (double x : v) st.variance += (x - st.mean) * (x - st.mean) / n;
  st.max = *std::max_element(v.begin(), v.end());
  std::vector<double> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t h = sorted.size() / 2;
  st.median = sorted.size() % 2 ? sorted[h] : 0.5 * (sorted[h - 1] + sorted[h]);
  st.max_over_median = st.median != 0.0 ? st.max / st.median : (st.max > 0.0 ? INFINITY : 1.0);
  return st;
}

std::string StabilityReport::table() const {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "%-24s %14s %14s %14s %14s %14s\n", "run", "mean", "variance", "median", "max",
                "max/median");
  os << line;
  for (const auto& [label, s] : {std::pair{label_a, a}, std::pair{label_b, b}}) {
    std::snprintf(line, sizeof line, "%-24s %14.6g %14.6g %14.6g %14.6g %14.6g\n", label.c_str(), s.mean,
                  s.variance, s.median, s.max, s.max_over_median);
    os << line;
  }
  return os.str();
}

StabilityReport stability_diagnostic(const std::vector<double>& trace_a, const std::vector<double>& trace_b,
                                     std::string label_a, std::string label_b) {
  return StabilityReport{trace_stats(trace_a), trace_stats(trace_b), std::move(label_a), std::move(label_b)};
}

// ---- model evaluation ---------------------------------------------------------------------

std::string MetricsReport::to_csv() const {
  std::ostringstream os;
  os << "# model=" << model << " stage=" << stage << " seed=" << seed << '\n';
  os << "# outputs clamped to [0,1]; warp = ground-truth-flow warping error x1e3, not comparable to "
        "estimated-flow values\n";
  os << "# hf_ratio = HF energy of the output over that of the degraded input (no-reference proxy)\n";
  os << "item,psnr,ssim,warp,hf_ratio\n";
  auto row = [&](const std::string& id, const ItemMetrics& m) {
    os << id << ',' << fmt(m.psnr) << ',' << fmt(m.ssim) << ',' << fmt(m.warp) << ',' << fmt(m.hf_ratio) << '\n';
  };
  for (const ItemMetrics& m : items) row(std::to_string(m.item), m);
  row("mean", mean);
  return os.str();
}

MetricsReport evaluate_model(const Sampler& sampler, const data::Dataset& ds, data::Split split,
                             const std::string& model, const std::string& stage, std::uint64_t seed) {
  MetricsReport rep{model, stage, seed, {}, {}};
  rep.mean.item = -1;
  const std::vector<Index> idx = ds.indices(split);
  if (idx.empty()) throw ContractViolation(std::string("evaluate_model: split '") + to_string(split) + "' is empty");
  for (Index i : idx) {
    const data::VideoPair& item = ds.items.at(static_cast<std::size_t>(i));
    LatentVideo out = sampler(item, i);
    require_same_shape(out, item.hr, "evaluate_model");
    out.array() = out.array().max(0.0).min(1.0);
    ItemMetrics m;
    m.item = i;
    m.psnr = psnr(out, item.hr);
    m.ssim = ssim(out, item.hr);
    m.warp = warp_error_gt(out, data::gt_flow(item.scene), data::visibility_mask(item.scene));
    m.hf_ratio = data::hf_energy(out) / std::max(data::hf_energy(item.lr_up), 1e-12);
    rep.items.push_back(m);
  }
  const double n = static_cast<double>(rep.items.size());
  for (const ItemMetrics& m : rep.items) {
    rep.mean.psnr += m.psnr / n;
    rep.mean.ssim += m.ssim / n;
    rep.mean.warp += m.warp / n;
    rep.mean.hf_ratio += m.hf_ratio / n;
  }
  return rep;
}

// ---- plots ------------------------------------------------------------------------------------

void write_ppm(const std::filesystem::path& path, const LatentVideo& image) {
  const VideoShape s = image.shape();
  if (s.frames != 1 || (s.channels != 1 && s.channels != 3))
    throw ContractViolation("write_ppm: image must be (1, H, W, 1 or 3)");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f << "P6\n" << s.width << ' ' << s.height << "\n255\n";
  for (Index y = 0; y < s.height; ++y)
    for (Index x = 0; x < s.width; ++x)
      for (Index c = 0; c < 3; ++c) {
        const double v = image(0, y, x, s.channels == 3 ? c : 0);
        const double clamped = std::isfinite(v) ? std::clamp(v, 0.0, 1.0) : 0.0;
        f.put(static_cast<char>(static_cast<unsigned char>(std::lround(clamped * 255.0))));
      }
  if (!f) throw IoError("write failed: " + path.string());
}

namespace {

constexpr double kPalette[][3] = {{0.12, 0.47, 0.71}, {1.0, 0.5, 0.05}, {0.17, 0.63, 0.17},
                                  {0.84, 0.15, 0.16}, {0.58, 0.4, 0.74}, {0.55, 0.34, 0.29}};

struct Canvas {
  LatentVideo img;
  Index h, w;
  Canvas(Index h_, Index w_) : img(LatentVideo::Constant({1, h_, w_, 3}, 1.0)), h(h_), w(w_) {}
  void put(Index x, Index y, const double* rgb) {
    if (x < 0 || y < 0 || x >= w || y >= h) return;
    for (Index c = 0; c < 3; ++c) img(0, y, x, c) = rgb[c];
  }
  void line(Index x0, Index y0, Index x1, Index y1, const double* rgb) {
    const Index dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    const Index sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    Index err = dx + dy;
    while (true) {
      put(x0, y0, rgb);
      if (x0 == x1 && y0 == y1) return;
      const Index e2 = 2 * err;
      if (e2 >= dy) {
        err += dy;
        x0 += sx;
      }
      if (e2 <= dx) {
        err += dx;
        y0 += sy;
      }
    }
  }
  void axes(Index margin) {
    static constexpr double black[3] = {0, 0, 0};
    line(margin, h - margin, w - margin, h - margin, black);
    line(margin, margin, margin, h - margin, black);
  }
};

constexpr Index kMargin = 16;

}  // namespace

LatentVideo line_plot(const std::vector<Series>& series, Index height, Index width, bool log_y) {
  if (height <= 2 * kMargin || width <= 2 * kMargin) throw ContractViolation("line_plot: canvas too small");
  Canvas cv(height, width);
  cv.axes(kMargin);
  auto tr = [&](double y) { return log_y ? (y > 0.0 ? std::log10(y) : NAN) : y; };
  double lo = INFINITY, hi = -INFINITY;
  std::size_t n_max = 0;
  for (const Series& s : series) {
    n_max = std::max(n_max, s.y.size());
    for (double y : s.y)
      if (const double v = tr(y); std::isfinite(v)) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
  }
  if (!std::isfinite(lo)) return cv.img;
  if (hi == lo) {
    hi += 0.5;
    lo -= 0.5;
  }
  const double pw = static_cast<double>(width - 2 * kMargin), ph = static_cast<double>(height - 2 * kMargin);
  for (std::size_t k = 0; k < series.size(); ++k) {
    const double* rgb = kPalette[k % std::size(kPalette)];
    Index px = -1, py = -1;
    for (std::size_t i = 0; i < series[k].y.size(); ++i) {
      const double v = tr(series[k].y[i]);
      if (!std::isfinite(v)) continue;
      const Index x = kMargin + std::lround(n_max > 1 ? pw * static_cast<double>(i) / (n_max - 1) : 0.0);
      const Index y = height - kMargin - std::lround(ph * (v - lo) / (hi - lo));
      if (px >= 0) cv.line(px, py, x, y, rgb);
      else cv.put(x, y, rgb);
      px = x;
      py = y;
    }
  }
  return cv.img;
}

LatentVideo bar_plot(const std::vector<double>& values, Index height, Index width) {
  if (height <= 2 * kMargin || width <= 2 * kMargin) throw ContractViolation("bar_plot: canvas too small");
  Canvas cv(height, width);
  cv.axes(kMargin);
  if (values.empty()) return cv.img;
  double hi = 0.0, lo = 0.0;
  for (double v : values)
    if (std::isfinite(v)) {
      hi = std::max(hi, v);
      lo = std::min(lo, v);
    }
  if (hi == lo) hi = lo + 1.0;
  const double pw = static_cast<double>(width - 2 * kMargin), ph = static_cast<double>(height - 2 * kMargin);
  const double slot = pw / static_cast<double>(values.size());
  const Index zero_y = height - kMargin - std::lround(ph * (0.0 - lo) / (hi - lo));
  for (std::size_t k = 0; k < values.size(); ++k) {
    if (!std::isfinite(values[k])) continue;
    const double* rgb = kPalette[k % std::size(kPalette)];
    const Index x0 = kMargin + std::lround(slot * k + 0.15 * slot);
    const Index x1 = kMargin + std::lround(slot * (k + 1) - 0.15 * slot);
    const Index y = height - kMargin - std::lround(ph * (values[k] - lo) / (hi - lo));
    for (Index x = x0; x <= x1; ++x) cv.line(x, std::min(y, zero_y), x, std::max(y, zero_y), rgb);
  }
  return cv.img;
}

std::map<std::string, std::vector<double>> read_csv_columns(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path.string());
  std::string line;
  std::vector<std::string> names;
  std::map<std::string, std::vector<double>> cols;
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!s.empty() && s.back() == ',') out.emplace_back();
    return out;
  };
  while (std::getline(f, line)) {
    if (line.empty() || line[0] == '#') continue;
    const std::vector<std::string> cells = split(line);
    if (names.empty()) {
      names = cells;
      for (const auto& n : names) cols[n];
      continue;
    }
    for (std::size_t i = 0; i < names.size(); ++i) {
      double v = NAN;
      if (i < cells.size() && !cells[i].empty()) {
        char* end = nullptr;
        const double parsed = std::strtod(cells[i].c_str(), &end);
        if (end && *end == '\0') v = parsed;
      }
      cols[names[i]].push_back(v);
    }
  }
  if (names.empty()) throw IoError("no header row in " + path.string());
  return cols;
}

std::vector<std::filesystem::path> emit_plots(const std::map<std::string, std::filesystem::path>& logs,
                                              const std::vector<MetricsReport>& reports,
                                              const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  std::vector<std::filesystem::path> written;
  static const char* kCurves[] = {"loss", "grad_norm", "student_grad_norm", "l_diff", "l_d",
                                  "l_dmd", "l_g",       "l_fm",              "inner"};
  for (const auto& [name, path] : logs) {
    if (!std::filesystem::exists(path)) throw IoError("missing log " + path.string());
    const auto cols = read_csv_columns(path);
    for (const char* c : kCurves) {
      const auto it = cols.find(c);
      if (it == cols.end()) continue;
      if (std::none_of(it->second.begin(), it->second.end(), [](double v) { return std::isfinite(v); })) continue;
      const bool log_y = std::string(c).find("grad_norm") != std::string::npos;
      const auto p = out_dir / (name + "_" + c + ".ppm");
      write_ppm(p, line_plot({{c, it->second}}, 240, 400, log_y));
      written.push_back(p);
    }
  }
  if (!reports.empty()) {
    const std::pair<const char*, double ItemMetrics::*> metrics[] = {
        {"psnr", &ItemMetrics::psnr}, {"ssim", &ItemMetrics::ssim}, {"warp", &ItemMetrics::warp},
        {"hf_ratio", &ItemMetrics::hf_ratio}};
    for (const auto& [mname, field] : metrics) {
      std::vector<double> vals;
      for (const MetricsReport& r : reports) vals.push_back(r.mean.*field);
      const auto p = out_dir / (std::string("metrics_") + mname + ".ppm");
      write_ppm(p, bar_plot(vals));
      written.push_back(p);
    }
  }
  return written;
}

}  // namespace vsrd::eval
