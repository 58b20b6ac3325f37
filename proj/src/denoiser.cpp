#include "vsrd/denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>

#include "vsrd/rng.hpp"

namespace vsrd {

using ad::Var;
using Eigen::MatrixXd;

Index param_count(const ParamSet& p) {
  Index n = 0;
  for (const auto& [_, m] : p) n += m.size();
  return n;
}

bool all_finite(const ParamSet& p) {
  return std::all_of(p.begin(), p.end(), [](const auto& kv) { return kv.second.allFinite(); });
}

bool bitwise_equal(const ParamSet& a, const ParamSet& b) {
  if (a.size() != b.size()) return false;
  for (auto ia = a.begin(), ib = b.begin(); ia != a.end(); ++ia, ++ib) {
    if (ia->first != ib->first) return false;
    if (ia->second.rows() != ib->second.rows() || ia->second.cols() != ib->second.cols()) return false;
    if (ia->second.size() > 0 &&
        std::memcmp(ia->second.data(), ib->second.data(), sizeof(double) * ia->second.size()) != 0)
      return false;
  }
  return true;
}

double global_norm(const ParamSet& p) {
  double s = 0.0;
  for (const auto& [_, m] : p) s += m.squaredNorm();
  return std::sqrt(s);
}

ParamSet zeros_like(const ParamSet& p) {
  ParamSet z;
  for (const auto& [k, m] : p) z.emplace(k, MatrixXd::Zero(m.rows(), m.cols()));
  return z;
}

// ---- config -----------------------------------------------------------------

std::vector<int> DenoiserConfig::feature_taps() const {
  std::vector<int> taps;
  for (double f : feature_fractions) {
    int k = static_cast<int>(std::lround(f * depth));
    k = std::clamp(k, 1, depth);
    if (taps.empty() || k > taps.back()) taps.push_back(k);
  }
  return taps;
}

void DenoiserConfig::validate() const {
  if (channels < 1 || depth < 1 || width < 1 || heads < 1 || mlp_ratio < 1 || patch < 1 || patch_t < 1 ||
      cond_dim < 1 || num_classes < 1)
    throw ContractViolation("denoiser config: all dimensions must be positive");
  if (width % heads != 0) throw ContractViolation("denoiser config: width must be divisible by heads");
  if (feature_fractions.empty()) throw ContractViolation("denoiser config: need at least one feature tap");
  if (!(prior_var > 0.0)) throw ContractViolation("denoiser config: prior_var must be positive");
  double prev = 0.0;
  for (double f : feature_fractions) {
    if (!(f > prev && f <= 1.0)) throw ContractViolation("denoiser config: feature fractions must increase in (0,1]");
    prev = f;
  }
}

DenoiserConfig tiny_config() {
  DenoiserConfig c;
  c.depth = 2;
  c.width = 8;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.patch = 2;
  c.patch_t = 1;
  c.cond_dim = 4;
  c.num_classes = 2;
  return c;
}

// ---- parameters -------------------------------------------------------------

namespace {

struct ParamSpec {
  std::string name;
  Index rows;
  Index cols;
  double stddev;  // 0 => zeros
};

Index patch_dim(const DenoiserConfig& c) {
  return static_cast<Index>(c.patch_t) * c.patch * c.patch * c.channels;
}

std::vector<ParamSpec> param_specs(const DenoiserConfig& c) {
  const Index w = c.width;
  const Index hidden = static_cast<Index>(c.width) * c.mlp_ratio;
  const double inv = 1.0 / std::sqrt(static_cast<double>(w));
  const double resid = inv / std::sqrt(2.0 * c.depth);
  std::vector<ParamSpec> specs{
      {"embed.w", 2 * patch_dim(c), w, 1.0 / std::sqrt(2.0 * patch_dim(c))},
      {"embed.b", 1, w, 0.0},
      {"time.w1", w, w, inv},
      {"time.b1", 1, w, 0.0},
      {"time.w2", w, w, inv},
      {"time.b2", 1, w, 0.0},
      {"cond.table", c.num_classes, c.cond_dim, 1.0},
      {"cond.null", 1, c.cond_dim, 1.0},
      {"cond.w", c.cond_dim, w, 1.0 / std::sqrt(static_cast<double>(c.cond_dim))},
      {"cond.b", 1, w, 0.0},
  };
  for (int k = 0; k < c.depth; ++k) {
    const std::string p = "blocks." + std::to_string(k) + ".";
    specs.push_back({p + "mod.w", w, 4 * w, 0.5 * inv});
    specs.push_back({p + "mod.b", 1, 4 * w, 0.0});
    specs.push_back({p + "qkv.w", w, 3 * w, inv});
    specs.push_back({p + "qkv.b", 1, 3 * w, 0.0});
    specs.push_back({p + "proj.w", w, w, resid});
    specs.push_back({p + "proj.b", 1, w, 0.0});
    specs.push_back({p + "fc1.w", w, hidden, inv});
    specs.push_back({p + "fc1.b", 1, hidden, 0.0});
    specs.push_back({p + "fc2.w", hidden, w, resid * std::sqrt(static_cast<double>(w) / hidden)});
    specs.push_back({p + "fc2.b", 1, w, 0.0});
  }
  specs.push_back({"final.mod.w", w, 2 * w, 0.5 * inv});
  specs.push_back({"final.mod.b", 1, 2 * w, 0.0});
  specs.push_back({"final.w", w, patch_dim(c), 0.1 * inv});
  specs.push_back({"final.b", 1, patch_dim(c), 0.0});
  // linear path from the input patches straight to the output, gated by the
  // conditioning vector; the token width is narrower than two patches
  specs.push_back({"skip.w", 2 * patch_dim(c), patch_dim(c), 0.0});
  specs.push_back({"skip.mod.w", w, patch_dim(c), 0.0});
  specs.push_back({"skip.mod.b", 1, patch_dim(c), 0.0});
  return specs;
}

MatrixXd random_matrix(Index rows, Index cols, double stddev, std::uint64_t seed) {
  if (stddev == 0.0) return MatrixXd::Zero(rows, cols);
  Rng rng(seed);
  MatrixXd m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * rng.normal();
  return m;
}

}  // namespace

DenoiserParams init_params(const DenoiserConfig& config, std::uint64_t seed) {
  config.validate();
  DenoiserParams p{config, {}};
  for (const ParamSpec& s : param_specs(config))
    p.tensors.emplace(s.name, random_matrix(s.rows, s.cols, s.stddev, derive_seed(seed, {hash_name(s.name)})));
  return p;
}

// ---- binding ----------------------------------------------------------------

const Var& Binding::at(const std::string& name) const {
  auto it = vars.find(name);
  if (it == vars.end()) throw ContractViolation("missing parameter '" + name + "'");
  return it->second;
}

Binding bind_params(ad::Tape& tape, const ParamSet& params, bool trainable) {
  Binding b{&tape, {}};
  for (const auto& [name, m] : params) b.vars.emplace(name, trainable ? tape.leaf(m) : tape.constant(m));
  return b;
}

ParamSet gradients(const Binding& binding) {
  ParamSet g;
  for (const auto& [name, v] : binding.vars) g.emplace(name, binding.tape->grad(v));
  return g;
}

Var video_var(ad::Tape& tape, const LatentVideo& v, bool trainable) {
  MatrixXd m = v.array().matrix();
  return trainable ? tape.leaf(std::move(m)) : tape.constant(std::move(m));
}

LatentVideo to_video(const Var& v, const VideoShape& shape) {
  if (v.value().size() != shape.numel()) throw ContractViolation("to_video: size mismatch");
  return LatentVideo(shape, Eigen::Map<const Eigen::ArrayXd>(v.value().data(), v.value().size()));
}

// ---- forward ----------------------------------------------------------------

TokenGrid token_grid(const DenoiserConfig& c, const VideoShape& s) {
  if (s.channels != c.channels) throw ContractViolation("denoiser: channel count mismatch");
  if (s.frames % c.patch_t != 0 || s.height % c.patch != 0 || s.width % c.patch != 0)
    throw ContractViolation("denoiser: shape " + to_string(s) + " not divisible by patch size");
  return TokenGrid{s.frames / c.patch_t, s.height / c.patch, s.width / c.patch};
}

namespace {

// tokens(i, j) <- video[map], column-major over (tokens x patch_dim)
std::shared_ptr<const std::vector<Index>> patchify_map(const DenoiserConfig& c, const VideoShape& s,
                                                        const TokenGrid& g) {
  const Index n = g.count();
  const Index pd = patch_dim(c);
  auto map = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(n * pd));
  for (Index ft = 0; ft < g.frames; ++ft)
    for (Index yt = 0; yt < g.height; ++yt)
      for (Index xt = 0; xt < g.width; ++xt) {
        const Index i = (ft * g.height + yt) * g.width + xt;
        for (Index dt = 0; dt < c.patch_t; ++dt)
          for (Index dy = 0; dy < c.patch; ++dy)
            for (Index dx = 0; dx < c.patch; ++dx)
              for (Index ch = 0; ch < c.channels; ++ch) {
                const Index j = ((dt * c.patch + dy) * c.patch + dx) * c.channels + ch;
                (*map)[static_cast<std::size_t>(j * n + i)] =
                    s.offset(ft * c.patch_t + dt, yt * c.patch + dy, xt * c.patch + dx, ch);
              }
      }
  return map;
}

std::shared_ptr<const std::vector<Index>> unpatchify_map(const std::vector<Index>& forward_map) {
  auto inv = std::make_shared<std::vector<Index>>(forward_map.size());
  for (std::size_t k = 0; k < forward_map.size(); ++k) (*inv)[static_cast<std::size_t>(forward_map[k])] =
      static_cast<Index>(k);
  return inv;
}

MatrixXd position_encoding(const TokenGrid& g, Index width) {
  MatrixXd pe = MatrixXd::Zero(g.count(), width);
  const Index per_axis = 2 * (width / 6);
  if (per_axis == 0) return pe;
  const Index freqs = per_axis / 2;
  for (Index ft = 0; ft < g.frames; ++ft)
    for (Index yt = 0; yt < g.height; ++yt)
      for (Index xt = 0; xt < g.width; ++xt) {
        const Index i = (ft * g.height + yt) * g.width + xt;
        const double coord[3] = {static_cast<double>(ft), static_cast<double>(yt), static_cast<double>(xt)};
        for (int axis = 0; axis < 3; ++axis)
          for (Index f = 0; f < freqs; ++f) {
            const double omega = std::pow(100.0, -static_cast<double>(f) / static_cast<double>(freqs));
            pe(i, axis * per_axis + 2 * f) = std::sin(coord[axis] * omega);
            pe(i, axis * per_axis + 2 * f + 1) = std::cos(coord[axis] * omega);
          }
      }
  return pe;
}

MatrixXd timestep_embedding(double t, Index width) {
  MatrixXd e = MatrixXd::Zero(1, width);
  const Index half = width / 2;
  for (Index i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(1000.0) * static_cast<double>(i) / static_cast<double>(half));
    e(0, i) = std::cos(1000.0 * t * freq);
    e(0, half + i) = std::sin(1000.0 * t * freq);
  }
  return e;
}

Var linear(const Var& x, const Var& w, const Var& b) { return ad::add_rowvec(ad::matmul(x, w), b); }

// norm(x) * (1 + scale) + shift, with shift/scale 1 x width rows
Var modulate(const Var& x, const Var& shift, const Var& scale) {
  return ad::add_rowvec(ad::mul_rowvec(ad::layer_norm_rows(x), ad::add_scalar(scale, 1.0)), shift);
}

Var attention(const Var& h, const Binding& p, const std::string& pre, const DenoiserConfig& c) {
  const Index w = c.width;
  const Index dh = w / c.heads;
  const Var qkv = linear(h, p.at(pre + "qkv.w"), p.at(pre + "qkv.b"));
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> outs;
  outs.reserve(static_cast<std::size_t>(c.heads));
  for (Index head = 0; head < c.heads; ++head) {
    const Var q = ad::slice_cols(qkv, head * dh, dh);
    const Var k = ad::slice_cols(qkv, w + head * dh, dh);
    const Var v = ad::slice_cols(qkv, 2 * w + head * dh, dh);
    const Var att = ad::softmax_rows(ad::scale(ad::matmul_nt(q, k), inv_sqrt));
    outs.push_back(ad::matmul(att, v));
  }
  const Var merged = c.heads == 1 ? outs.front() : ad::concat_cols(outs);
  return linear(merged, p.at(pre + "proj.w"), p.at(pre + "proj.b"));
}

}  // namespace

ForwardResult denoiser_forward(const Binding& p, const DenoiserConfig& c, const Var& z_t, const VideoShape& shape, double t,
                      const flow::ConditionBundle& cond, bool with_features) {
  ad::Tape& tape = *p.tape;
  if (z_t.value().size() != shape.numel()) throw ContractViolation("denoise: z_t size does not match shape");
  if (!(cond.lr_latent.shape() == shape))
    throw ContractViolation("denoise: LR latent shape " + to_string(cond.lr_latent.shape()) +
                            " does not match HR latent " + to_string(shape));
  if (!z_t.value().allFinite() || !cond.lr_latent.all_finite())
    throw ContractViolation("denoise: non-finite input");
  if (!(t >= 0.0 && t <= 1.0)) throw ContractViolation("denoise: timestep outside [0,1]");
  if (!cond.is_null && (cond.cond_class < 0 || cond.cond_class >= c.num_classes))
    throw ContractViolation("denoise: condition class out of range");

  const TokenGrid g = token_grid(c, shape);
  const Index n = g.count();
  const Index pd = patch_dim(c);
  auto pmap = patchify_map(c, shape, g);

  const Var tok_z = ad::gather(z_t, pmap, n, pd);
  const Var tok_lr = ad::gather(video_var(tape, cond.lr_latent), pmap, n, pd);
  const Var tok_in = ad::concat_cols({tok_z, tok_lr});
  Var x = linear(tok_in, p.at("embed.w"), p.at("embed.b"));
  x = ad::add(x, tape.constant(position_encoding(g, c.width)));

  // conditioning vector: timestep MLP + projected class (or null) embedding
  const Var temb = tape.constant(timestep_embedding(t, c.width));
  Var cvec = linear(ad::silu(linear(temb, p.at("time.w1"), p.at("time.b1"))), p.at("time.w2"), p.at("time.b2"));
  const Var cond_row = cond.is_null ? p.at("cond.null") : ad::slice_rows(p.at("cond.table"), cond.cond_class, 1);
  cvec = ad::add(cvec, linear(cond_row, p.at("cond.w"), p.at("cond.b")));
  const Var cact = ad::silu(cvec);

  ForwardResult result;
  result.grid = g;
  const std::vector<int> taps = c.feature_taps();
  const Index w = c.width;
  for (int k = 0; k < c.depth; ++k) {
    const std::string pre = "blocks." + std::to_string(k) + ".";
    const Var mod = linear(cact, p.at(pre + "mod.w"), p.at(pre + "mod.b"));
    const Var h1 = modulate(x, ad::slice_cols(mod, 0, w), ad::slice_cols(mod, w, w));
    x = ad::add(x, attention(h1, p, pre, c));
    const Var h2 = modulate(x, ad::slice_cols(mod, 2 * w, w), ad::slice_cols(mod, 3 * w, w));
    const Var mlp = linear(ad::silu(linear(h2, p.at(pre + "fc1.w"), p.at(pre + "fc1.b"))), p.at(pre + "fc2.w"),
                           p.at(pre + "fc2.b"));
    x = ad::add(x, mlp);
    if (with_features && std::find(taps.begin(), taps.end(), k + 1) != taps.end()) result.features.push_back(x);
  }

  const Var fmod = linear(cact, p.at("final.mod.w"), p.at("final.mod.b"));
  const Var hf = modulate(x, ad::slice_cols(fmod, 0, w), ad::slice_cols(fmod, w, w));
  const Var gate = ad::add_scalar(linear(cact, p.at("skip.mod.w"), p.at("skip.mod.b")), 1.0);
  const Var skip = ad::mul_rowvec(ad::matmul(tok_in, p.at("skip.w")), gate);
  const Var out_tokens = ad::add(linear(hf, p.at("final.w"), p.at("final.b")), skip);
  result.velocity = ad::gather(out_tokens, unpatchify_map(*pmap), shape.numel(), 1);
  if (c.prior_velocity) {
    // E[eps - z0 | z_t, lr] for z0 ~ N(lr, s2): finite at both ends of [0,1]
    const double s2 = c.prior_var;
    const double d = (1 - t) * (1 - t) * s2 + t * t;
    const Var base = ad::add(ad::scale(z_t, (t - s2 * (1 - t)) / d), ad::scale(video_var(tape, cond.lr_latent), -t / d));
    result.velocity = ad::add(result.velocity, base);
  }
  return result;
}

LatentVideo denoise(const DenoiserParams& params, const LatentVideo& z_t, flow::Timestep t,
                    const flow::ConditionBundle& cond) {
  ad::Tape tape;
  const Binding b = bind_params(tape, params.tensors, false);
  const ForwardResult r = denoiser_forward(b, params.config, video_var(tape, z_t), z_t.shape(), t.value(), cond, false);
  return to_video(r.velocity, z_t.shape());
}

std::pair<LatentVideo, FeatureStack> denoise_with_features(const DenoiserParams& params, const LatentVideo& z_t,
                                                            flow::Timestep t, const flow::ConditionBundle& cond) {
  ad::Tape tape;
  const Binding b = bind_params(tape, params.tensors, false);
  const ForwardResult r = denoiser_forward(b, params.config, video_var(tape, z_t), z_t.shape(), t.value(), cond, true);
  FeatureStack fs;
  fs.grid = r.grid;
  for (const Var& f : r.features) fs.levels.push_back(f.value());
  return {to_video(r.velocity, z_t.shape()), std::move(fs)};
}

// ---- discriminator heads ----------------------------------------------------

HeadConfig head_config_for(const DenoiserConfig& config, int hidden) {
  return HeadConfig{static_cast<int>(config.feature_taps().size()), 2 * config.width, hidden};
}

DiscriminatorHeads init_heads(const HeadConfig& config, std::uint64_t seed, bool zero_final) {
  if (config.levels < 1 || config.in_channels < 1 || config.hidden < 1)
    throw ContractViolation("head config: dimensions must be positive");
  DiscriminatorHeads h{config, {}};
  for (int l = 0; l < config.levels; ++l) {
    const std::string pre = "level." + std::to_string(l) + ".";
    const Index fan_in = 9 * static_cast<Index>(config.in_channels);
    auto add = [&](const std::string& name, Index r, Index c, double sd) {
      h.tensors.emplace(pre + name, random_matrix(r, c, sd, derive_seed(seed, {hash_name(pre + name)})));
    };
    add("conv1.w", fan_in, config.hidden, 1.0 / std::sqrt(static_cast<double>(fan_in)));
    add("conv1.b", 1, config.hidden, 0.0);
    add("conv2.w", config.hidden, 1, zero_final ? 0.0 : 1.0 / std::sqrt(static_cast<double>(config.hidden)));
    add("conv2.b", 1, 1, 0.0);
  }
  return h;
}

namespace {

// (tokens x ch) -> (tokens x 9ch): 3x3 spatial neighbourhood within each token frame, zero padded.
std::shared_ptr<const std::vector<Index>> im2col_map(const TokenGrid& g, Index ch) {
  const Index n = g.count();
  auto map = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(n * 9 * ch));
  for (Index f = 0; f < g.frames; ++f)
    for (Index y = 0; y < g.height; ++y)
      for (Index x = 0; x < g.width; ++x) {
        const Index i = (f * g.height + y) * g.width + x;
        for (Index dy = -1; dy <= 1; ++dy)
          for (Index dx = -1; dx <= 1; ++dx) {
            const Index k = (dy + 1) * 3 + (dx + 1);
            const Index yy = y + dy;
            const Index xx = x + dx;
            const bool inside = yy >= 0 && yy < g.height && xx >= 0 && xx < g.width;
            const Index j = (f * g.height + yy) * g.width + xx;
            for (Index c = 0; c < ch; ++c)
              (*map)[static_cast<std::size_t>((k * ch + c) * n + i)] = inside ? c * n + j : -1;
          }
      }
  return map;
}

}  // namespace

DiscResult disc_forward(const Binding& heads, const HeadConfig& config, const std::vector<Var>& features,
                        const TokenGrid& grid) {
  if (static_cast<int>(features.size()) != config.levels)
    throw ContractViolation("disc_forward: expected " + std::to_string(config.levels) + " feature levels, got " +
                            std::to_string(features.size()));
  DiscResult r;
  std::vector<Var> level_means;
  for (int l = 0; l < config.levels; ++l) {
    const Var& f = features[static_cast<std::size_t>(l)];
    if (f.cols() != config.in_channels || f.rows() != grid.count())
      throw ContractViolation("disc_forward: feature level " + std::to_string(l) + " has wrong shape");
    const std::string pre = "level." + std::to_string(l) + ".";
    const Var cols = ad::gather(f, im2col_map(grid, config.in_channels), grid.count(), 9 * config.in_channels);
    const Var h = ad::silu(linear(cols, heads.at(pre + "conv1.w"), heads.at(pre + "conv1.b")));
    const Var logits = linear(h, heads.at(pre + "conv2.w"), heads.at(pre + "conv2.b"));
    r.logit_maps.push_back(logits);
    level_means.push_back(ad::mean(logits));
  }
  Var total = level_means.front();
  for (std::size_t i = 1; i < level_means.size(); ++i) total = ad::add(total, level_means[i]);
  r.value = ad::scale(total, 1.0 / static_cast<double>(level_means.size()));
  return r;
}

DiscOutput disc_forward(const DiscriminatorHeads& heads, const FeatureStack& features) {
  ad::Tape tape;
  const Binding b = bind_params(tape, heads.tensors, false);
  std::vector<Var> fv;
  for (const MatrixXd& m : features.levels) fv.push_back(tape.constant(m));
  const DiscResult r = disc_forward(b, heads.config, fv, features.grid);
  DiscOutput out;
  for (const Var& m : r.logit_maps) out.logit_maps.push_back(m.value());
  out.value = r.value.item();
  return out;
}

FeatureStack concat_features(const FeatureStack& a, const FeatureStack& b) {
  if (a.levels.size() != b.levels.size() || !(a.grid == b.grid))
    throw ContractViolation("concat_features: stacks do not match");
  FeatureStack out;
  out.grid = a.grid;
  for (std::size_t l = 0; l < a.levels.size(); ++l) {
    if (a.levels[l].rows() != b.levels[l].rows()) throw ContractViolation("concat_features: tap shape mismatch");
    MatrixXd m(a.levels[l].rows(), a.levels[l].cols() + b.levels[l].cols());
    m << a.levels[l], b.levels[l];
    out.levels.push_back(std::move(m));
  }
  return out;
}

std::vector<Var> concat_features(const std::vector<Var>& a, const std::vector<Var>& b) {
  if (a.size() != b.size()) throw ContractViolation("concat_features: level counts differ");
  std::vector<Var> out;
  for (std::size_t l = 0; l < a.size(); ++l) out.push_back(ad::concat_cols({a[l], b[l]}));
  return out;
}

}  // namespace vsrd
