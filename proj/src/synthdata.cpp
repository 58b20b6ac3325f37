#include "vsrd/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include <json.hpp>

#include "vsrd/blob.hpp"
#include "vsrd/rng.hpp"

namespace vsrd::data {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

// Smooth sinusoidal texture, one base colour and phase per channel.
struct Texture {
  Eigen::ArrayXd base;
  Eigen::ArrayXd phase;
  double amp = 0.0;
  double fx = 0.0;
  double fy = 0.0;

  Texture(std::uint64_t seed, Index channels, double base_lo, double base_hi, double amp_lo, double amp_hi,
          double f_lo, double f_hi) {
    Rng rng(seed);
    base.resize(channels);
    phase.resize(channels);
    for (Index c = 0; c < channels; ++c) {
      base[c] = rng.uniform(base_lo, base_hi);
      phase[c] = rng.uniform(0.0, kTwoPi);
    }
    amp = rng.uniform(amp_lo, amp_hi);
    fx = rng.uniform(f_lo, f_hi) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
    fy = rng.uniform(f_lo, f_hi);
  }

  // (u, v) in units of the texture period scale
  double at(double u, double v, Index c) const {
    return std::clamp(base[c] + amp * std::sin(kTwoPi * (fx * u + fy * v) + phase[c]), 0.0, 1.0);
  }
};

bool inside_shape(SpriteShape shape, int size, int lx, int ly) {
  const double r = 0.5 * size;
  const double dx = lx + 0.5 - r;
  const double dy = ly + 0.5 - r;
  switch (shape) {
    case SpriteShape::Box:
      return true;
    case SpriteShape::Disc:
      return dx * dx + dy * dy <= r * r;
    case SpriteShape::Diamond:
      return std::abs(dx) + std::abs(dy) <= r;
  }
  return false;
}

Index reflect(Index i, Index n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * (n - 1) - i;
  }
  return i;
}

double cubic_weight(double x) {
  constexpr double a = -0.5;
  x = std::abs(x);
  if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
  return 0.0;
}

}  // namespace

// ---- scenes ---------------------------------------------------------------------

void SceneSpec::validate() const {
  if (frames < 1 || height < 1 || width < 1 || channels < 1)
    throw ContractViolation("scene: dimensions must be positive");
  for (const Sprite& s : sprites) {
    if (s.size < 1) throw ContractViolation("scene: sprite size must be positive");
    if (s.size > height || s.size > width) throw ContractViolation("scene: sprite larger than canvas");
  }
}

std::pair<int, int> SceneSpec::position(std::size_t s, Index k) const {
  const Sprite& sp = sprites.at(s);
  const long x = std::clamp<long>(sp.x0 + static_cast<long>(sp.vx) * k, 0, width - sp.size);
  const long y = std::clamp<long>(sp.y0 + static_cast<long>(sp.vy) * k, 0, height - sp.size);
  return {static_cast<int>(x), static_cast<int>(y)};
}

void SceneConfig::validate() const {
  if (frames < 1 || height < 1 || width < 1 || channels < 1)
    throw ContractViolation("scene config: dimensions must be positive");
  if (min_sprites < 0 || max_sprites < min_sprites) throw ContractViolation("scene config: bad sprite count range");
  if (min_size < 1 || max_size < min_size || max_size > std::min(height, width))
    throw ContractViolation("scene config: bad sprite size range");
  if (max_speed < 0) throw ContractViolation("scene config: max_speed must be >= 0");
}

SceneSpec random_scene(const SceneConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  SceneSpec s;
  s.frames = cfg.frames;
  s.height = cfg.height;
  s.width = cfg.width;
  s.channels = cfg.channels;
  s.seed = seed;
  s.background_seed = rng.next_u64();
  const int count = rng.integer(cfg.min_sprites, cfg.max_sprites);
  for (int i = 0; i < count; ++i) {
    Sprite sp;
    sp.shape = static_cast<SpriteShape>(rng.integer(0, 2));
    sp.texture_seed = rng.next_u64();
    sp.size = rng.integer(cfg.min_size, cfg.max_size);
    sp.vx = rng.integer(-cfg.max_speed, cfg.max_speed);
    sp.vy = rng.integer(-cfg.max_speed, cfg.max_speed);
    sp.x0 = rng.integer(0, static_cast<int>(cfg.width) - sp.size);
    sp.y0 = rng.integer(0, static_cast<int>(cfg.height) - sp.size);
    s.sprites.push_back(sp);
  }
  return s;
}

Video<int> label_map(const SceneSpec& spec) {
  spec.validate();
  Video<int> labels(VideoShape{spec.frames, spec.height, spec.width, 1});
  for (Index k = 0; k < spec.frames; ++k)
    for (std::size_t s = 0; s < spec.sprites.size(); ++s) {
      const Sprite& sp = spec.sprites[s];
      const auto [px, py] = spec.position(s, k);
      for (int ly = 0; ly < sp.size; ++ly)
        for (int lx = 0; lx < sp.size; ++lx)
          if (inside_shape(sp.shape, sp.size, lx, ly)) labels(k, py + ly, px + lx, 0) = static_cast<int>(s) + 1;
    }
  return labels;
}

LatentVideo render_scene(const SceneSpec& spec) {
  spec.validate();
  LatentVideo v(spec.shape());
  const Texture bg(spec.background_seed, spec.channels, 0.3, 0.7, 0.05, 0.15, 1.0, 3.0);
  std::vector<Texture> tex;
  for (const Sprite& sp : spec.sprites) tex.emplace_back(sp.texture_seed, spec.channels, 0.2, 0.8, 0.1, 0.25, 0.5, 2.0);
  const Video<int> labels = label_map(spec);
  for (Index k = 0; k < spec.frames; ++k)
    for (Index y = 0; y < spec.height; ++y)
      for (Index x = 0; x < spec.width; ++x) {
        const int l = labels(k, y, x, 0);
        for (Index c = 0; c < spec.channels; ++c) {
          if (l == 0) {
            v(k, y, x, c) = bg.at(static_cast<double>(x) / spec.width, static_cast<double>(y) / spec.height, c);
          } else {
            const auto s = static_cast<std::size_t>(l - 1);
            const auto [px, py] = spec.position(s, k);
            const double size = spec.sprites[s].size;
            v(k, y, x, c) = tex[s].at((x - px) / size, (y - py) / size, c);
          }
        }
      }
  return v;
}

FlowField gt_flow(const SceneSpec& spec) {
  spec.validate();
  const Index pairs = std::max<Index>(spec.frames - 1, 1);
  FlowField f(VideoShape{pairs, spec.height, spec.width, 2});
  if (spec.frames < 2) return f;
  const Video<int> labels = label_map(spec);
  for (Index k = 0; k + 1 < spec.frames; ++k)
    for (Index y = 0; y < spec.height; ++y)
      for (Index x = 0; x < spec.width; ++x) {
        const int l = labels(k, y, x, 0);
        if (l == 0) continue;
        const auto s = static_cast<std::size_t>(l - 1);
        const auto [x1, y1] = spec.position(s, k);
        const auto [x2, y2] = spec.position(s, k + 1);
        f(k, y, x, 0) = x2 - x1;
        f(k, y, x, 1) = y2 - y1;
      }
  return f;
}

LatentVideo visibility_mask(const SceneSpec& spec) {
  const FlowField f = gt_flow(spec);
  LatentVideo m(VideoShape{f.shape().frames, spec.height, spec.width, 1});
  if (spec.frames < 2) return m;
  const Video<int> labels = label_map(spec);
  for (Index k = 0; k + 1 < spec.frames; ++k)
    for (Index y = 0; y < spec.height; ++y)
      for (Index x = 0; x < spec.width; ++x) {
        const Index x2 = x + static_cast<Index>(f(k, y, x, 0));
        const Index y2 = y + static_cast<Index>(f(k, y, x, 1));
        const bool in = x2 >= 0 && x2 < spec.width && y2 >= 0 && y2 < spec.height;
        m(k, y, x, 0) = (in && labels(k + 1, y2, x2, 0) == labels(k, y, x, 0)) ? 1.0 : 0.0;
      }
  return m;
}

LatentVideo warp_to_previous(const LatentVideo& video, const FlowField& flow) {
  const VideoShape& s = video.shape();
  const VideoShape& fs = flow.shape();
  if (s.frames < 2 || fs.frames != s.frames - 1 || fs.height != s.height || fs.width != s.width || fs.channels != 2)
    throw ContractViolation("warp: flow shape " + to_string(fs) + " does not match video " + to_string(s));
  LatentVideo out(VideoShape{s.frames - 1, s.height, s.width, s.channels});
  for (Index k = 0; k + 1 < s.frames; ++k)
    for (Index y = 0; y < s.height; ++y)
      for (Index x = 0; x < s.width; ++x) {
        const double sx = std::clamp(x + flow(k, y, x, 0), 0.0, static_cast<double>(s.width - 1));
        const double sy = std::clamp(y + flow(k, y, x, 1), 0.0, static_cast<double>(s.height - 1));
        const Index x0 = static_cast<Index>(std::floor(sx));
        const Index y0 = static_cast<Index>(std::floor(sy));
        const Index x1 = std::min(x0 + 1, s.width - 1);
        const Index y1 = std::min(y0 + 1, s.height - 1);
        const double ax = sx - x0;
        const double ay = sy - y0;
        for (Index c = 0; c < s.channels; ++c) {
          const double top = (1 - ax) * video(k + 1, y0, x0, c) + ax * video(k + 1, y0, x1, c);
          const double bot = (1 - ax) * video(k + 1, y1, x0, c) + ax * video(k + 1, y1, x1, c);
          out(k, y, x, c) = (1 - ay) * top + ay * bot;
        }
      }
  return out;
}

// ---- degradation -------------------------------------------------------------

void DegradationConfig::validate() const {
  if (!(blur_sigma_min >= 0.0 && blur_sigma_max >= blur_sigma_min))
    throw ContractViolation("degradation: blur sigma range must be non-negative and ordered");
  if (!(noise_sigma_min >= 0.0 && noise_sigma_max >= noise_sigma_min))
    throw ContractViolation("degradation: noise sigma range must be non-negative and ordered");
  if (factor < 2) throw ContractViolation("degradation: factor must be >= 2");
  if (upsample != "bicubic" && upsample != "bilinear")
    throw ContractViolation("degradation: unknown upsample kernel '" + upsample + "'");
  if (num_classes < 1) throw ContractViolation("degradation: num_classes must be >= 1");
}

int DegradationConfig::class_of(double blur_sigma) const {
  const double span = blur_sigma_max - blur_sigma_min;
  if (span <= 0.0) return 0;
  const int k = static_cast<int>(std::floor((blur_sigma - blur_sigma_min) / span * num_classes));
  return std::clamp(k, 0, num_classes - 1);
}

LatentVideo gaussian_blur(const LatentVideo& v, double sigma) {
  if (sigma < 0.0) throw ContractViolation("blur: sigma must be >= 0");
  if (sigma == 0.0) return v;
  const VideoShape& s = v.shape();
  const Index radius = static_cast<Index>(std::ceil(3.0 * sigma));
  Eigen::ArrayXd kernel(2 * radius + 1);
  for (Index i = -radius; i <= radius; ++i) kernel[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
  kernel /= kernel.sum();

  LatentVideo tmp(s);
  LatentVideo out(s);
  for (Index k = 0; k < s.frames; ++k)
    for (Index y = 0; y < s.height; ++y)
      for (Index x = 0; x < s.width; ++x)
        for (Index c = 0; c < s.channels; ++c) {
          double acc = 0.0;
          for (Index i = -radius; i <= radius; ++i) acc += kernel[i + radius] * v(k, y, reflect(x + i, s.width), c);
          tmp(k, y, x, c) = acc;
        }
  for (Index k = 0; k < s.frames; ++k)
    for (Index y = 0; y < s.height; ++y)
      for (Index x = 0; x < s.width; ++x)
        for (Index c = 0; c < s.channels; ++c) {
          double acc = 0.0;
          for (Index i = -radius; i <= radius; ++i)
            acc += kernel[i + radius] * tmp(k, reflect(y + i, s.height), x, c);
          out(k, y, x, c) = acc;
        }
  return out;
}

LatentVideo area_downsample(const LatentVideo& v, int factor) {
  const VideoShape& s = v.shape();
  if (factor < 1 || s.height % factor != 0 || s.width % factor != 0)
    throw ContractViolation("downsample: factor " + std::to_string(factor) + " does not divide " + to_string(s));
  LatentVideo out(VideoShape{s.frames, s.height / factor, s.width / factor, s.channels});
  const double inv = 1.0 / (factor * factor);
  for (Index k = 0; k < s.frames; ++k)
    for (Index y = 0; y < s.height; ++y)
      for (Index x = 0; x < s.width; ++x)
        for (Index c = 0; c < s.channels; ++c) out(k, y / factor, x / factor, c) += inv * v(k, y, x, c);
  return out;
}

LatentVideo upsample(const LatentVideo& v, int factor, const std::string& kernel) {
  if (factor < 1) throw ContractViolation("upsample: factor must be >= 1");
  const bool cubic = kernel == "bicubic";
  if (!cubic && kernel != "bilinear") throw ContractViolation("upsample: unknown kernel '" + kernel + "'");
  const VideoShape& s = v.shape();
  const Index H = s.height * factor;
  const Index W = s.width * factor;

  // per output coordinate: source taps and weights along one axis
  auto taps = [&](Index n_out, Index n_in) {
    std::vector<std::vector<std::pair<Index, double>>> t(static_cast<std::size_t>(n_out));
    for (Index o = 0; o < n_out; ++o) {
      const double src = (o + 0.5) / factor - 0.5;
      const Index i0 = static_cast<Index>(std::floor(src));
      const double frac = src - i0;
      auto& row = t[static_cast<std::size_t>(o)];
      if (cubic) {
        for (Index j = -1; j <= 2; ++j) row.emplace_back(std::clamp<Index>(i0 + j, 0, n_in - 1), cubic_weight(j - frac));
      } else {
        row.emplace_back(std::clamp<Index>(i0, 0, n_in - 1), 1.0 - frac);
        row.emplace_back(std::clamp<Index>(i0 + 1, 0, n_in - 1), frac);
      }
    }
    return t;
  };
  const auto tx = taps(W, s.width);
  const auto ty = taps(H, s.height);

  LatentVideo tmp(VideoShape{s.frames, s.height, W, s.channels});
  for (Index k = 0; k < s.frames; ++k)
    for (Index y = 0; y < s.height; ++y)
      for (Index x = 0; x < W; ++x)
        for (Index c = 0; c < s.channels; ++c) {
          double acc = 0.0;
          for (const auto& [i, w] : tx[static_cast<std::size_t>(x)]) acc += w * v(k, y, i, c);
          tmp(k, y, x, c) = acc;
        }
  LatentVideo out(VideoShape{s.frames, H, W, s.channels});
  for (Index k = 0; k < s.frames; ++k)
    for (Index y = 0; y < H; ++y)
      for (Index x = 0; x < W; ++x)
        for (Index c = 0; c < s.channels; ++c) {
          double acc = 0.0;
          for (const auto& [i, w] : ty[static_cast<std::size_t>(y)]) acc += w * tmp(k, i, x, c);
          out(k, y, x, c) = acc;
        }
  return out;
}

std::pair<LatentVideo, DegradationDraw> degrade(const LatentVideo& hr, const DegradationConfig& cfg,
                                                std::uint64_t seed) {
  cfg.validate();
  const VideoShape& s = hr.shape();
  if (s.height % cfg.factor != 0 || s.width % cfg.factor != 0)
    throw ContractViolation("degrade: factor " + std::to_string(cfg.factor) + " does not divide " + to_string(s));
  Rng rng(seed);
  DegradationDraw d;
  d.blur_sigma = rng.uniform(cfg.blur_sigma_min, cfg.blur_sigma_max);
  d.noise_sigma = rng.uniform(cfg.noise_sigma_min, cfg.noise_sigma_max);
  d.noise_seed = rng.next_u64();
  d.cond_class = cfg.class_of(d.blur_sigma);

  LatentVideo low = area_downsample(gaussian_blur(hr, d.blur_sigma), cfg.factor);
  if (d.noise_sigma > 0.0) {
    Rng noise(d.noise_seed);
    low.array() += d.noise_sigma * noise.normal_array(low.numel());
  }
  LatentVideo up = upsample(low, cfg.factor, cfg.upsample);
  up.array() = up.array().min(1.0).max(0.0);
  return {std::move(up), d};
}

double hf_energy(const LatentVideo& v) {
  const VideoShape& s = v.shape();
  if (s.height < 3 || s.width < 3) throw ContractViolation("hf_energy: frames must be at least 3x3");
  double acc = 0.0;
  Index n = 0;
  for (Index k = 0; k < s.frames; ++k)
    for (Index y = 1; y + 1 < s.height; ++y)
      for (Index x = 1; x + 1 < s.width; ++x)
        for (Index c = 0; c < s.channels; ++c) {
          const double lap = v(k, y - 1, x, c) + v(k, y + 1, x, c) + v(k, y, x - 1, c) + v(k, y, x + 1, c) -
                             4.0 * v(k, y, x, c);
          acc += lap * lap;
          ++n;
        }
  return acc / static_cast<double>(n);
}

// ---- datasets ------------------------------------------------------------------

const char* to_string(Split s) {
  switch (s) {
    case Split::Train:
      return "train";
    case Split::Val:
      return "val";
    case Split::Test:
      return "test";
  }
  return "?";
}

void DatasetConfig::validate() const {
  scene.validate();
  degradation.validate();
  if (!(val_fraction >= 0.0 && test_fraction >= 0.0 && val_fraction + test_fraction < 1.0))
    throw ContractViolation("dataset: split fractions must be non-negative and sum below 1");
  if (scene.height % degradation.factor != 0 || scene.width % degradation.factor != 0)
    throw ContractViolation("dataset: degradation factor must divide the canvas");
}

Split Dataset::split_of(Index i) const {
  if (i < 0 || i >= size()) throw ContractViolation("dataset: index out of range");
  if (i < n_train) return Split::Train;
  if (i < n_train + n_val) return Split::Val;
  return Split::Test;
}

std::vector<Index> Dataset::indices(Split s) const {
  Index lo = 0;
  Index n = n_train;
  if (s == Split::Val) {
    lo = n_train;
    n = n_val;
  } else if (s == Split::Test) {
    lo = n_train + n_val;
    n = n_test;
  }
  std::vector<Index> out(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = lo + i;
  return out;
}

VideoShape Dataset::shape() const {
  if (items.empty()) throw ContractViolation("dataset is empty");
  return items.front().hr.shape();
}

Dataset make_dataset(Index n, const DatasetConfig& cfg, std::uint64_t seed) {
  if (n < 1) throw ContractViolation("make_dataset: n must be >= 1");
  cfg.validate();
  Dataset ds;
  if (n >= 3) {
    ds.n_val = std::max<Index>(1, static_cast<Index>(std::floor(n * cfg.val_fraction)));
    ds.n_test = std::max<Index>(1, static_cast<Index>(std::floor(n * cfg.test_fraction)));
  }
  ds.n_train = n - ds.n_val - ds.n_test;
  ds.items.reserve(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    VideoPair p;
    p.item_seed = derive_seed(seed, {static_cast<std::uint64_t>(i)});
    p.scene = random_scene(cfg.scene, derive_seed(p.item_seed, {1}));
    p.hr = render_scene(p.scene);
    auto [lr, draw] = degrade(p.hr, cfg.degradation, derive_seed(p.item_seed, {2}));
    p.lr_up = std::move(lr);
    p.draw = draw;
    ds.items.push_back(std::move(p));
  }
  return ds;
}

namespace {

using nlohmann::json;

json scene_json(const SceneSpec& s) {
  json sprites = json::array();
  for (const Sprite& sp : s.sprites)
    sprites.push_back({{"shape", static_cast<int>(sp.shape)},
                       {"texture_seed", sp.texture_seed},
                       {"size", sp.size},
                       {"x0", sp.x0},
                       {"y0", sp.y0},
                       {"vx", sp.vx},
                       {"vy", sp.vy}});
  return {{"frames", s.frames},   {"height", s.height}, {"width", s.width},
          {"channels", s.channels}, {"sprites", sprites}, {"background_seed", s.background_seed},
          {"seed", s.seed}};
}

SceneSpec scene_from_json(const json& j) {
  SceneSpec s;
  s.frames = j.at("frames").get<Index>();
  s.height = j.at("height").get<Index>();
  s.width = j.at("width").get<Index>();
  s.channels = j.at("channels").get<Index>();
  s.background_seed = j.at("background_seed").get<std::uint64_t>();
  s.seed = j.at("seed").get<std::uint64_t>();
  for (const json& js : j.at("sprites")) {
    Sprite sp;
    sp.shape = static_cast<SpriteShape>(js.at("shape").get<int>());
    sp.texture_seed = js.at("texture_seed").get<std::uint64_t>();
    sp.size = js.at("size").get<int>();
    sp.x0 = js.at("x0").get<int>();
    sp.y0 = js.at("y0").get<int>();
    sp.vx = js.at("vx").get<int>();
    sp.vy = js.at("vy").get<int>();
    s.sprites.push_back(sp);
  }
  return s;
}

std::string item_name(const char* prefix, Index i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%05ld.bin", prefix, static_cast<long>(i));
  return buf;
}

}  // namespace

void export_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json items = json::array();
  for (Index i = 0; i < ds.size(); ++i) {
    const VideoPair& p = ds.items[static_cast<std::size_t>(i)];
    write_f64_blob(dir / item_name("hr", i), p.hr.array().data(), static_cast<std::size_t>(p.hr.numel()));
    write_f64_blob(dir / item_name("lr", i), p.lr_up.array().data(), static_cast<std::size_t>(p.lr_up.numel()));
    items.push_back({{"index", i},
                     {"split", to_string(ds.split_of(i))},
                     {"item_seed", p.item_seed},
                     {"hr", item_name("hr", i)},
                     {"lr", item_name("lr", i)},
                     {"scene", scene_json(p.scene)},
                     {"draw",
                      {{"blur_sigma", p.draw.blur_sigma},
                       {"noise_sigma", p.draw.noise_sigma},
                       {"noise_seed", p.draw.noise_seed},
                       {"cond_class", p.draw.cond_class}}}});
  }
  const VideoShape s = ds.shape();
  const json manifest{{"format", "vsrdistill-dataset"},
                      {"version", 1},
                      {"dtype", "float64"},
                      {"endianness", "little"},
                      {"shape", {s.frames, s.height, s.width, s.channels}},
                      {"n_train", ds.n_train},
                      {"n_val", ds.n_val},
                      {"n_test", ds.n_test},
                      {"items", items}};
  std::ofstream out(dir / "manifest.json");
  if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(1) << "\n";
}

Dataset import_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("missing dataset manifest in " + dir.string());
  json m;
  try {
    m = json::parse(in);
  } catch (const json::exception& e) {
    throw IoError("dataset manifest: " + std::string(e.what()));
  }
  if (m.value("format", "") != "vsrdistill-dataset" || m.value("version", 0) != 1)
    throw IoError("dataset manifest: unsupported format or version");
  const auto dims = m.at("shape").get<std::vector<Index>>();
  if (dims.size() != 4) throw IoError("dataset manifest: shape must have 4 entries");
  const VideoShape s{dims[0], dims[1], dims[2], dims[3]};
  Dataset ds;
  ds.n_train = m.at("n_train").get<Index>();
  ds.n_val = m.at("n_val").get<Index>();
  ds.n_test = m.at("n_test").get<Index>();
  for (const json& it : m.at("items")) {
    VideoPair p;
    p.item_seed = it.at("item_seed").get<std::uint64_t>();
    p.scene = scene_from_json(it.at("scene"));
    const json& d = it.at("draw");
    p.draw.blur_sigma = d.at("blur_sigma").get<double>();
    p.draw.noise_sigma = d.at("noise_sigma").get<double>();
    p.draw.noise_seed = d.at("noise_seed").get<std::uint64_t>();
    p.draw.cond_class = d.at("cond_class").get<int>();
    const auto n = static_cast<std::size_t>(s.numel());
    const auto hr = read_f64_blob(dir / it.at("hr").get<std::string>(), n);
    const auto lr = read_f64_blob(dir / it.at("lr").get<std::string>(), n);
    p.hr = LatentVideo(s, Eigen::Map<const Eigen::ArrayXd>(hr.data(), s.numel()));
    p.lr_up = LatentVideo(s, Eigen::Map<const Eigen::ArrayXd>(lr.data(), s.numel()));
    ds.items.push_back(std::move(p));
  }
  if (ds.size() != ds.n_train + ds.n_val + ds.n_test) throw IoError("dataset manifest: split sizes do not add up");
  return ds;
}

}  // namespace vsrd::data
