#pragma once

// Synthetic paired video data: textured sprites translating over a textured
// background with integer velocities, so motion, flow and occlusion are known
// exactly. A blur -> downsample -> noise -> upsample chain produces the
// degraded input at the original resolution.

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "vsrd/video.hpp"

namespace vsrd::data {

enum class SpriteShape { Disc, Box, Diamond };

struct Sprite {
  SpriteShape shape = SpriteShape::Box;
  std::uint64_t texture_seed = 0;
  int size = 8;  // bounding-box edge in pixels
  int x0 = 0;    // top-left corner in frame 0
  int y0 = 0;
  int vx = 0;  // pixels per frame
  int vy = 0;
};

/// Sprites are drawn in list order, later sprites on top. Positions are
/// clamped so every sprite stays fully on the canvas.
struct SceneSpec {
  Index frames = 8;
  Index height = 32;
  Index width = 32;
  Index channels = 3;
  std::vector<Sprite> sprites;
  std::uint64_t background_seed = 0;
  std::uint64_t seed = 0;

  VideoShape shape() const { return VideoShape{frames, height, width, channels}; }
  void validate() const;
  /// Clamped top-left corner of sprite `s` in frame `k`.
  std::pair<int, int> position(std::size_t s, Index k) const;
};

struct SceneConfig {
  Index frames = 8;
  Index height = 32;
  Index width = 32;
  Index channels = 3;
  int min_sprites = 1;
  int max_sprites = 3;
  int min_size = 6;
  int max_size = 14;
  int max_speed = 2;
  void validate() const;
};

SceneSpec random_scene(const SceneConfig& cfg, std::uint64_t seed);

LatentVideo render_scene(const SceneSpec& spec);

/// Per-pixel index of the topmost layer (0 = background, s + 1 = sprite s),
/// as a (frames, height, width, 1) clip.
Video<int> label_map(const SceneSpec& spec);

/// Forward displacement of each pixel's content from frame k to k + 1, stored
/// as a (frames - 1, height, width, 2) clip with channels (dx, dy).
using FlowField = LatentVideo;

FlowField gt_flow(const SceneSpec& spec);

/// 1 where the content at (k, y, x) is still visible at its displaced position
/// in frame k + 1, else 0. Shape (frames - 1, height, width, 1).
LatentVideo visibility_mask(const SceneSpec& spec);

/// Backward warp: out(k, p) = video(k + 1, p + flow(k, p)), bilinear, border clamped.
LatentVideo warp_to_previous(const LatentVideo& video, const FlowField& flow);

// ---- degradation -------------------------------------------------------------

struct DegradationConfig {
  double blur_sigma_min = 0.4;
  double blur_sigma_max = 2.0;
  int factor = 4;
  double noise_sigma_min = 0.0;
  double noise_sigma_max = 0.08;
  std::string upsample = "bicubic";  // or "bilinear"
  int num_classes = 4;               // blur-strength bins used as the condition class

  void validate() const;
  int class_of(double blur_sigma) const;
};

struct DegradationDraw {
  double blur_sigma = 0.0;
  double noise_sigma = 0.0;
  std::uint64_t noise_seed = 0;
  int cond_class = 0;
};

/// Separable Gaussian blur of every frame, reflect padding. sigma = 0 is the identity.
LatentVideo gaussian_blur(const LatentVideo& v, double sigma);
/// Mean over factor x factor blocks.
LatentVideo area_downsample(const LatentVideo& v, int factor);
/// Resampling with half-pixel centres; kernel "bicubic" (a = -0.5) or "bilinear".
LatentVideo upsample(const LatentVideo& v, int factor, const std::string& kernel);

std::pair<LatentVideo, DegradationDraw> degrade(const LatentVideo& hr, const DegradationConfig& cfg,
                                                std::uint64_t seed);

/// Mean squared 5-point Laplacian over all frames and channels.
double hf_energy(const LatentVideo& v);

// ---- datasets ------------------------------------------------------------------

struct VideoPair {
  LatentVideo hr;
  LatentVideo lr_up;
  SceneSpec scene;
  DegradationDraw draw;
  std::uint64_t item_seed = 0;
};

enum class Split { Train, Val, Test };
const char* to_string(Split s);

struct DatasetConfig {
  SceneConfig scene;
  DegradationConfig degradation;
  double val_fraction = 1.0 / 18.0;
  double test_fraction = 1.0 / 18.0;
  void validate() const;
};

/// Items are ordered train, then val, then test.
struct Dataset {
  std::vector<VideoPair> items;
  Index n_train = 0;
  Index n_val = 0;
  Index n_test = 0;

  Index size() const { return static_cast<Index>(items.size()); }
  Split split_of(Index i) const;
  std::vector<Index> indices(Split s) const;
  VideoShape shape() const;
};

Dataset make_dataset(Index n, const DatasetConfig& cfg, std::uint64_t seed);

/// Directory layout: manifest.json plus hr_NNNNN.bin / lr_NNNNN.bin per item.
void export_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset import_dataset(const std::filesystem::path& dir);

}  // namespace vsrd::data
