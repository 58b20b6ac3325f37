#pragma once

// Velocity network shared by teacher, student, real-score and fake-score
// models: spatio-temporal patch tokens, full attention blocks with adaptive
// (timestep + condition) modulation, and tapped intermediate features for the
// feature discriminator.

#include <Eigen/Core>

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "vsrd/autograd.hpp"
#include "vsrd/flowcore.hpp"
#include "vsrd/video.hpp"

namespace vsrd {

/// Named parameter arrays. Ordered, so iteration order is deterministic.
using ParamSet = std::map<std::string, Eigen::MatrixXd>;

Index param_count(const ParamSet& p);
bool all_finite(const ParamSet& p);
bool bitwise_equal(const ParamSet& a, const ParamSet& b);
double global_norm(const ParamSet& p);
ParamSet zeros_like(const ParamSet& p);

struct DenoiserConfig {
  int channels = 3;     // latent channels C
  int depth = 6;        // attention blocks
  int width = 64;       // token channels
  int heads = 4;
  int mlp_ratio = 4;
  int patch = 4;        // spatial patch edge
  int patch_t = 2;      // temporal patch length
  int cond_dim = 16;    // condition-embedding dimension d_c
  int num_classes = 4;  // degradation classes with a learned embedding each
  std::vector<double> feature_fractions{0.3, 0.6, 0.9};
  // Adds the exact velocity of the model HR ~ N(LR, prior_var) to the network
  // output, so the network only learns the correction.
  bool prior_velocity = true;
  double prior_var = 0.006;

  /// Tapped block indices (1-based): fractions of depth, rounded, deduplicated.
  std::vector<int> feature_taps() const;
  void validate() const;
  bool operator==(const DenoiserConfig&) const = default;
};

/// Tiny configuration used by gradient checks and fast tests.
DenoiserConfig tiny_config();

struct DenoiserParams {
  DenoiserConfig config;
  ParamSet tensors;
};

DenoiserParams init_params(const DenoiserConfig& config, std::uint64_t seed);

/// Token grid of a clip after patching.
struct TokenGrid {
  Index frames = 0;
  Index height = 0;
  Index width = 0;
  Index count() const { return frames * height * width; }
  bool operator==(const TokenGrid&) const = default;
};

TokenGrid token_grid(const DenoiserConfig& config, const VideoShape& shape);

/// Tapped activations, one (tokens x channels) array per level.
struct FeatureStack {
  std::vector<Eigen::MatrixXd> levels;
  TokenGrid grid;
};

/// Parameters entered onto a tape, either as trainable leaves or constants.
struct Binding {
  ad::Tape* tape = nullptr;
  std::map<std::string, ad::Var> vars;
  const ad::Var& at(const std::string& name) const;
};

Binding bind_params(ad::Tape& tape, const ParamSet& params, bool trainable);
/// Gradients of the last backward pass for every bound tensor (zeros if unreached).
ParamSet gradients(const Binding& binding);

/// A clip on the tape: a (numel x 1) column in Video storage order.
ad::Var video_var(ad::Tape& tape, const LatentVideo& v, bool trainable = false);
LatentVideo to_video(const ad::Var& v, const VideoShape& shape);

struct ForwardResult {
  ad::Var velocity;  // (numel x 1)
  std::vector<ad::Var> features;
  TokenGrid grid;
};

/// Differentiable forward pass. `z_t` is a (numel x 1) node of `shape`; the
/// LR latent enters by channel concatenation before the first block.
ForwardResult denoiser_forward(const Binding& params, const DenoiserConfig& config, const ad::Var& z_t,
                      const VideoShape& shape, double t, const flow::ConditionBundle& cond, bool with_features);

LatentVideo denoise(const DenoiserParams& params, const LatentVideo& z_t, flow::Timestep t,
                    const flow::ConditionBundle& cond);

std::pair<LatentVideo, FeatureStack> denoise_with_features(const DenoiserParams& params, const LatentVideo& z_t,
                                                            flow::Timestep t, const flow::ConditionBundle& cond);

// ---- discriminator heads ----------------------------------------------------

struct HeadConfig {
  int levels = 3;
  int in_channels = 128;  // concatenated real + fake feature channels
  int hidden = 32;
  bool operator==(const HeadConfig&) const = default;
};

/// Heads sized for concatenated real/fake features of `config`.
HeadConfig head_config_for(const DenoiserConfig& config, int hidden = 32);

/// Two-layer convolutional heads: 3x3 spatial conv -> SiLU -> 1x1 conv to a
/// logit map. The final layer is zero-initialized unless `zero_final` is false.
struct DiscriminatorHeads {
  HeadConfig config;
  ParamSet tensors;
};

DiscriminatorHeads init_heads(const HeadConfig& config, std::uint64_t seed, bool zero_final = true);

struct DiscResult {
  std::vector<ad::Var> logit_maps;  // one (tokens x 1) map per level
  ad::Var value;                    // 1x1: mean over levels and positions
};

DiscResult disc_forward(const Binding& heads, const HeadConfig& config, const std::vector<ad::Var>& features,
                        const TokenGrid& grid);

struct DiscOutput {
  std::vector<Eigen::MatrixXd> logit_maps;
  double value = 0.0;
};

DiscOutput disc_forward(const DiscriminatorHeads& heads, const FeatureStack& features);

/// Per-level channel concatenation of two stacks with the same grid.
FeatureStack concat_features(const FeatureStack& a, const FeatureStack& b);
std::vector<ad::Var> concat_features(const std::vector<ad::Var>& a, const std::vector<ad::Var>& b);

// ---- codec -----------------------------------------------------------------

/// Pixel <-> latent map. Non-identity codecs must declare their shape map.
class Codec {
 public:
  virtual ~Codec() = default;
  virtual LatentVideo encode(const LatentVideo& video) const = 0;
  virtual LatentVideo decode(const LatentVideo& latent) const = 0;
  virtual VideoShape latent_shape(const VideoShape& video_shape) const = 0;
};

class IdentityCodec final : public Codec {
 public:
  LatentVideo encode(const LatentVideo& video) const override { return video; }
  LatentVideo decode(const LatentVideo& latent) const override { return latent; }
  VideoShape latent_shape(const VideoShape& video_shape) const override { return video_shape; }
};

}  // namespace vsrd
