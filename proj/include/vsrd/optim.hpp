#pragma once

#include "vsrd/denoiser.hpp"

namespace vsrd {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Rescale the gradient to this global norm when exceeded; 0 disables.
  double clip_norm = 0.0;
};

/// Adaptive-moment optimizer over a ParamSet. State is plain data so it can be
/// checkpointed and restored bitwise.
class Adam {
 public:
  Adam() = default;
  explicit Adam(AdamConfig config) : config_(config) {}

  /// Applies one update in place. Returns the pre-clipping gradient norm.
  double step(ParamSet& params, const ParamSet& grads);
  void reset();

  const AdamConfig& config() const { return config_; }
  void set_lr(double lr) { config_.lr = lr; }
  long steps() const { return steps_; }

  /// Moment arrays under "m/<name>" and "v/<name>".
  ParamSet state() const;
  void load_state(const ParamSet& state, long steps);

 private:
  AdamConfig config_{};
  ParamSet m_;
  ParamSet v_;
  long steps_ = 0;
};

}  // namespace vsrd
