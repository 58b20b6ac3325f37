#pragma once

// Flow-matching primitives on the straight path z_t = (1 - t) z0 + t eps,
// with t = 0 clean data and t = 1 pure noise. Every operation exists as an
// expression-returning template over Eigen arrays and as a shape-checked
// overload on Video.

#include <Eigen/Core>

#include <span>
#include <string>
#include <vector>

#include "vsrd/video.hpp"

namespace vsrd::flow {

/// Diffusion time in [0, 1].
class Timestep {
 public:
  explicit Timestep(double t) : t_(t) {
    if (!(t >= 0.0 && t <= 1.0)) throw ContractViolation("timestep outside [0,1]: " + std::to_string(t));
  }
  double value() const { return t_; }
  operator double() const { return t_; }

 private:
  double t_;
};

/// Conditioning side channel of every denoiser call. The embedding itself is
/// owned by the model: `cond_class` indexes its learned class table, and
/// `is_null` selects its learned null embedding instead.
struct ConditionBundle {
  LatentVideo lr_latent;
  int cond_class = 0;
  bool is_null = false;

  ConditionBundle as_null() const { return ConditionBundle{lr_latent, cond_class, true}; }
};

// ---- expression forms -----------------------------------------------------

template <typename D0, typename D1>
auto diffuse(const Eigen::ArrayBase<D0>& z0, const Eigen::ArrayBase<D1>& eps, typename D0::Scalar t) {
  using S = typename D0::Scalar;
  return (S(1) - t) * z0.derived() + t * eps.derived();
}

template <typename D0, typename D1>
auto velocity_target(const Eigen::ArrayBase<D0>& z0, const Eigen::ArrayBase<D1>& eps) {
  return eps.derived() - z0.derived();
}

template <typename D0, typename D1>
auto predict_clean(const Eigen::ArrayBase<D0>& z_t, const Eigen::ArrayBase<D1>& v, typename D0::Scalar t) {
  return z_t.derived() - t * v.derived();
}

/// s = -(z_t + (1 - t) v) / t. Undefined at t = 0.
template <typename D0, typename D1>
auto score_from_velocity(const Eigen::ArrayBase<D0>& z_t, const Eigen::ArrayBase<D1>& v, typename D0::Scalar t) {
  using S = typename D0::Scalar;
  if (!(t > S(0))) throw DomainError("score_from_velocity: t must be > 0");
  return -(z_t.derived() + (S(1) - t) * v.derived()) / t;
}

/// (1 + w) v_cond - w v_uncond; w = 0 is the plain conditional velocity.
template <typename D0, typename D1>
auto cfg_velocity(const Eigen::ArrayBase<D0>& v_cond, const Eigen::ArrayBase<D1>& v_uncond,
                  typename D0::Scalar w) {
  using S = typename D0::Scalar;
  return (S(1) + w) * v_cond.derived() - w * v_uncond.derived();
}

template <typename D0, typename D1>
auto euler_step(const Eigen::ArrayBase<D0>& z_t, const Eigen::ArrayBase<D1>& v, typename D0::Scalar t,
                typename D0::Scalar t_next) {
  if (t_next > t) throw ContractViolation("euler_step: t_next must not exceed t");
  return z_t.derived() + (t_next - t) * v.derived();
}

// ---- Video forms ----------------------------------------------------------

template <typename S>
Video<S> diffuse(const Video<S>& z0, const Video<S>& eps, Timestep t) {
  require_same_shape(z0, eps, "diffuse");
  return Video<S>(z0.shape(), diffuse(z0.array(), eps.array(), S(t.value())));
}

template <typename S>
Video<S> velocity_target(const Video<S>& z0, const Video<S>& eps) {
  require_same_shape(z0, eps, "velocity_target");
  return Video<S>(z0.shape(), velocity_target(z0.array(), eps.array()));
}

template <typename S>
Video<S> predict_clean(const Video<S>& z_t, const Video<S>& v, Timestep t) {
  require_same_shape(z_t, v, "predict_clean");
  return Video<S>(z_t.shape(), predict_clean(z_t.array(), v.array(), S(t.value())));
}

template <typename S>
Video<S> score_from_velocity(const Video<S>& z_t, const Video<S>& v, Timestep t) {
  require_same_shape(z_t, v, "score_from_velocity");
  return Video<S>(z_t.shape(), score_from_velocity(z_t.array(), v.array(), S(t.value())));
}

template <typename S>
Video<S> cfg_velocity(const Video<S>& v_cond, const Video<S>& v_uncond, double w) {
  require_same_shape(v_cond, v_uncond, "cfg_velocity");
  if (!(w >= 0.0)) throw ContractViolation("cfg_velocity: guidance weight must be >= 0");
  return Video<S>(v_cond.shape(), cfg_velocity(v_cond.array(), v_uncond.array(), S(w)));
}

template <typename S>
Video<S> euler_step(const Video<S>& z_t, const Video<S>& v, Timestep t, Timestep t_next) {
  require_same_shape(z_t, v, "euler_step");
  return Video<S>(z_t.shape(), euler_step(z_t.array(), v.array(), S(t.value()), S(t_next.value())));
}

/// A diffused sample together with the noise that produced it.
struct NoisySample {
  LatentVideo z_t;
  Timestep t;
  LatentVideo eps;

  /// Builds z_t from (z0, eps, t); the interpolation invariant holds by construction.
  static NoisySample make(const LatentVideo& z0, const LatentVideo& eps, Timestep t) {
    return NoisySample{diffuse(z0, eps, t), t, eps};
  }
};

// ---- sampling -------------------------------------------------------------

/// Uniform grid 1 = t_0 > t_1 > ... > t_steps = 0.
std::vector<double> uniform_schedule(int steps);

/// Throws unless the schedule starts at 1, decreases strictly and ends at 0.
void validate_schedule(std::span<const double> schedule);

/// Euler integration of the velocity ODE from pure noise to data.
/// `velocity(z, Timestep)` returns the model velocity for state `z`; the
/// state may be a Video or any Eigen array.
template <typename State, typename VelocityFn>
State sample(VelocityFn&& velocity, std::span<const double> schedule, State eps) {
  validate_schedule(schedule);
  State z = std::move(eps);
  for (std::size_t i = 0; i + 1 < schedule.size(); ++i) {
    const Timestep t(schedule[i]);
    const Timestep t_next(schedule[i + 1]);
    const State v = velocity(z, t);
    if constexpr (requires { z.shape(); }) {
      z = euler_step(z, v, t, t_next);
    } else {
      z = euler_step(z, v, t.value(), t_next.value()).eval();
    }
  }
  return z;
}

}  // namespace vsrd::flow
