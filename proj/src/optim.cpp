#include "vsrd/optim.hpp"

#include <cmath>

namespace vsrd {

double Adam::step(ParamSet& params, const ParamSet& grads) {
  const double norm = global_norm(grads);
  if (!std::isfinite(norm)) throw ContractViolation("Adam: non-finite gradient");
  const double clip = (config_.clip_norm > 0.0 && norm > config_.clip_norm) ? config_.clip_norm / norm : 1.0;
  ++steps_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
  for (auto& [name, p] : params) {
    auto git = grads.find(name);
    if (git == grads.end()) throw ContractViolation("Adam: missing gradient for '" + name + "'");
    const Eigen::MatrixXd g = git->second * clip;
    auto [mit, m_new] = m_.try_emplace(name, Eigen::MatrixXd::Zero(p.rows(), p.cols()));
    auto [vit, v_new] = v_.try_emplace(name, Eigen::MatrixXd::Zero(p.rows(), p.cols()));
    Eigen::MatrixXd& m = mit->second;
    Eigen::MatrixXd& v = vit->second;
    m = config_.beta1 * m + (1.0 - config_.beta1) * g;
    v = config_.beta2 * v + (1.0 - config_.beta2) * g.cwiseProduct(g);
    p.array() -= config_.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + config_.eps);
  }
  return norm;
}

void Adam::reset() {
  m_.clear();
  v_.clear();
  steps_ = 0;
}

ParamSet Adam::state() const {
  ParamSet s;
  for (const auto& [k, m] : m_) s.emplace("m/" + k, m);
  for (const auto& [k, v] : v_) s.emplace("v/" + k, v);
  return s;
}

void Adam::load_state(const ParamSet& state, long steps) {
  reset();
  for (const auto& [k, a] : state) {
    if (k.rfind("m/", 0) == 0) m_.emplace(k.substr(2), a);
    else if (k.rfind("v/", 0) == 0) v_.emplace(k.substr(2), a);
    else throw ContractViolation("Adam: unexpected state entry '" + k + "'");
  }
  steps_ = steps;
}

}  // namespace vsrd
