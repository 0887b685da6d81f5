// AdamW with decoupled weight decay, and the cosine learning-rate schedule.
#pragma once

#include "xmreid/encoder.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace xmreid {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

template <typename Scalar>
struct AdamWState {
  EncoderParams<Scalar> m, v;
  long step = 0;
};

template <typename Scalar>
AdamWState<Scalar> adamw_init(const EncoderParams<Scalar>& p) {
  return {zeros_like(p), zeros_like(p), 0};
}

// p <- p - lr * (wd * p + m_hat / (sqrt(v_hat) + eps))
template <typename Scalar>
void adamw_step(EncoderParams<Scalar>& params, const EncoderParams<Scalar>& grads, AdamWState<Scalar>& state, double lr,
                const AdamWConfig& cfg) {
  if (!(lr >= 0.0)) throw std::invalid_argument("adamw_step: negative learning rate");
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  const Scalar b1 = Scalar(cfg.beta1), b2 = Scalar(cfg.beta2);
  const Scalar step = Scalar(lr / c1), decay = Scalar(1.0 - lr * cfg.weight_decay);
  const Scalar root_c2 = Scalar(std::sqrt(c2)), eps = Scalar(cfg.eps);

  std::vector<const Matrix<Scalar>*> g;
  grads.for_each([&](const std::string&, const Matrix<Scalar>& x) { g.push_back(&x); });
  std::vector<Matrix<Scalar>*> m, v;
  state.m.for_each([&](const std::string&, Matrix<Scalar>& x) { m.push_back(&x); });
  state.v.for_each([&](const std::string&, Matrix<Scalar>& x) { v.push_back(&x); });
  std::size_t i = 0;
  params.for_each([&](const std::string& name, Matrix<Scalar>& p) {
    const Matrix<Scalar>& gi = *g[i];
    if (gi.rows() != p.rows() || gi.cols() != p.cols()) throw ShapeError("adamw_step: gradient shape mismatch at " + name);
    Matrix<Scalar>& mi = *m[i];
    Matrix<Scalar>& vi = *v[i];
    mi = b1 * mi + (Scalar(1) - b1) * gi;
    vi = b2 * vi + (Scalar(1) - b2) * gi.cwiseProduct(gi);
    p *= decay;
    p.array() -= step * mi.array() / (vi.array().sqrt() / root_c2 + eps);
    ++i;
  });
}

// base * (1 + cos(pi * t / (total - 1))) / 2: starts at base, ends at 0.
inline double cosine_lr(double base, long t, long total) {
  if (total < 1 || t < 0 || t >= total) throw std::out_of_range("cosine_lr: iteration outside schedule");
  if (total == 1) return base;
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(t) / static_cast<double>(total - 1)));
}

}  // namespace xmreid
