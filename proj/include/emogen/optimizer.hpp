#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

#include "emogen/errors.hpp"
#include "emogen/model.hpp"

namespace emogen {

struct AdamHyper {
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Bias-corrected Adam on one tensor; `step` is the 1-based step number.
template <typename T>
void adam_update(Matrix<T>& param, const Matrix<T>& grad, Matrix<T>& m, Matrix<T>& v,
                 const AdamHyper& hp, std::uint64_t step) {
  const double c1 = 1.0 - std::pow(hp.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(hp.beta2, static_cast<double>(step));
  const auto b1 = static_cast<T>(hp.beta1), b2 = static_cast<T>(hp.beta2);
  const auto lr = static_cast<T>(hp.learning_rate), eps = static_cast<T>(hp.epsilon);
  const auto inv_c1 = static_cast<T>(1.0 / c1), inv_c2 = static_cast<T>(1.0 / c2);
  T* p = param.data();
  const T* g = grad.data();
  T* mp = m.data();
  T* vp = v.data();
  for (Eigen::Index i = 0; i < param.size(); ++i) {
    mp[i] = b1 * mp[i] + (T(1) - b1) * g[i];
    vp[i] = b2 * vp[i] + (T(1) - b2) * g[i] * g[i];
    const T mhat = mp[i] * inv_c1;
    const T vhat = vp[i] * inv_c2;
    p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

template <typename T>
struct OptimizerState {
  ParameterSet<T> first_moment;
  ParameterSet<T> second_moment;
  std::uint64_t step = 0;
  AdamHyper hyper;

  OptimizerState() = default;
  OptimizerState(const ParameterSet<T>& like, AdamHyper hp)
      : first_moment(zeros_like(like)), second_moment(zeros_like(like)), hyper(hp) {}
};

// Applies one update in place. A non-finite gradient anywhere rejects the
// whole step before anything is modified.
template <typename T>
void adam_step(ParameterSet<T>& params, const ParameterSet<T>& grads, OptimizerState<T>& state) {
  auto p = tensors(params);
  auto g = tensors(grads);
  auto m = tensors(state.first_moment);
  auto v = tensors(state.second_moment);
  if (p.size() != g.size() || p.size() != m.size() || p.size() != v.size()) {
    throw std::invalid_argument("adam_step: parameter, gradient and moment layouts differ");
  }
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i].value->rows() != g[i].value->rows() || p[i].value->cols() != g[i].value->cols() ||
        p[i].value->rows() != m[i].value->rows() || p[i].value->cols() != m[i].value->cols()) {
      throw std::invalid_argument("adam_step: shape mismatch in " + p[i].name);
    }
    if (!g[i].value->allFinite()) throw RuntimeFailure("non-finite gradient in " + g[i].name);
  }
  ++state.step;
  for (std::size_t i = 0; i < p.size(); ++i) {
    adam_update(*p[i].value, *g[i].value, *m[i].value, *v[i].value, state.hyper, state.step);
  }
}

}  // namespace emogen
