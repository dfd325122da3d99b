#include "csmcir/harness/optimizer.hpp"

#include <cmath>
#include <numbers>

#include "csmcir/error.hpp"

namespace csmcir::harness {

AdamWState AdamWState::zeros(const EncoderDims& dims) {
  return AdamWState{EncoderParams::zeros(dims), EncoderParams::zeros(dims), 0};
}

void adamw_step(EncoderParams& params, const EncoderParams& grads, AdamWState& state, double lr,
                const AdamWHyper& h) {
  if (!(params.dims == grads.dims) || !(params.dims == state.first_moment.dims)) {
    throw ContractError("adamw_step: shape mismatch between params, grads and state");
  }
  bool finite = true;
  grads.for_each_tensor([&](std::string_view, const Matrix& g) { finite = finite && all_finite(g.values()); });
  if (!finite) throw NonFiniteError("adamw_step: non-finite gradient, step aborted");

  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(h.beta1, t);
  const double c2 = 1.0 - std::pow(h.beta2, t);

  std::vector<Matrix*> p_list, m_list, v_list;
  std::vector<const Matrix*> g_list;
  params.for_each_tensor([&](std::string_view, Matrix& m) { p_list.push_back(&m); });
  state.first_moment.for_each_tensor([&](std::string_view, Matrix& m) { m_list.push_back(&m); });
  state.second_moment.for_each_tensor([&](std::string_view, Matrix& m) { v_list.push_back(&m); });
  grads.for_each_tensor([&](std::string_view, const Matrix& m) { g_list.push_back(&m); });

  for (std::size_t k = 0; k < p_list.size(); ++k) {
    auto p = p_list[k]->values();
    auto m = m_list[k]->values();
    auto v = v_list[k]->values();
    auto g = g_list[k]->values();
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
      v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      p[i] -= lr * h.weight_decay * p[i];
      p[i] -= lr * m_hat / (std::sqrt(v_hat) + h.epsilon);
    }
  }
}

double cosine_lr(std::uint64_t step, std::uint64_t total, double lr0) {
  if (total == 0) return lr0;
  const double frac = static_cast<double>(std::min(step, total)) / static_cast<double>(total);
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

}  // namespace csmcir::harness
