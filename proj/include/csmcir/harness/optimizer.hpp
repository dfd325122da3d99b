#ifndef CSMCIR_HARNESS_OPTIMIZER_HPP
#define CSMCIR_HARNESS_OPTIMIZER_HPP

#include <cstdint>

#include "csmcir/encoder.hpp"

namespace csmcir::harness {

struct AdamWHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.05;
};

/// First and second moments, shaped like the parameters.
struct AdamWState {
  EncoderParams first_moment;
  EncoderParams second_moment;
  std::uint64_t step = 0;

  static AdamWState zeros(const EncoderDims& dims);
  bool operator==(const AdamWState&) const = default;
};

/// Decoupled weight decay Adam:
///   p <- p - lr (m_hat / (sqrt(v_hat) + eps) + wd p)
/// Throws NonFiniteError (leaving params and state untouched) on NaN/Inf grads.
void adamw_step(EncoderParams& params, const EncoderParams& grads, AdamWState& state, double lr,
                const AdamWHyper& hyper);

/// lr0 * 0.5 * (1 + cos(pi * step / total)).
double cosine_lr(std::uint64_t step, std::uint64_t total, double lr0);

}  // namespace csmcir::harness

#endif  // CSMCIR_HARNESS_OPTIMIZER_HPP
