// Shared-parameter cross-modal encoder.
//
// One parameter set encodes both (reference image, manipulation text) and
// (target image, target caption). The block is a single-head cross-attention
// from K+1 learnable query rows (row 0 is CLS) onto the stacked image and text
// feature rows, followed by a tanh feed-forward, both with residuals, a linear
// projection to the embedding width and row-wise L2 normalization:
//
//   X  = [cls; q]                      (K+1) x d
//   F  = [image; text]                 N x d
//   A  = softmax(X Wq (F Wk)^T / sqrt(d))
//   H1 = X + A F Wv
//   H2 = H1 + tanh(H1 W1) W2
//   Z  = rownorm(H2 Wo)                (K+1) x d_e
//
// There are no positional terms, so every query row is processed
// independently of the others.

#ifndef CSMCIR_ENCODER_HPP
#define CSMCIR_ENCODER_HPP

#include <cstddef>
#include <string_view>

#include "csmcir/numerics.hpp"

namespace csmcir {

struct EncoderDims {
  std::size_t feature_dim = 16;  // d
  std::size_t embed_dim = 16;    // d_e
  std::size_t ff_dim = 32;       // d_ff
  std::size_t num_query_tokens = 4;  // K

  bool operator==(const EncoderDims&) const = default;
};

/// Every learnable tensor. Gradients use the same type.
struct EncoderParams {
  EncoderDims dims;
  Matrix query_tokens;  // K x d
  Matrix cls_token;     // 1 x d
  Matrix w_query;       // d x d
  Matrix w_key;         // d x d
  Matrix w_value;       // d x d
  Matrix w_ff1;         // d x d_ff
  Matrix w_ff2;         // d_ff x d
  Matrix w_out;         // d x d_e
  Matrix alpha;         // 1 x K, token weights of the cosine alignment loss

  static EncoderParams zeros(const EncoderDims& dims);
  /// Scaled-normal weights, alpha = 1.
  static EncoderParams initialize(const EncoderDims& dims, Rng& rng);

  /// Visits (name, tensor) in a fixed order. Checkpoints and the optimizer
  /// both rely on this order.
  template <typename Fn>
  void for_each_tensor(Fn&& fn) {
    fn(std::string_view("query_tokens"), query_tokens);
    fn(std::string_view("cls_token"), cls_token);
    fn(std::string_view("w_query"), w_query);
    fn(std::string_view("w_key"), w_key);
    fn(std::string_view("w_value"), w_value);
    fn(std::string_view("w_ff1"), w_ff1);
    fn(std::string_view("w_ff2"), w_ff2);
    fn(std::string_view("w_out"), w_out);
    fn(std::string_view("alpha"), alpha);
  }
  template <typename Fn>
  void for_each_tensor(Fn&& fn) const {
    const_cast<EncoderParams*>(this)->for_each_tensor(
        [&](std::string_view name, Matrix& m) { fn(name, static_cast<const Matrix&>(m)); });
  }

  std::size_t parameter_count() const;
  /// Flattened copy in for_each_tensor order; the inverse is assign_flat.
  Vector flatten() const;
  void assign_flat(std::span<const double> flat);

  /// Throws ContractError on wrong shapes, NonFiniteError on NaN/Inf.
  void validate() const;

  EncoderParams& operator+=(const EncoderParams& other);
  bool operator==(const EncoderParams&) const = default;
};

struct ModalPair {
  Matrix image_features;  // P x d
  Matrix text_features;   // Tn x d
};

/// Build a pair from one image row and one text row.
ModalPair make_modal_pair(std::span<const double> image, std::span<const double> text);

struct EncoderOutput {
  Matrix tokens;  // (K+1) x d_e, row 0 = CLS

  std::size_t num_query_tokens() const { return tokens.rows() - 1; }
};

EncoderOutput encode(const EncoderParams& params, const ModalPair& pair);

/// Query-side embedding u: the CLS row.
Vector query_embedding(const EncoderOutput& out);

struct TargetSelection {
  Vector embedding;
  std::size_t row = 0;  // in 1..K; lowest index wins ties
};

/// Target-side embedding v: the query-token row most similar to `u`.
TargetSelection target_embedding(const EncoderOutput& out, std::span<const double> u);

/// Reverse-mode gradient of sum(upstream ⊙ encode(params, pair).tokens) with
/// respect to every tensor except alpha (which the encoder does not use).
EncoderParams encode_backward(const EncoderParams& params, const ModalPair& pair,
                              const Matrix& upstream);

/// Same as encode_backward but accumulates into `grads`.
void encode_backward_accumulate(const EncoderParams& params, const ModalPair& pair,
                                const Matrix& upstream, EncoderParams& grads);

}  // namespace csmcir

#endif  // CSMCIR_ENCODER_HPP
