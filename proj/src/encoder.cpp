#include "csmcir/encoder.hpp"

#include <cmath>

#include "csmcir/error.hpp"

namespace csmcir {

namespace {

void require_shape(const Matrix& m, std::size_t rows, std::size_t cols, std::string_view name) {
  if (m.rows() != rows || m.cols() != cols) {
    throw ContractError("EncoderParams: tensor " + std::string(name) + " has shape " +
                        std::to_string(m.rows()) + "x" + std::to_string(m.cols()) +
                        ", expected " + std::to_string(rows) + "x" + std::to_string(cols));
  }
}

struct ForwardTrace {
  Matrix x;      // (K+1) x d
  Matrix f;      // N x d
  Matrix qm;     // X Wq
  Matrix km;     // F Wk
  Matrix vm;     // F Wv
  Matrix attn;   // softmax weights, (K+1) x N
  Matrix h1;     // X + A Vm
  Matrix g;      // tanh(H1 W1)
  Matrix h2;     // H1 + G W2
  Matrix y;      // H2 Wo
  Vector y_norm;
  Matrix z;      // rownorm(Y)
};

void check_pair(const EncoderParams& params, const ModalPair& pair) {
  const std::size_t d = params.dims.feature_dim;
  if (pair.image_features.rows() == 0 || pair.text_features.rows() == 0) {
    throw ContractError("encode: image and text features must each have at least one row");
  }
  if (pair.image_features.cols() != d || pair.text_features.cols() != d) {
    throw ContractError("encode: feature width does not match encoder feature_dim");
  }
}

ForwardTrace forward(const EncoderParams& p, const ModalPair& pair) {
  check_pair(p, pair);
  ForwardTrace t;
  const double scale = 1.0 / std::sqrt(static_cast<double>(p.dims.feature_dim));
  t.x = vstack(p.cls_token, p.query_tokens);
  t.f = vstack(pair.image_features, pair.text_features);
  t.qm = matmul(t.x, p.w_query);
  t.km = matmul(t.f, p.w_key);
  t.vm = matmul(t.f, p.w_value);

  Matrix scores = matmul_nt(t.qm, t.km);
  scores *= scale;
  t.attn = Matrix(scores.rows(), scores.cols());
  for (std::size_t r = 0; r < scores.rows(); ++r) {
    Vector s = softmax_row(scores.row(r));
    std::copy(s.begin(), s.end(), t.attn.row(r).begin());
  }

  t.h1 = t.x;
  t.h1 += matmul(t.attn, t.vm);
  t.g = matmul(t.h1, p.w_ff1);
  for (double& v : t.g.values()) v = std::tanh(v);
  t.h2 = t.h1;
  t.h2 += matmul(t.g, p.w_ff2);
  t.y = matmul(t.h2, p.w_out);

  t.z = t.y;
  t.y_norm.resize(t.y.rows());
  for (std::size_t r = 0; r < t.y.rows(); ++r) {
    const double n = norm(t.y.row(r));
    if (!(n > 0.0) || !std::isfinite(n)) throw NonFiniteError("encode: degenerate output row");
    t.y_norm[r] = n;
    for (double& v : t.z.row(r)) v /= n;
  }
  return t;
}

}  // namespace

EncoderParams EncoderParams::zeros(const EncoderDims& dims) {
  const std::size_t d = dims.feature_dim;
  const std::size_t k = dims.num_query_tokens;
  if (d == 0 || dims.embed_dim == 0 || dims.ff_dim == 0 || k == 0) {
    throw ContractError("EncoderDims: every dimension must be positive");
  }
  EncoderParams p;
  p.dims = dims;
  p.query_tokens = Matrix(k, d);
  p.cls_token = Matrix(1, d);
  p.w_query = Matrix(d, d);
  p.w_key = Matrix(d, d);
  p.w_value = Matrix(d, d);
  p.w_ff1 = Matrix(d, dims.ff_dim);
  p.w_ff2 = Matrix(dims.ff_dim, d);
  p.w_out = Matrix(d, dims.embed_dim);
  p.alpha = Matrix(1, k);
  return p;
}

EncoderParams EncoderParams::initialize(const EncoderDims& dims, Rng& rng) {
  EncoderParams p = zeros(dims);
  const double d = static_cast<double>(dims.feature_dim);
  const double ff = static_cast<double>(dims.ff_dim);
  p.query_tokens = random_normal(dims.num_query_tokens, dims.feature_dim, 1.0 / std::sqrt(d), rng);
  p.cls_token = random_normal(1, dims.feature_dim, 1.0 / std::sqrt(d), rng);
  p.w_query = random_normal(dims.feature_dim, dims.feature_dim, 1.0 / std::sqrt(d), rng);
  p.w_key = random_normal(dims.feature_dim, dims.feature_dim, 1.0 / std::sqrt(d), rng);
  p.w_value = random_normal(dims.feature_dim, dims.feature_dim, 1.0 / std::sqrt(d), rng);
  p.w_ff1 = random_normal(dims.feature_dim, dims.ff_dim, 1.0 / std::sqrt(d), rng);
  p.w_ff2 = random_normal(dims.ff_dim, dims.feature_dim, 1.0 / std::sqrt(ff), rng);
  p.w_out = random_normal(dims.feature_dim, dims.embed_dim, 1.0 / std::sqrt(d), rng);
  p.alpha.fill(1.0);
  return p;
}

std::size_t EncoderParams::parameter_count() const {
  std::size_t n = 0;
  for_each_tensor([&](std::string_view, const Matrix& m) { n += m.size(); });
  return n;
}

Vector EncoderParams::flatten() const {
  Vector flat;
  flat.reserve(parameter_count());
  for_each_tensor([&](std::string_view, const Matrix& m) {
    flat.insert(flat.end(), m.values().begin(), m.values().end());
  });
  return flat;
}

void EncoderParams::assign_flat(std::span<const double> flat) {
  if (flat.size() != parameter_count()) throw ContractError("assign_flat: length mismatch");
  std::size_t offset = 0;
  for_each_tensor([&](std::string_view, Matrix& m) {
    auto dst = m.values();
    std::copy(flat.begin() + static_cast<std::ptrdiff_t>(offset),
              flat.begin() + static_cast<std::ptrdiff_t>(offset + dst.size()), dst.begin());
    offset += dst.size();
  });
}

void EncoderParams::validate() const {
  const std::size_t d = dims.feature_dim;
  const std::size_t k = dims.num_query_tokens;
  if (k == 0) throw ContractError("EncoderParams: K must be at least 1");
  require_shape(query_tokens, k, d, "query_tokens");
  require_shape(cls_token, 1, d, "cls_token");
  require_shape(w_query, d, d, "w_query");
  require_shape(w_key, d, d, "w_key");
  require_shape(w_value, d, d, "w_value");
  require_shape(w_ff1, d, dims.ff_dim, "w_ff1");
  require_shape(w_ff2, dims.ff_dim, d, "w_ff2");
  require_shape(w_out, d, dims.embed_dim, "w_out");
  require_shape(alpha, 1, k, "alpha");
  for_each_tensor([](std::string_view name, const Matrix& m) {
    if (!all_finite(m.values())) {
      throw NonFiniteError("EncoderParams: non-finite entry in " + std::string(name));
    }
  });
}

EncoderParams& EncoderParams::operator+=(const EncoderParams& other) {
  if (!(dims == other.dims)) throw ContractError("EncoderParams +=: dimension mismatch");
  query_tokens += other.query_tokens;
  cls_token += other.cls_token;
  w_query += other.w_query;
  w_key += other.w_key;
  w_value += other.w_value;
  w_ff1 += other.w_ff1;
  w_ff2 += other.w_ff2;
  w_out += other.w_out;
  alpha += other.alpha;
  return *this;
}

ModalPair make_modal_pair(std::span<const double> image, std::span<const double> text) {
  return ModalPair{Matrix::row_vector(image), Matrix::row_vector(text)};
}

EncoderOutput encode(const EncoderParams& params, const ModalPair& pair) {
  return EncoderOutput{forward(params, pair).z};
}

Vector query_embedding(const EncoderOutput& out) { return out.tokens.row_copy(0); }

TargetSelection target_embedding(const EncoderOutput& out, std::span<const double> u) {
  if (out.tokens.rows() < 2) throw ContractError("target_embedding: no query-token rows");
  TargetSelection best;
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t r = 1; r < out.tokens.rows(); ++r) {
    const double s = dot(out.tokens.row(r), u);
    if (s > best_score) {
      best_score = s;
      best.row = r;
    }
  }
  best.embedding = out.tokens.row_copy(best.row);
  return best;
}

EncoderParams encode_backward(const EncoderParams& params, const ModalPair& pair,
                              const Matrix& upstream) {
  EncoderParams grads = EncoderParams::zeros(params.dims);
  encode_backward_accumulate(params, pair, upstream, grads);
  return grads;
}

void encode_backward_accumulate(const EncoderParams& p, const ModalPair& pair,
                                const Matrix& upstream, EncoderParams& grads) {
  const std::size_t rows = p.dims.num_query_tokens + 1;
  if (upstream.rows() != rows || upstream.cols() != p.dims.embed_dim) {
    throw ContractError("encode_backward: upstream gradient shape mismatch");
  }
  if (!(grads.dims == p.dims)) throw ContractError("encode_backward: gradient dims mismatch");
  const ForwardTrace t = forward(p, pair);

  // Through row normalization: dY = (dZ - z (z . dZ)) / |y|.
  Matrix dy(rows, p.dims.embed_dim);
  for (std::size_t r = 0; r < rows; ++r) {
    auto z = t.z.row(r);
    auto dz = upstream.row(r);
    const double proj = dot(z, dz);
    auto out = dy.row(r);
    for (std::size_t c = 0; c < out.size(); ++c) out[c] = (dz[c] - z[c] * proj) / t.y_norm[r];
  }

  grads.w_out += matmul_tn(t.h2, dy);
  Matrix dh2 = matmul_nt(dy, p.w_out);

  grads.w_ff2 += matmul_tn(t.g, dh2);
  Matrix dpre = matmul_nt(dh2, p.w_ff2);
  for (std::size_t i = 0; i < dpre.size(); ++i) {
    const double g = t.g.values()[i];
    dpre.values()[i] *= 1.0 - g * g;
  }
  grads.w_ff1 += matmul_tn(t.h1, dpre);
  Matrix dh1 = dh2;
  dh1 += matmul_nt(dpre, p.w_ff1);

  // H1 = X + A Vm.
  Matrix dx = dh1;
  Matrix dattn = matmul_nt(dh1, t.vm);
  Matrix dvm = matmul_tn(t.attn, dh1);

  // Softmax rows: dS = A ⊙ (dA - rowsum(dA ⊙ A)), then the 1/sqrt(d) scale.
  const double scale = 1.0 / std::sqrt(static_cast<double>(p.dims.feature_dim));
  Matrix ds(dattn.rows(), dattn.cols());
  for (std::size_t r = 0; r < ds.rows(); ++r) {
    const double inner = dot(dattn.row(r), t.attn.row(r));
    for (std::size_t c = 0; c < ds.cols(); ++c) {
      ds(r, c) = t.attn(r, c) * (dattn(r, c) - inner) * scale;
    }
  }
  Matrix dqm = matmul(ds, t.km);
  Matrix dkm = matmul_tn(ds, t.qm);

  grads.w_query += matmul_tn(t.x, dqm);
  dx += matmul_nt(dqm, p.w_query);
  grads.w_key += matmul_tn(t.f, dkm);
  grads.w_value += matmul_tn(t.f, dvm);

  for (std::size_t c = 0; c < p.dims.feature_dim; ++c) grads.cls_token(0, c) += dx(0, c);
  for (std::size_t r = 1; r < rows; ++r)
    for (std::size_t c = 0; c < p.dims.feature_dim; ++c) grads.query_tokens(r - 1, c) += dx(r, c);
}

}  // namespace csmcir
