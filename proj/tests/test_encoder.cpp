#include <doctest.h>

#include <cmath>

#include "csmcir/encoder.hpp"
#include "csmcir/error.hpp"
#include "test_support.hpp"

using namespace csmcir;
using csmcir::testing::random_unit;
using csmcir::testing::random_unit_rows;

namespace {

ModalPair random_pair(std::size_t d, Rng& rng, std::size_t image_rows = 1, std::size_t text_rows = 1) {
  return ModalPair{random_unit_rows(image_rows, d, rng), random_unit_rows(text_rows, d, rng)};
}

double weighted_sum(const Matrix& tokens, const Matrix& upstream) {
  double s = 0.0;
  for (std::size_t i = 0; i < tokens.size(); ++i) s += tokens.values()[i] * upstream.values()[i];
  return s;
}

}  // namespace

TEST_CASE("encode output shape and unit rows") {
  for (std::size_t k : {1, 4, 32}) {
    Rng rng(k);
    const EncoderDims dims{8, 6, 12, k};
    const EncoderParams p = EncoderParams::initialize(dims, rng);
    const EncoderOutput out = encode(p, random_pair(8, rng, 2, 3));
    REQUIRE(out.tokens.rows() == k + 1);
    REQUIRE(out.tokens.cols() == 6);
    for (std::size_t r = 0; r < out.tokens.rows(); ++r) CHECK(std::abs(norm(out.tokens.row(r)) - 1.0) < 1e-12);
  }
}

TEST_CASE("one encode path serves both roles and is deterministic") {
  Rng rng(1);
  const EncoderParams p = EncoderParams::initialize(EncoderDims{}, rng);
  const ModalPair pair = random_pair(16, rng);
  const EncoderOutput as_query = encode(p, pair);
  const EncoderOutput as_target = encode(p, pair);
  CHECK(as_query.tokens == as_target.tokens);
}

TEST_CASE("permuting query tokens permutes rows 1..K and leaves CLS unchanged") {
  Rng rng(2);
  const EncoderDims dims{16, 16, 32, 5};
  EncoderParams p = EncoderParams::initialize(dims, rng);
  const ModalPair pair = random_pair(16, rng);
  const EncoderOutput base = encode(p, pair);

  std::vector<std::size_t> perm = {3, 0, 4, 1, 2};
  EncoderParams q = p;
  for (std::size_t k = 0; k < 5; ++k) {
    std::copy(p.query_tokens.row(perm[k]).begin(), p.query_tokens.row(perm[k]).end(), q.query_tokens.row(k).begin());
  }
  const EncoderOutput permuted = encode(q, pair);
  CHECK(csmcir::testing::max_abs_diff(permuted.tokens.row(0), base.tokens.row(0)) == 0.0);
  for (std::size_t k = 0; k < 5; ++k) {
    CHECK(csmcir::testing::max_abs_diff(permuted.tokens.row(k + 1), base.tokens.row(perm[k] + 1)) <= 1e-15);
  }
}

TEST_CASE("query_embedding returns row 0 with unit norm") {
  Rng rng(3);
  const EncoderParams p = EncoderParams::initialize(EncoderDims{}, rng);
  const EncoderOutput out = encode(p, random_pair(16, rng));
  const Vector u = query_embedding(out);
  CHECK(u == out.tokens.row_copy(0));
  CHECK(std::abs(norm(u) - 1.0) < 1e-12);
  const Vector u2 = query_embedding(encode(p, random_pair(16, rng)));
  CHECK(csmcir::testing::max_abs_diff(u, u2) > 1e-6);
}

TEST_CASE("target_embedding selection rules") {
  const Vector u = {1.0, 0.0, 0.0};
  EncoderOutput out{Matrix{{0.0, 1.0, 0.0}, {0.0, 0.0, 1.0}, {1.0, 0.0, 0.0}, {0.0, 1.0, 0.0}}};
  auto sel = target_embedding(out, u);
  CHECK(sel.row == 2);
  CHECK(sel.embedding == u);

  EncoderOutput same{Matrix{{0.0, 1.0, 0.0}, {0.6, 0.8, 0.0}, {0.6, 0.8, 0.0}, {0.6, 0.8, 0.0}}};
  CHECK(target_embedding(same, u).row == 1);

  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    EncoderOutput r{random_unit_rows(5, 6, rng)};
    const Vector q = random_unit(6, rng);
    std::size_t best = 1;
    for (std::size_t k = 2; k <= 4; ++k)
      if (dot(r.tokens.row(k), q) > dot(r.tokens.row(best), q)) best = k;
    CHECK(target_embedding(r, q).row == best);
  }
}

TEST_CASE("encode_backward: zero upstream gives zero gradient") {
  Rng rng(5);
  const EncoderParams p = EncoderParams::initialize(EncoderDims{6, 5, 7, 3}, rng);
  const EncoderParams g = encode_backward(p, random_pair(6, rng), Matrix(4, 5));
  for (double x : g.flatten()) CHECK(x == 0.0);
}

TEST_CASE("encode_backward matches central differences") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(100 + seed);
    const EncoderDims dims{6, 5, 7, 3};
    const EncoderParams p = EncoderParams::initialize(dims, rng);
    const ModalPair pair = random_pair(6, rng, 1 + rng.below(2), 1 + rng.below(2));
    const Matrix upstream = random_normal(4, 5, 1.0, rng);
    const Vector analytic = encode_backward(p, pair, upstream).flatten();
    const ScalarFn f = [&](std::span<const double> x) {
      EncoderParams probe = p;
      probe.assign_flat(x);
      return weighted_sum(encode(probe, pair).tokens, upstream);
    };
    const Vector numeric = finite_diff_grad(f, p.flatten(), 1e-5);
    CAPTURE(seed);
    CHECK(relative_error(analytic, numeric) < 1e-4);
  }
}

TEST_CASE("upstream on CLS only leaves query-token gradients zero") {
  Rng rng(6);
  const EncoderParams p = EncoderParams::initialize(EncoderDims{6, 5, 7, 3}, rng);
  Matrix upstream(4, 5);
  for (double& x : upstream.row(0)) x = rng.normal();
  const EncoderParams g = encode_backward(p, random_pair(6, rng), upstream);
  for (double x : g.query_tokens.values()) CHECK(x == 0.0);
  CHECK(norm(g.cls_token.values()) > 0.0);
}

TEST_CASE("encode_backward_accumulate sums gradients") {
  Rng rng(7);
  const EncoderParams p = EncoderParams::initialize(EncoderDims{6, 5, 7, 3}, rng);
  const ModalPair a = random_pair(6, rng), b = random_pair(6, rng);
  const Matrix ua = random_normal(4, 5, 1.0, rng), ub = random_normal(4, 5, 1.0, rng);
  EncoderParams acc = EncoderParams::zeros(p.dims);
  encode_backward_accumulate(p, a, ua, acc);
  encode_backward_accumulate(p, b, ub, acc);
  EncoderParams sum = encode_backward(p, a, ua);
  sum += encode_backward(p, b, ub);
  CHECK(relative_error(acc.flatten(), sum.flatten()) < 1e-14);
}

TEST_CASE("parameter contracts") {
  Rng rng(8);
  EncoderParams p = EncoderParams::initialize(EncoderDims{}, rng);
  CHECK_NOTHROW(p.validate());
  for (double a : p.alpha.values()) CHECK(a == 1.0);
  CHECK(p.flatten().size() == p.parameter_count());
  EncoderParams copy = EncoderParams::zeros(p.dims);
  copy.assign_flat(p.flatten());
  CHECK(copy == p);
  p.w_key(0, 0) = NAN;
  CHECK_THROWS_AS(p.validate(), NonFiniteError);
  CHECK_THROWS_AS(encode(EncoderParams::initialize(EncoderDims{}, rng), random_pair(8, rng)), ContractError);
}
