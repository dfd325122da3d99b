// Serial reference vs OpenMP kernels on training- and evaluation-sized inputs.

#include <benchmark/benchmark.h>

#include "csmcir/encoder.hpp"
#include "csmcir/kernels.hpp"

namespace {

using namespace csmcir;

Matrix unit_rows(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  Matrix m = random_normal(n, d, 1.0, rng);
  for (std::size_t r = 0; r < n; ++r) {
    const Vector v = l2_normalize(m.row(r));
    std::copy(v.begin(), v.end(), m.row(r).begin());
  }
  return m;
}

template <bool Parallel>
void BM_Similarity(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Matrix a = unit_rows(n, 16, 1), b = unit_rows(n, 16, 2);
  for (auto _ : state) {
    benchmark::DoNotOptimize(Parallel ? kernels::omp::similarity(a, b) : kernels::serial::similarity(a, b));
  }
}

template <bool Parallel>
void BM_SoftmaxEntropy(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Matrix logits = kernels::serial::similarity(unit_rows(n, 16, 3), unit_rows(n, 16, 4));
  for (auto _ : state) {
    benchmark::DoNotOptimize(Parallel ? kernels::omp::softmax_entropy_rows(logits, true)
                                      : kernels::serial::softmax_entropy_rows(logits, true));
  }
}

template <bool Parallel>
void BM_MaxTokenScores(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Matrix q = unit_rows(n, 16, 5), tokens = unit_rows(4 * n, 16, 6);
  for (auto _ : state) {
    benchmark::DoNotOptimize(Parallel ? kernels::omp::max_token_scores(q, tokens, 4)
                                      : kernels::serial::max_token_scores(q, tokens, 4));
  }
}

template <bool Parallel>
void BM_Argsort(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Matrix s = kernels::serial::similarity(unit_rows(n, 16, 7), unit_rows(n, 16, 8));
  for (auto _ : state) {
    benchmark::DoNotOptimize(Parallel ? kernels::omp::argsort_rows_desc(s) : kernels::serial::argsort_rows_desc(s));
  }
}

template <bool Parallel>
void BM_EncodeAll(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(9);
  const EncoderParams params = EncoderParams::initialize(EncoderDims{}, rng);
  const Matrix img = unit_rows(n, 16, 10), txt = unit_rows(n, 16, 11);
  std::vector<ModalPair> pairs;
  for (std::size_t i = 0; i < n; ++i) pairs.push_back(make_modal_pair(img.row(i), txt.row(i)));
  for (auto _ : state) {
    benchmark::DoNotOptimize(Parallel ? kernels::omp::encode_all(params, pairs)
                                      : kernels::serial::encode_all(params, pairs));
  }
}

}  // namespace

BENCHMARK(BM_Similarity<false>)->Name("similarity/serial")->Arg(64)->Arg(256)->Arg(1024);
BENCHMARK(BM_Similarity<true>)->Name("similarity/omp")->Arg(64)->Arg(256)->Arg(1024);
BENCHMARK(BM_SoftmaxEntropy<false>)->Name("softmax_entropy/serial")->Arg(64)->Arg(256);
BENCHMARK(BM_SoftmaxEntropy<true>)->Name("softmax_entropy/omp")->Arg(64)->Arg(256);
BENCHMARK(BM_MaxTokenScores<false>)->Name("max_token_scores/serial")->Arg(256)->Arg(1024);
BENCHMARK(BM_MaxTokenScores<true>)->Name("max_token_scores/omp")->Arg(256)->Arg(1024);
BENCHMARK(BM_Argsort<false>)->Name("argsort_rows/serial")->Arg(256)->Arg(1024);
BENCHMARK(BM_Argsort<true>)->Name("argsort_rows/omp")->Arg(256)->Arg(1024);
BENCHMARK(BM_EncodeAll<false>)->Name("encode_all/serial")->Arg(64)->Arg(256);
BENCHMARK(BM_EncodeAll<true>)->Name("encode_all/omp")->Arg(64)->Arg(256);

BENCHMARK_MAIN();
