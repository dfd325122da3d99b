#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "csmcir/error.hpp"
#include "csmcir/eval.hpp"
#include "csmcir/kernels.hpp"
#include "test_support.hpp"

using namespace csmcir;
using namespace csmcir::eval;
using csmcir::testing::random_unit_rows;

namespace {

RankingResult from_ranks(const std::vector<std::size_t>& ranks) {
  RankingResult r;
  r.ground_truth_rank = ranks;
  r.ground_truth.assign(ranks.size(), 0);
  r.order.assign(ranks.size(), {});
  return r;
}

// Ground-truth rank by counting strictly better items and tied lower indices.
std::size_t counting_rank(const Matrix& s, std::size_t q, std::size_t gt) {
  std::size_t rank = 1;
  for (std::size_t g = 0; g < s.cols(); ++g)
    if (s(q, g) > s(q, gt) || (s(q, g) == s(q, gt) && g < gt)) ++rank;
  return rank;
}

}  // namespace

TEST_CASE("self retrieval ranks first") {
  Rng rng(1);
  const Matrix g = random_unit_rows(20, 6, rng);
  Matrix q(1, 6);
  std::copy(g.row(7).begin(), g.row(7).end(), q.row(0).begin());
  const std::vector<std::size_t> gt = {7};
  CHECK(rank_gallery(q, g, gt).ground_truth_rank[0] == 1);
}

TEST_CASE("two-item gallery ordering follows the score difference") {
  const Matrix q{{1.0, 0.0}};
  const Matrix g{{0.2, 0.98}, {0.9, 0.1}};
  const std::vector<std::size_t> gt = {0};
  const auto r = rank_gallery(q, g, gt);
  CHECK(r.order[0] == std::vector<std::uint32_t>{1, 0});
  CHECK(r.ground_truth_rank[0] == 2);
}

TEST_CASE("ranking agrees with an independent sort oracle") {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t nq = 1 + rng.below(10), ng = 1 + rng.below(40);
    const Matrix q = random_unit_rows(nq, 5, rng);
    const Matrix g = random_unit_rows(ng, 5, rng);
    std::vector<std::size_t> gt(nq);
    for (auto& x : gt) x = rng.below(ng);
    const auto r = rank_gallery(q, g, gt);
    const Matrix s = kernels::serial::similarity(q, g);
    for (std::size_t i = 0; i < nq; ++i) {
      std::vector<std::uint32_t> idx(ng);
      std::iota(idx.begin(), idx.end(), 0u);
      std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return s(i, a) != s(i, b) ? s(i, a) > s(i, b) : a < b; });
      CHECK(r.order[i] == idx);
      CHECK(r.ground_truth_rank[i] == counting_rank(s, i, gt[i]));
    }
  }
}

TEST_CASE("recall_at_k counting") {
  const auto r = from_ranks({1, 3, 7, 2});
  const int k5[] = {5};
  CHECK(recall_at_k(r, k5).at(5) == 0.75);
  const int many[] = {1, 2, 3, 7, 100};
  const auto m = recall_at_k(r, many);
  CHECK(m.at(1) == 0.25);
  CHECK(m.at(2) == 0.5);
  CHECK(m.at(3) == 0.75);
  CHECK(m.at(7) == 1.0);
  CHECK(m.at(100) == 1.0);
  const int bad[] = {0};
  CHECK_THROWS_AS(recall_at_k(r, bad), ContractError);
  const int neg[] = {-1};
  CHECK_THROWS_AS(recall_at_k(r, neg), ContractError);
}

TEST_CASE("perfect ranking and saturation") {
  Rng rng(3);
  const Matrix g = random_unit_rows(15, 8, rng);
  std::vector<std::size_t> gt(15);
  std::iota(gt.begin(), gt.end(), 0);
  const auto r = rank_gallery(g, g, gt);
  const int ks[] = {1, 15, 20};
  const auto m = recall_at_k(r, ks);
  CHECK(m.at(1) == 1.0);
  CHECK(m.at(15) == 1.0);
  CHECK(m.at(20) == 1.0);
}

TEST_CASE("recall is non-decreasing in K and permutation invariant") {
  Rng rng(4);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t nq = 8, ng = 30;
    const Matrix q = random_unit_rows(nq, 4, rng);
    const Matrix g = random_unit_rows(ng, 4, rng);
    std::vector<std::size_t> gt(nq);
    for (auto& x : gt) x = rng.below(ng);
    const auto r = rank_gallery(q, g, gt);
    std::vector<int> ks(ng);
    std::iota(ks.begin(), ks.end(), 1);
    const auto m = recall_at_k(r, ks);
    for (int k = 2; k <= static_cast<int>(ng); ++k) CHECK(m.at(k) >= m.at(k - 1));

    std::vector<std::size_t> perm(ng);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    Matrix pg(ng, 4);
    std::vector<std::size_t> pgt(nq);
    for (std::size_t i = 0; i < ng; ++i) std::copy(g.row(perm[i]).begin(), g.row(perm[i]).end(), pg.row(i).begin());
    for (std::size_t i = 0; i < nq; ++i) pgt[i] = static_cast<std::size_t>(std::find(perm.begin(), perm.end(), gt[i]) - perm.begin());
    CHECK(recall_at_k(rank_gallery(q, pg, pgt), ks) == m);
  }
}

TEST_CASE("subset recall") {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t nq = 6, ng = 25;
    const Matrix q = random_unit_rows(nq, 4, rng);
    const Matrix g = random_unit_rows(ng, 4, rng);
    std::vector<std::size_t> gt(nq);
    std::vector<std::vector<std::size_t>> subsets(nq), singletons(nq);
    for (std::size_t i = 0; i < nq; ++i) {
      gt[i] = rng.below(ng);
      std::vector<std::size_t> pool(ng);
      std::iota(pool.begin(), pool.end(), 0);
      rng.shuffle(pool);
      subsets[i] = {gt[i]};
      for (std::size_t c : pool)
        if (subsets[i].size() < 6 && c != gt[i]) subsets[i].push_back(c);
      rng.shuffle(subsets[i]);
      singletons[i] = {gt[i]};
    }
    const auto r = rank_gallery(q, g, gt);
    const int ks[] = {1, 2, 3};
    const auto sub = subset_recall_at_k(r, subsets, ks);
    // Oracle: sort each subset by score.
    const Matrix s = kernels::serial::similarity(q, g);
    std::map<int, double> expect;
    for (int k : ks) {
      std::size_t hits = 0;
      for (std::size_t i = 0; i < nq; ++i) {
        auto c = subsets[i];
        std::sort(c.begin(), c.end(), [&](auto a, auto b) { return s(i, a) != s(i, b) ? s(i, a) > s(i, b) : a < b; });
        const auto pos = static_cast<int>(std::find(c.begin(), c.end(), gt[i]) - c.begin());
        hits += pos < k ? 1 : 0;
      }
      expect[k] = static_cast<double>(hits) / nq;
    }
    CHECK(sub == expect);
    const auto global = recall_at_k(r, ks);
    for (int k : ks) CHECK(sub.at(k) >= global.at(k));
    for (const auto& [k, v] : subset_recall_at_k(r, singletons, ks)) CHECK(v == 1.0);
  }
}

TEST_CASE("subset recall contract") {
  const Matrix q{{1.0, 0.0}};
  const Matrix g{{1.0, 0.0}, {0.0, 1.0}};
  const std::vector<std::size_t> gt = {0};
  const auto r = rank_gallery(q, g, gt);
  const int ks[] = {1};
  CHECK_THROWS_AS(subset_recall_at_k(r, {{1}}, ks), ContractError);
  CHECK_THROWS_AS(rank_gallery(q, Matrix(0, 2), std::vector<std::size_t>{0}), ContractError);
}

TEST_CASE("metrics CSV and JSON lines") {
  MetricsRecord m;
  m.step = 100;
  m.loss_cl = 2.5;
  m.loss_cos = 0.125;
  m.loss_total = 2.625;
  m.recall = {{1, 0.25}, {5, 0.5}, {10, 0.75}, {50, 1.0}};
  m.subset_recall = {{1, 0.5}, {2, 0.75}, {3, 1.0}};
  CHECK(metrics_csv_header() ==
        "step,loss_cl,loss_cos,loss_total,recall@1,recall@5,recall@10,recall@50,subset_recall@1,subset_recall@2,subset_recall@3");
  CHECK(metrics_csv_row(m) == "100,2.5,0.125,2.625,0.25,0.5,0.75,1,0.5,0.75,1");
  CHECK(parse_metrics_json_line(metrics_json_line(m)) == m);

  MetricsRecord partial = m;
  partial.subset_recall.clear();
  CHECK(metrics_csv_row(partial) == "100,2.5,0.125,2.625,0.25,0.5,0.75,1,,,");

  const auto dir = csmcir::testing::scratch_dir("metrics");
  {
    MetricsWriter w(dir / "m.csv", dir / "m.jsonl");
    w.append(m);
  }
  {
    MetricsWriter w(dir / "m.csv", dir / "m.jsonl");
    w.append(partial);
  }
  const std::string csv = csmcir::testing::read_bytes(dir / "m.csv");
  CHECK(csv == metrics_csv_header() + "\n" + metrics_csv_row(m) + "\n" + metrics_csv_row(partial) + "\n");
}
