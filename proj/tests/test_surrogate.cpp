// Surrogate family checks: capacity-plan arithmetic, quadrature exactness at
// p = n, sizing guards, MLP layout accounting, initialization contracts, and
// stack round trips.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <vector>

#include "kvs/model.hpp"
#include "kvs/oracle.hpp"
#include "kvs/surrogate.hpp"
#include "kvs/tensor.hpp"

using namespace kvs;

namespace {

Matrix random_rows(int rows, int cols, std::uint64_t seed) {
  Prng g(seed);
  Matrix m(0, cols);
  for (int i = 0; i < rows; ++i) {
    Vector r(cols);
    for (int j = 0; j < cols; ++j) r[j] = g.next_gaussian();
    m.append_row(r);
  }
  return m;
}

Vector random_vec(int dim, std::uint64_t seed) {
  Prng g(seed);
  Vector v(dim);
  for (int i = 0; i < dim; ++i) v[i] = g.next_gaussian();
  return v;
}

}  // namespace

TEST_CASE("uniform capacity plan matches the budget formula") {
  // rho * 2 n d per module; uniform multipliers keep every layer equal.
  CapacityPlan plan = plan_capacity(0.1, 1024, 16, 4, 2);
  REQUIRE(plan.per_layer_budget.size() == 4);
  for (std::int64_t b : plan.per_layer_budget) {
    CHECK(b == static_cast<std::int64_t>(0.1 * 2 * 1024 * 16));  // 3276
  }
  CHECK(plan.planned_total() == 4 * 2 * 3276);
  CHECK(static_cast<double>(plan.planned_total()) ==
        doctest::Approx(plan.target_total()).epsilon(0.01));
}

TEST_CASE("weighted capacity plan follows the multipliers") {
  std::vector<CapacityGroup> groups = {{0, 1, 1.0}, {1, 2, 2.0}, {2, 3, 5.0}, {3, 4, 2.0}};
  CapacityPlan plan = plan_capacity(0.1, 4096, 16, 4, 2, groups);
  // budget(l) = floor(rho * 2nd * mult_l * L / sum mult), sum = 10.
  const double base = 0.1 * 2 * 4096 * 16;
  CHECK(plan.per_layer_budget[0] == static_cast<std::int64_t>(base * 1.0 * 4 / 10));
  CHECK(plan.per_layer_budget[1] == static_cast<std::int64_t>(base * 2.0 * 4 / 10));
  CHECK(plan.per_layer_budget[2] == static_cast<std::int64_t>(base * 5.0 * 4 / 10));
  CHECK(plan.per_layer_budget[3] == static_cast<std::int64_t>(base * 2.0 * 4 / 10));
  // Redistribution conserves the total up to floor loss.
  CHECK(plan.planned_total() <= static_cast<std::int64_t>(plan.target_total()));
  CHECK(static_cast<double>(plan.planned_total()) >= plan.target_total() * 0.999);
}

TEST_CASE("capacity plan rejects bad group covers and arguments") {
  CHECK_THROWS_AS((void)plan_capacity(0.0, 1024, 16, 4, 2), std::invalid_argument);
  CHECK_THROWS_AS((void)plan_capacity(-0.1, 1024, 16, 4, 2), std::invalid_argument);
  // Gap in the cover.
  std::vector<CapacityGroup> gap = {{0, 2, 1.0}, {3, 4, 1.0}};
  CHECK_THROWS_AS((void)plan_capacity(0.1, 1024, 16, 4, 2, gap), std::invalid_argument);
  // Overlap.
  std::vector<CapacityGroup> overlap = {{0, 3, 1.0}, {2, 4, 1.0}};
  CHECK_THROWS_AS((void)plan_capacity(0.1, 1024, 16, 4, 2, overlap), std::invalid_argument);
  // Non-positive multiplier.
  std::vector<CapacityGroup> nonpos = {{0, 4, 0.0}};
  CHECK_THROWS_AS((void)plan_capacity(0.1, 1024, 16, 4, 2, nonpos), std::invalid_argument);
}

TEST_CASE("quadrature sizing and parameter count") {
  CHECK(size_quadrature_to_budget(3276, 16) == 102);  // floor(3276 / 32)
  CHECK(quad_param_count(102, 16) == 2 * 102 * 16);
  CHECK(size_quadrature_to_budget(32, 16) == 1);
  CHECK_THROWS_AS((void)size_quadrature_to_budget(31, 16), std::invalid_argument);
}

TEST_CASE("quadrature initialised from the first cache rows") {
  Matrix k = random_rows(10, 8, 41);
  Matrix v = random_rows(10, 8, 42);
  QuadratureModule m = quad_init_from_cache(k, v, 4);
  REQUIRE(m.p == 4);
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 8; ++j) {
      CHECK(m.w.at(i, j) == k.at(i, j));
      CHECK(m.z.at(i, j) == v.at(i, j));
    }
  }
  CHECK_THROWS_AS((void)quad_init_from_cache(k, v, 11), std::invalid_argument);
}

TEST_CASE("quadrature with p = n reproduces the oracle exactly") {
  const int n = 24, d = 8;
  Matrix k = random_rows(n, d, 51);
  Matrix v = random_rows(n, d, 52);
  QuadratureModule m = quad_init_from_cache(k, v, n);
  for (int trial = 0; trial < 20; ++trial) {
    Vector q = random_vec(d, 100 + trial);
    CHECK(quad_score(m, q) == doctest::Approx(score_alpha(q, k)).epsilon(1e-14));
    Vector a = target_A(q, k, v);
    Vector t = quad_target(m, q);
    for (int i = 0; i < d; ++i) CHECK(t[i] == doctest::Approx(a[i]).epsilon(1e-13));
  }
}

TEST_CASE("mlp layout accounting is exact") {
  MlpShape shape;  // (0, 2, 3) defaults
  MlpDims dims{0, 4, 6};
  const int d = 16;
  MlpLayout layout = mlp_layout(shape, dims, d);
  // Score chain: layer0 u(4x16)+b(4) = 68, layer1 v(4x16)+u(4x4)+b(4) = 84,
  // final 1x4+1 = 5 -> 157.
  // Target chain: layer0 6x16+6 = 102, layers 1,2: (6x16+6x6+6) = 138 each,
  // final 16x6+16 = 112 -> 490.
  CHECK(mlp_param_count(shape, dims, d) == 157 + 490);
  CHECK(layout.total == 157 + 490);
  CHECK(layout.score.layers.size() == 2);
  CHECK(layout.target.layers.size() == 3);
  CHECK(layout.backbone.empty());
  CHECK(layout.score.layers[0].off_v == -1);
  CHECK(layout.score.layers[1].off_v >= 0);
  CHECK(layout.score.out == 1);
  CHECK(layout.target.out == d);

  // A backbone shares its trunk: heads then read the backbone output.
  MlpShape with_backbone = shape;
  with_backbone.depth_backbone = 1;
  MlpDims bd{5, 3, 4};
  MlpLayout bl = mlp_layout(with_backbone, bd, d);
  CHECK(bl.backbone.size() == 1);
  CHECK(bl.score.layers[0].in == 5);   // chain input is the backbone output
  CHECK(bl.target.layers[0].in == 5);
  CHECK(mlp_param_count(with_backbone, bd, d) == bl.total);
}

TEST_CASE("size_mlp_to_budget fits the budget and grows with it") {
  MlpShape shape;
  const int d = 16;
  const std::int64_t budget = 3276;
  MlpDims dims = size_mlp_to_budget(budget, d, shape);
  CHECK(dims.w_score >= 1);
  CHECK(dims.w_target >= 1);
  CHECK(mlp_param_count(shape, dims, d) <= budget);

  // Bumping both widths must overflow: the search picked maximal widths.
  MlpDims bumped{dims.w_backbone, dims.w_score + 1, dims.w_target + 1};
  CHECK(mlp_param_count(shape, bumped, d) > budget);

  // Monotone in the budget, and much larger budgets use most of it.
  MlpDims big = size_mlp_to_budget(10 * budget, d, shape);
  CHECK(big.w_score >= dims.w_score);
  CHECK(big.w_target > dims.w_target);
  CHECK(mlp_param_count(shape, big, d) <= 10 * budget);
  CHECK(mlp_param_count(shape, big, d) > 8 * budget);

  CHECK_THROWS_AS((void)size_mlp_to_budget(20, d, shape), std::invalid_argument);
}

TEST_CASE("mlp initialisation zeroes the final projections") {
  MlpShape shape;
  MlpDims dims{0, 4, 6};
  Prng g(61);
  MlpModule m = mlp_init(shape, dims, 16, g);
  REQUIRE(static_cast<std::int64_t>(m.params.size()) == m.layout.total);
  // Zero-init output layers make the initial prediction exactly (0, 0).
  for (int trial = 0; trial < 5; ++trial) {
    auto [score, target] = mlp_forward(m, random_vec(16, 200 + trial));
    CHECK(score == 0.0);
    for (int i = 0; i < 16; ++i) CHECK(target[i] == 0.0);
  }
  // Hidden layers are not all zero.
  double hidden_norm = 0.0;
  for (std::int64_t i = 0; i < m.layout.score.off_w; ++i) {
    hidden_norm += m.params[static_cast<std::size_t>(i)] * m.params[static_cast<std::size_t>(i)];
  }
  CHECK(hidden_norm > 0.0);
}

TEST_CASE("mlp variants (residual, layer_norm, backbone) produce finite distinct outputs") {
  const int d = 16;
  Vector q = random_vec(d, 77);
  auto run = [&](MlpShape shape, std::uint64_t seed) {
    MlpDims dims = size_mlp_to_budget(1200, d, shape);
    Prng g(seed);
    MlpModule m = mlp_init(shape, dims, d, g);
    // Perturb the final layers so outputs are informative.
    Prng p(seed + 1);
    for (double& x : m.params) {
      if (x == 0.0) x = 0.05 * p.next_gaussian();
    }
    return mlp_forward(m, q);
  };
  MlpShape plain;
  MlpShape with_res = plain;
  with_res.residual = true;
  with_res.depth_target = 4;
  MlpShape with_ln = plain;
  with_ln.layer_norm = true;
  MlpShape with_bb = plain;
  with_bb.depth_backbone = 2;

  auto [s0, t0] = run(plain, 500);
  auto [s1, t1] = run(with_res, 500);
  auto [s2, t2] = run(with_ln, 500);
  auto [s3, t3] = run(with_bb, 500);
  for (const auto* t : {&t0, &t1, &t2, &t3}) {
    for (int i = 0; i < d; ++i) CHECK(std::isfinite((*t)[i]));
  }
  CHECK(std::isfinite(s0));
  CHECK(std::isfinite(s1));
  CHECK(std::isfinite(s2));
  CHECK(std::isfinite(s3));
  // Different wiring, different function.
  CHECK(squared_distance(t0, t2) > 0.0);
  CHECK(squared_distance(t0, t3) > 0.0);
}

TEST_CASE("stack init: GQA module mapping, totals and forward dispatch") {
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.kv_heads = 2;
  cfg.group_size = 2;
  cfg.head_dim = 8;
  cfg.d_model = 32;
  cfg.vocab = 64;
  cfg.seed = 9;
  ModelWeights w = init_model(cfg);
  Prng g(31);
  std::vector<int> context(64);
  for (int& t : context) t = static_cast<int>(g.next_below(cfg.vocab));
  PrefillResult pre = prefill(w, context);

  CapacityPlan plan = plan_capacity(0.25, 64, cfg.head_dim, cfg.layers, cfg.kv_heads);
  SurrogateStack stack = init_surrogate_stack(Family::quadrature, plan, cfg.group_size,
                                              MlpShape{}, &pre.cache, 71,
                                              model_weights_hash(w));
  CHECK(stack.module_count() == 4);
  // Query heads 0,1 share module 0; heads 2,3 share module 1 (per layer).
  CHECK(stack.module_index(0, 0) == 0);
  CHECK(stack.module_index(0, 1) == 0);
  CHECK(stack.module_index(0, 2) == 1);
  CHECK(stack.module_index(1, 3) == 3);

  std::int64_t expected = 0;
  for (const QuadratureModule& m : stack.quad) expected += quad_param_count(m.p, m.d);
  CHECK(stack.total_params() == expected);

  // forward() dispatches to the right module's kernels.
  Vector q = random_vec(cfg.head_dim, 88);
  auto [score, target] = stack.forward(3, q);
  CHECK(score == doctest::Approx(quad_score(stack.quad[3], q)).epsilon(1e-15));
  Vector direct = quad_target(stack.quad[3], q);
  for (int i = 0; i < cfg.head_dim; ++i) {
    CHECK(target[i] == doctest::Approx(direct[i]).epsilon(1e-15));
  }

  // Quadrature modules start as the first p cache rows.
  const int p0 = stack.quad[0].p;
  for (int i = 0; i < p0; ++i) {
    for (int j = 0; j < cfg.head_dim; ++j) {
      CHECK(stack.quad[0].w.at(i, j) == pre.cache.key(0, 0).at(i, j));
    }
  }

  // param_chunks exposes every trainable buffer exactly once.
  std::vector<std::span<double>> chunks = stack.param_chunks();
  std::int64_t spanned = 0;
  for (const auto& c : chunks) spanned += static_cast<std::int64_t>(c.size());
  CHECK(spanned == stack.total_params());
}

TEST_CASE("quadrature stack requires a context cache at init") {
  ModelConfig cfg;
  cfg.layers = 1;
  cfg.kv_heads = 1;
  cfg.group_size = 1;
  cfg.head_dim = 8;
  cfg.d_model = 8;
  cfg.vocab = 32;
  CapacityPlan plan = plan_capacity(0.5, 32, cfg.head_dim, cfg.layers, cfg.kv_heads);
  CHECK_THROWS_AS((void)init_surrogate_stack(Family::quadrature, plan, cfg.group_size, MlpShape{},
                                             nullptr, 1, 0),
                  std::invalid_argument);
}

TEST_CASE("stack checkpoint round trip and base-hash guard") {
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.kv_heads = 2;
  cfg.group_size = 2;
  cfg.head_dim = 8;
  cfg.d_model = 32;
  cfg.vocab = 64;
  cfg.seed = 12;
  ModelWeights w = init_model(cfg);
  CapacityPlan plan = plan_capacity(0.1, 256, cfg.head_dim, cfg.layers, cfg.kv_heads);
  SurrogateStack stack = init_surrogate_stack(Family::mlp, plan, cfg.group_size, MlpShape{},
                                              nullptr, 5, model_weights_hash(w));

  const std::string path = "/tmp/kvs_test_surrogate_stack.bin";
  save_stack(stack, path);
  SurrogateStack back = load_stack(path, model_weights_hash(w));
  CHECK(back.family == Family::mlp);
  CHECK(back.total_params() == stack.total_params());
  REQUIRE(back.mlp.size() == stack.mlp.size());
  for (std::size_t i = 0; i < stack.mlp.size(); ++i) {
    CHECK(back.mlp[i].params == stack.mlp[i].params);  // byte-exact
  }
  CHECK_THROWS_AS((void)load_stack(path, model_weights_hash(w) ^ 7), std::runtime_error);
  std::remove(path.c_str());
}
