// Blended-attention checks: two-term brute force, the virtual-row weight
// vector read out through basis values, the no-mass sentinel, providers, and
// session-level identity against the full decode.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "kvs/blend.hpp"
#include "kvs/model.hpp"
#include "kvs/oracle.hpp"
#include "kvs/surrogate.hpp"
#include "kvs/tensor.hpp"

using namespace kvs;

namespace {

Vector random_vec(int dim, std::uint64_t seed) {
  Prng g(seed);
  Vector v(dim);
  for (int i = 0; i < dim; ++i) v[i] = g.next_gaussian();
  return v;
}

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.kv_heads = 2;
  cfg.group_size = 2;
  cfg.head_dim = 8;
  cfg.d_model = 32;
  cfg.vocab = 64;
  cfg.seed = 555;
  return cfg;
}

std::vector<int> random_tokens(int count, int vocab, std::uint64_t seed) {
  Prng g(seed);
  std::vector<int> t(static_cast<std::size_t>(count));
  for (int& x : t) x = static_cast<int>(g.next_below(static_cast<std::uint64_t>(vocab)));
  return t;
}

}  // namespace

TEST_CASE("blend with one local entry matches the two-term closed form") {
  const int d = 4;
  Vector target = random_vec(d, 1);
  Vector local_value = random_vec(d, 2);
  Matrix values(0, d);
  values.append_row(local_value);
  const double s = 0.8, l = -0.3;
  Vector logits(1);
  logits[0] = l;

  Vector out = blend_attend(s, target, logits, values);
  const double ws = std::exp(s) / (std::exp(s) + std::exp(l));
  for (int i = 0; i < d; ++i) {
    CHECK(out[i] == doctest::Approx(ws * target[i] + (1.0 - ws) * local_value[i]).epsilon(1e-14));
  }
}

TEST_CASE("blend with no local rows returns the target") {
  Vector target = random_vec(5, 3);
  Vector out = blend_attend(-2.0, target, Vector(), Matrix(0, 5));
  for (int i = 0; i < 5; ++i) CHECK(out[i] == target[i]);
}

TEST_CASE("blend weights: convex, sum to one, monotone in the score") {
  // Basis-vector targets/values expose the softmax weights directly:
  // output[0] = weight of the virtual row, output[1+i] = weight of local i.
  const int locals = 3;
  const int d = locals + 1;
  Vector target(d);
  target[0] = 1.0;
  Matrix values(0, d);
  for (int i = 0; i < locals; ++i) {
    Vector row(d);
    row[1 + i] = 1.0;
    values.append_row(row);
  }
  Vector logits = random_vec(locals, 4);

  double prev_w = -1.0;
  for (double score : {-5.0, -1.0, 0.0, 1.5, 4.0}) {
    Vector w = blend_attend(score, target, logits, values);
    double sum = 0.0;
    for (int i = 0; i < d; ++i) {
      CHECK(w[i] >= 0.0);
      sum += w[i];
    }
    CHECK(std::fabs(sum - 1.0) <= 1e-12);
    CHECK(w[0] > prev_w);  // strictly increasing in the score
    prev_w = w[0];
  }
}

TEST_CASE("score sentinel -1e6 leaves all mass on the local rows") {
  const int d = 4;
  Vector target(d, 100.0);  // would dominate if any mass leaked
  Matrix values(0, d);
  values.append_row(random_vec(d, 5));
  values.append_row(random_vec(d, 6));
  Vector logits = random_vec(2, 7);

  Vector out = blend_attend(-1e6, target, logits, values);
  // Local-only attention over the same logits.
  Vector sm = softmax(logits);
  for (int i = 0; i < d; ++i) {
    const double local_only = sm[0] * values.at(0, i) + sm[1] * values.at(1, i);
    CHECK(out[i] == doctest::Approx(local_only).epsilon(1e-12));
  }
}

TEST_CASE("blend rejects a non-finite score") {
  Vector target = random_vec(3, 8);
  Matrix values(0, 3);
  values.append_row(random_vec(3, 9));
  Vector logits(1);
  CHECK_THROWS_AS((void)blend_attend(std::numeric_limits<double>::quiet_NaN(), target, logits, values),
                  std::invalid_argument);
  CHECK_THROWS_AS((void)blend_attend(std::numeric_limits<double>::infinity(), target, logits, values),
                  std::invalid_argument);
}

TEST_CASE("oracle provider returns the exact context score and target") {
  ModelConfig cfg = tiny_config();
  ModelWeights w = init_model(cfg);
  std::vector<int> context = random_tokens(20, cfg.vocab, 11);
  PrefillResult pre = prefill(w, context);
  OracleProvider provider(pre.cache, cfg.group_size);

  Vector q = random_vec(cfg.head_dim, 12);
  for (int l = 0; l < cfg.layers; ++l) {
    for (int qh = 0; qh < cfg.query_heads(); ++qh) {
      auto [score, target] = provider.score_target(l, qh, q);
      const int kvh = qh / cfg.group_size;
      CHECK(score == doctest::Approx(score_alpha(q, pre.cache.key(l, kvh))).epsilon(1e-15));
      Vector expect = target_A(q, pre.cache.key(l, kvh), pre.cache.value(l, kvh));
      for (int i = 0; i < cfg.head_dim; ++i) {
        CHECK(target[i] == doctest::Approx(expect[i]).epsilon(1e-15));
      }
    }
  }
}

TEST_CASE("stack provider maps query heads onto grouped modules") {
  ModelConfig cfg = tiny_config();
  ModelWeights w = init_model(cfg);
  std::vector<int> context = random_tokens(32, cfg.vocab, 13);
  PrefillResult pre = prefill(w, context);
  CapacityPlan plan = plan_capacity(0.25, 32, cfg.head_dim, cfg.layers, cfg.kv_heads);
  SurrogateStack stack = init_surrogate_stack(Family::quadrature, plan, cfg.group_size, MlpShape{},
                                              &pre.cache, 14, model_weights_hash(w));
  StackProvider provider(stack);
  Vector q = random_vec(cfg.head_dim, 15);
  for (int l = 0; l < cfg.layers; ++l) {
    for (int qh = 0; qh < cfg.query_heads(); ++qh) {
      auto [score, target] = provider.score_target(l, qh, q);
      auto [es, et] = stack.forward(stack.module_index(l, qh), q);
      CHECK(score == es);
      for (int i = 0; i < cfg.head_dim; ++i) CHECK(target[i] == et[i]);
    }
  }
}

TEST_CASE("oracle-provided blended decode reproduces full attention") {
  ModelConfig cfg = tiny_config();
  ModelWeights w = init_model(cfg);
  const int n = 24;
  std::vector<int> context = random_tokens(n, cfg.vocab, 16);
  std::vector<int> cont = random_tokens(10, cfg.vocab, 17);

  PrefillResult pre = prefill(w, context);
  KVCache grow = pre.cache;
  OracleProvider provider(pre.cache, cfg.group_size);
  BlendSession session(w, provider, n);

  for (int i = 0; i < 10; ++i) {
    Vector full = decode_step_full(w, grow, cont[static_cast<std::size_t>(i)], n + 1 + i);
    Vector blended = decode_with_surrogate(session, cont[static_cast<std::size_t>(i)]);
    for (int t = 0; t < cfg.vocab; ++t) {
      const double rel = std::fabs(full[t] - blended[t]) / std::max(1.0, std::fabs(full[t]));
      CHECK(rel <= 1e-10);
    }
  }
  CHECK(session.t == n + 10);
  CHECK(session.local.n == 10);  // local cache holds only post-context rows
}

TEST_CASE("blended decode is deterministic across sessions") {
  ModelConfig cfg = tiny_config();
  ModelWeights w = init_model(cfg);
  const int n = 16;
  std::vector<int> context = random_tokens(n, cfg.vocab, 18);
  PrefillResult pre = prefill(w, context);
  CapacityPlan plan = plan_capacity(0.25, n, cfg.head_dim, cfg.layers, cfg.kv_heads);
  SurrogateStack stack = init_surrogate_stack(Family::quadrature, plan, cfg.group_size, MlpShape{},
                                              &pre.cache, 20, model_weights_hash(w));
  StackProvider provider(stack);

  std::vector<int> cont = random_tokens(6, cfg.vocab, 19);
  BlendSession s1(w, provider, n), s2(w, provider, n);
  for (int i = 0; i < 6; ++i) {
    Vector a = decode_with_surrogate(s1, cont[static_cast<std::size_t>(i)]);
    Vector b = decode_with_surrogate(s2, cont[static_cast<std::size_t>(i)]);
    for (int t = 0; t < cfg.vocab; ++t) CHECK(a[t] == b[t]);
  }
}
