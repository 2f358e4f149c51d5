// Base model checks: rotary rotation against an independent hand computation,
// prefill/incremental equivalence, causality, attention restriction, and
// checkpoint integrity.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <vector>

#include "kvs/model.hpp"
#include "kvs/tensor.hpp"

using namespace kvs;

namespace {

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

double max_abs_diff(const Vector& a, const Vector& b) {
  REQUIRE(a.dim() == b.dim());
  double m = 0.0;
  for (int i = 0; i < a.dim(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("config validation rejects inconsistent dimensions") {
  ModelConfig cfg = tiny_config();
  CHECK_NOTHROW(cfg.validate());
  cfg.d_model = 31;  // != kv_heads * group_size * head_dim
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  ModelConfig odd = tiny_config();
  odd.head_dim = 7;
  odd.d_model = 28;
  CHECK_THROWS_AS(odd.validate(), std::invalid_argument);  // rope needs even head_dim
}

TEST_CASE("init_model is deterministic in the seed") {
  ModelConfig cfg = tiny_config();
  ModelWeights a = init_model(cfg);
  ModelWeights b = init_model(cfg);
  CHECK(model_weights_hash(a) == model_weights_hash(b));
  cfg.seed += 1;
  ModelWeights c = init_model(cfg);
  CHECK(model_weights_hash(a) != model_weights_hash(c));
}

TEST_CASE("rope rotation: identity at position zero, hand value, norm preservation") {
  Vector x(4);
  x[0] = 1.0;
  x[1] = 2.0;
  x[2] = -3.0;
  x[3] = 0.5;
  Vector y0 = rope_rotate(x, 0.0, 10000.0);
  CHECK(max_abs_diff(y0, x) == 0.0);

  // Pair 0 rotates by theta = pos * base^0 = pos; pair 1 by pos * base^(-1/2).
  const double pos = 3.0;
  Vector y = rope_rotate(x, pos, 10000.0);
  const double t0 = pos;
  CHECK(y[0] == doctest::Approx(x[0] * std::cos(t0) - x[1] * std::sin(t0)).epsilon(1e-15));
  CHECK(y[1] == doctest::Approx(x[0] * std::sin(t0) + x[1] * std::cos(t0)).epsilon(1e-15));
  const double t1 = pos * std::pow(10000.0, -0.5);
  CHECK(y[2] == doctest::Approx(x[2] * std::cos(t1) - x[3] * std::sin(t1)).epsilon(1e-15));
  CHECK(y[3] == doctest::Approx(x[2] * std::sin(t1) + x[3] * std::cos(t1)).epsilon(1e-15));

  Prng g(9);
  for (int trial = 0; trial < 20; ++trial) {
    Vector r(16);
    for (int i = 0; i < 16; ++i) r[i] = g.next_gaussian();
    Vector rr = rope_rotate(r, 12345.0 + trial, 10000.0);
    CHECK(squared_norm(rr) == doctest::Approx(squared_norm(r)).epsilon(1e-12));
  }

  Vector odd(3);
  CHECK_THROWS_AS((void)rope_rotate(odd, 1.0, 10000.0), std::invalid_argument);
}

TEST_CASE("rms_norm hand value") {
  Vector x(2);
  x[0] = 3.0;
  x[1] = 4.0;
  Vector gain(2, 1.0);
  gain[1] = 2.0;
  Vector y = rms_norm(x, gain);
  const double r = std::sqrt((9.0 + 16.0) / 2.0 + 1e-6);
  CHECK(y[0] == doctest::Approx(3.0 / r).epsilon(1e-15));
  CHECK(y[1] == doctest::Approx(2.0 * 4.0 / r).epsilon(1e-15));
}

TEST_CASE("attend_rows equals attention over a truncated copy") {
  Prng g(21);
  const int d = 8;
  Matrix k(0, d), v(0, d);
  for (int i = 0; i < 12; ++i) {
    Vector kr(d), vr(d);
    for (int j = 0; j < d; ++j) {
      kr[j] = g.next_gaussian();
      vr[j] = g.next_gaussian();
    }
    k.append_row(kr);
    v.append_row(vr);
  }
  Vector q(d);
  for (int j = 0; j < d; ++j) q[j] = g.next_gaussian();

  Matrix k5 = k, v5 = v;
  k5.truncate_rows(5);
  v5.truncate_rows(5);
  CHECK(max_abs_diff(attend_rows(q, k, v, 5), attend_full(q, k5, v5)) == 0.0);
  CHECK(max_abs_diff(attend_rows(q, k, v, 12), attend_full(q, k, v)) == 0.0);
  CHECK_THROWS_AS((void)attend_rows(q, k, v, 0), std::invalid_argument);
  CHECK_THROWS_AS((void)attend_rows(q, k, v, 13), std::invalid_argument);
}

TEST_CASE("attention output is a convex combination of value rows") {
  // With all value rows equal to c, the output is exactly c.
  const int d = 4;
  Matrix k(0, d), v(0, d);
  Prng g(3);
  Vector c(d);
  for (int j = 0; j < d; ++j) c[j] = 1.0 + j;
  for (int i = 0; i < 6; ++i) {
    Vector kr(d);
    for (int j = 0; j < d; ++j) kr[j] = 3.0 * g.next_gaussian();
    k.append_row(kr);
    v.append_row(c);
  }
  Vector q(d);
  for (int j = 0; j < d; ++j) q[j] = g.next_gaussian();
  CHECK(max_abs_diff(attend_full(q, k, v), c) < 1e-12);
}

TEST_CASE("prefill equals token-by-token incremental decode bitwise") {
  ModelConfig cfg = tiny_config();
  ModelWeights w = init_model(cfg);
  std::vector<int> tokens = random_tokens(24, cfg.vocab, 101);

  PrefillResult pre = prefill(w, tokens, /*want_logits=*/true);
  KVCache inc(cfg.layers, cfg.kv_heads, cfg.head_dim);
  for (int i = 0; i < static_cast<int>(tokens.size()); ++i) {
    Vector logits = decode_step_full(w, inc, tokens[static_cast<std::size_t>(i)], i + 1);
    CHECK(max_abs_diff(logits, pre.logits[static_cast<std::size_t>(i)]) == 0.0);
  }
  REQUIRE(inc.n == pre.cache.n);
  for (int l = 0; l < cfg.layers; ++l) {
    for (int h = 0; h < cfg.kv_heads; ++h) {
      CHECK(inc.key(l, h).data == pre.cache.key(l, h).data);
      CHECK(inc.value(l, h).data == pre.cache.value(l, h).data);
    }
  }
}

TEST_CASE("decoding is causal: later tokens cannot affect earlier logits") {
  ModelConfig cfg = tiny_config();
  ModelWeights w = init_model(cfg);
  std::vector<int> tokens = random_tokens(16, cfg.vocab, 202);
  PrefillResult a = prefill(w, tokens, true);
  std::vector<int> mutated = tokens;
  mutated[10] = (mutated[10] + 1) % cfg.vocab;
  PrefillResult b = prefill(w, mutated, true);
  for (int i = 0; i < 10; ++i) {
    CHECK(max_abs_diff(a.logits[static_cast<std::size_t>(i)],
                       b.logits[static_cast<std::size_t>(i)]) == 0.0);
  }
  // The mutated position itself must change some logit.
  CHECK(max_abs_diff(a.logits[10], b.logits[10]) > 0.0);
}

TEST_CASE("decode_step_full enforces the position contract") {
  ModelConfig cfg = tiny_config();
  ModelWeights w = init_model(cfg);
  KVCache cache(cfg.layers, cfg.kv_heads, cfg.head_dim);
  (void)decode_step_full(w, cache, 1, 1);
  CHECK_THROWS_AS((void)decode_step_full(w, cache, 1, 1), std::invalid_argument);
  CHECK_THROWS_AS((void)decode_step_full(w, cache, 1, 3), std::invalid_argument);
}

TEST_CASE("embed_token rejects out-of-vocab ids") {
  ModelConfig cfg = tiny_config();
  ModelWeights w = init_model(cfg);
  CHECK_NOTHROW((void)embed_token(w, 0));
  CHECK_NOTHROW((void)embed_token(w, cfg.vocab - 1));
  CHECK_THROWS_AS((void)embed_token(w, cfg.vocab), std::invalid_argument);
  CHECK_THROWS_AS((void)embed_token(w, -1), std::invalid_argument);
}

TEST_CASE("kv cache append, truncate and entry accounting") {
  KVCache cache(2, 2, 4);
  Vector kk(4, 1.0), vv(4, 2.0);
  for (int l = 0; l < 2; ++l) {
    for (int h = 0; h < 2; ++h) cache.append(l, h, kk, vv);
  }
  cache.n = 1;
  CHECK(cache.entries() == 2 * 1 * 2 * 2 * 4);
  for (int l = 0; l < 2; ++l) {
    for (int h = 0; h < 2; ++h) cache.append(l, h, kk, vv);
  }
  cache.n = 2;
  CHECK(cache.entries() == 2 * 2 * 2 * 2 * 4);
  cache.truncate(1);
  CHECK(cache.n == 1);
  CHECK(cache.key(1, 1).rows == 1);
}

TEST_CASE("model checkpoint round trips and detects tampering") {
  ModelConfig cfg = tiny_config();
  ModelWeights w = init_model(cfg);
  const std::string path = "/tmp/kvs_test_model_ckpt.bin";
  save_model(w, path);
  ModelWeights back = load_model(path);
  CHECK(model_weights_hash(back) == model_weights_hash(w));
  CHECK(back.cfg.vocab == cfg.vocab);

  // Flip one payload byte near the end (inside weight data, away from the
  // header): the file still parses but the weights hash must change.
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    REQUIRE(f.good());
    f.seekg(0, std::ios::end);
    const std::streamoff size = f.tellg();
    f.seekp(size - 9);
    char byte = 0;
    f.seekg(size - 9);
    f.read(&byte, 1);
    byte = static_cast<char>(byte ^ 0x40);
    f.seekp(size - 9);
    f.write(&byte, 1);
  }
  ModelWeights tampered = load_model(path);
  CHECK(model_weights_hash(tampered) != model_weights_hash(w));

  // Corrupting the magic produces a structured failure naming the kind.
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    const char zero[4] = {0, 0, 0, 0};
    f.write(zero, 4);
  }
  CHECK_THROWS_AS((void)load_model(path), std::runtime_error);
  std::remove(path.c_str());
}

TEST_CASE("final_logits dimension and determinism") {
  ModelConfig cfg = tiny_config();
  ModelWeights w = init_model(cfg);
  Vector hidden(cfg.d_model);
  Prng g(17);
  for (int i = 0; i < cfg.d_model; ++i) hidden[i] = g.next_gaussian();
  Vector l1 = final_logits(w, hidden);
  Vector l2 = final_logits(w, hidden);
  CHECK(l1.dim() == cfg.vocab);
  CHECK(max_abs_diff(l1, l2) == 0.0);
}
