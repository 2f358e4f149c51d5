// Training checks: hand-traced Adam (bias correction, clipping, masking,
// decoupled decay), the schedule and batch-size rules, regression/distill
// losses against plain recomputation and finite differences, determinism,
// and the frozen-base invariant.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <stdexcept>
#include <vector>

#include "kvs/model.hpp"
#include "kvs/oracle.hpp"
#include "kvs/surrogate.hpp"
#include "kvs/taskgen.hpp"
#include "kvs/tensor.hpp"
#include "kvs/train.hpp"

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

struct Fixture {
  ModelConfig cfg = tiny_config();
  ModelWeights w;
  SyntheticCorpus corpus;
  TargetCache targets;
  KVCache context_cache;

  explicit Fixture(int n = 96, std::uint64_t seed = 88) {
    cfg.seed = seed;
    w = init_model(cfg);
    corpus = gen_corpus_with_pairs(seed, n, 4, cfg.vocab, 6, 6);
    std::vector<QuerySample> samples = query_samples_from_pairs(corpus.pairs);
    targets = cache_targets(w, corpus.tokens, samples);
    context_cache = prefill(w, corpus.tokens).cache;
  }

  SurrogateStack make_stack(Family family, double rho, std::uint64_t seed = 7) const {
    CapacityPlan plan =
        plan_capacity(rho, corpus.n, cfg.head_dim, cfg.layers, cfg.kv_heads);
    return init_surrogate_stack(family, plan, cfg.group_size, MlpShape{}, &context_cache, seed,
                                model_weights_hash(w));
  }
};

}  // namespace

TEST_CASE("lr schedule: zero start, linear warmup, cosine decay to zero") {
  const double peak = 3e-4;
  CHECK(lr_schedule(0, 100, 10, peak) == 0.0);
  CHECK(lr_schedule(5, 100, 10, peak) == doctest::Approx(peak * 0.5).epsilon(1e-15));
  CHECK(lr_schedule(10, 100, 10, peak) == doctest::Approx(peak).epsilon(1e-15));
  // Cosine midpoint: halfway between warmup and total.
  CHECK(lr_schedule(55, 100, 10, peak) == doctest::Approx(peak * 0.5).epsilon(1e-12));
  CHECK(lr_schedule(100, 100, 10, peak) == doctest::Approx(0.0));
  CHECK(lr_schedule(250, 100, 10, peak) == 0.0);
  // Monotone decreasing after the peak.
  double prev = peak;
  for (std::int64_t s = 11; s <= 100; ++s) {
    const double v = lr_schedule(s, 100, 10, peak);
    CHECK(v <= prev + 1e-18);
    prev = v;
  }
}

TEST_CASE("warmup flavour: 2.5% of budget or ten epochs, whichever is smaller") {
  CHECK(warmup_steps(4000, 160, 8) == 100);   // min(100, 200)
  CHECK(warmup_steps(4000, 16, 8) == 20);     // min(100, 20)
  CHECK(warmup_steps(10, 10000, 1) == 1);     // lower clamp: total/40 == 0
  CHECK(warmup_steps(39, 100000, 1) == 1);
  CHECK(warmup_steps(40, 2, 1) == 1);  // ten epochs of 2/1 = 20 > total/40 = 1
}

TEST_CASE("effective batch size scales with context, capacity and distillation") {
  CHECK(effective_batch_size(8, 4096, 4096, 0.05, 0.05, false) == 8);
  CHECK(effective_batch_size(8, 1024, 4096, 0.05, 0.05, false) == 32);   // clamp high
  CHECK(effective_batch_size(8, 4096, 4096, 0.2, 0.05, false) == 4);     // sqrt(1/4)
  CHECK(effective_batch_size(8, 4096, 4096, 0.05, 0.05, true) == 4);     // distill halves
  CHECK(effective_batch_size(8, 1 << 20, 4096, 0.05, 0.05, false) == 1); // clamp low
  // Rounded to nearest: 8 * (4096/6144) = 5.33 -> 5.
  CHECK(effective_batch_size(8, 6144, 4096, 0.05, 0.05, false) == 5);
}

TEST_CASE("adam: hand-traced first and second steps") {
  Fixture fx;
  SurrogateStack stack = fx.make_stack(Family::quadrature, 0.3);
  ParamRegistry reg(stack);
  REQUIRE(reg.total == static_cast<std::size_t>(stack.total_params()));
  TrainState st(reg.total);

  const double p0 = stack.quad[0].w.at(0, 0);
  const double g0 = 0.3;
  reg.zero_grad();
  reg.grad[0] = g0;
  optimizer_step(st, reg, 0.1);

  double m = 0.1 * g0;           // (1 - beta1) g
  double v = 0.001 * g0 * g0;    // (1 - beta2) g^2
  double mhat = m / (1.0 - 0.9);
  double vhat = v / (1.0 - 0.999);
  double expect = p0 - 0.1 * mhat / (std::sqrt(vhat) + 1e-8);
  CHECK(stack.quad[0].w.at(0, 0) == doctest::Approx(expect).epsilon(1e-15));
  CHECK(st.step == 1);

  // Second step with a different gradient: moments accumulate, t = 2.
  const double g1 = -0.1;
  reg.zero_grad();
  reg.grad[0] = g1;
  optimizer_step(st, reg, 0.1);
  m = 0.9 * m + 0.1 * g1;
  v = 0.999 * v + 0.001 * g1 * g1;
  mhat = m / (1.0 - 0.9 * 0.9);
  vhat = v / (1.0 - 0.999 * 0.999);
  expect -= 0.1 * mhat / (std::sqrt(vhat) + 1e-8);
  CHECK(stack.quad[0].w.at(0, 0) == doctest::Approx(expect).epsilon(1e-14));
}

TEST_CASE("adam: global-norm clip rescales the whole gradient") {
  Fixture fx;
  SurrogateStack stack = fx.make_stack(Family::quadrature, 0.3);
  ParamRegistry reg(stack);
  TrainState st(reg.total);
  const double p0 = stack.quad[0].w.at(0, 0);
  const double p1 = stack.quad[0].w.at(0, 1);

  reg.zero_grad();
  reg.grad[0] = 3.0;
  reg.grad[1] = 4.0;  // norm 5 -> clip factor 1/5
  optimizer_step(st, reg, 0.01);

  auto adam1 = [](double g) {
    const double mhat = (0.1 * g) / 0.1;
    const double vhat = (0.001 * g * g) / 0.001;
    return 0.01 * mhat / (std::sqrt(vhat) + 1e-8);
  };
  CHECK(stack.quad[0].w.at(0, 0) == doctest::Approx(p0 - adam1(0.6)).epsilon(1e-13));
  CHECK(stack.quad[0].w.at(0, 1) == doctest::Approx(p1 - adam1(0.8)).epsilon(1e-13));
}

TEST_CASE("adam: non-finite gradient entries are masked and counted") {
  Fixture fx;
  SurrogateStack stack = fx.make_stack(Family::quadrature, 0.3);
  ParamRegistry reg(stack);
  TrainState st(reg.total);
  const double p0 = stack.quad[0].w.at(0, 0);

  const double p2 = stack.quad[0].w.at(0, 2);
  reg.zero_grad();
  reg.grad[0] = std::numeric_limits<double>::quiet_NaN();
  reg.grad[1] = std::numeric_limits<double>::infinity();
  reg.grad[2] = 0.5;
  optimizer_step(st, reg, 0.05);
  CHECK(st.nan_masked == 2);
  CHECK(stack.quad[0].w.at(0, 0) == p0);  // masked to zero, no decay
  CHECK(stack.quad[0].w.at(0, 2) != p2);  // the finite entry still updates
  CHECK(std::isfinite(stack.quad[0].w.at(0, 2)));

  reg.zero_grad();
  reg.grad[3] = std::numeric_limits<double>::quiet_NaN();
  optimizer_step(st, reg, 0.05);
  CHECK(st.nan_masked == 3);  // counter accumulates
}

TEST_CASE("adam: decoupled weight decay shrinks parameters independently") {
  Fixture fx;
  SurrogateStack stack = fx.make_stack(Family::quadrature, 0.3);
  ParamRegistry reg(stack);
  AdamConfig cfg;
  cfg.weight_decay = 0.1;
  TrainState st(reg.total, cfg);
  const double p0 = stack.quad[0].w.at(0, 0);

  reg.zero_grad();  // zero gradient: the only movement is the decay
  optimizer_step(st, reg, 0.5);
  CHECK(stack.quad[0].w.at(0, 0) == doctest::Approx(p0 * (1.0 - 0.5 * 0.1)).epsilon(1e-14));
}

TEST_CASE("regression loss: tape gradient matches the plain value and finite differences") {
  Fixture fx;
  SurrogateStack stack = fx.make_stack(Family::mlp, 0.4);
  // Perturb zero-init output layers so gradients are informative.
  Prng noise(17);
  for (MlpModule& m : stack.mlp) {
    for (double& p : m.params) {
      if (p == 0.0) p = 0.05 * noise.next_gaussian();
    }
  }
  ParamRegistry reg(stack);
  std::vector<int> rows = fx.targets.rows_for_split(false);
  rows.resize(6);
  LossWeights lw{0.3, 1.0, 0.0};

  RegressionLoss plain = loss_regression(stack, fx.targets, rows, lw);
  reg.zero_grad();
  RegressionLoss taped = regression_loss_and_grad(stack, reg, fx.targets, rows, lw);
  CHECK(taped.total == doctest::Approx(plain.total).epsilon(1e-12));
  CHECK(taped.score == doctest::Approx(plain.score).epsilon(1e-12));
  CHECK(taped.target == doctest::Approx(plain.target).epsilon(1e-12));
  CHECK(plain.total ==
        doctest::Approx(0.3 * plain.score + 1.0 * plain.target).epsilon(1e-12));

  // Spot-check the gradient with central differences on a few parameters.
  const double h = 1e-6;
  auto loss_at = [&](int module, std::size_t idx, double delta) {
    SurrogateStack copy = stack;
    copy.mlp[static_cast<std::size_t>(module)].params[idx] += delta;
    return loss_regression(copy, fx.targets, rows, lw).total;
  };
  std::size_t flat = 0;
  for (int mod : {0, 3}) {
    for (std::size_t idx : {std::size_t{0}, std::size_t{5}}) {
      const double fd = (loss_at(mod, idx, h) - loss_at(mod, idx, -h)) / (2.0 * h);
      // Locate this parameter in the flat gradient: chunks are per module.
      std::size_t base = 0;
      for (int m = 0; m < mod; ++m) base += stack.mlp[static_cast<std::size_t>(m)].params.size();
      const double g = reg.grad[base + idx];
      CHECK(std::fabs(fd - g) / std::max(1.0, std::fabs(g)) < 1e-4);
      flat += 1;
    }
  }
  CHECK(flat == 4);
}

TEST_CASE("quadrature stack at init predicts the oracle: zero loss, zero gradient") {
  Fixture fx(64, 77);
  // p = n: the module is the full cache, so regression targets are exact.
  SurrogateStack stack = fx.make_stack(Family::quadrature, 1.0);
  for (const QuadratureModule& m : stack.quad) REQUIRE(m.p == 64);
  std::vector<int> rows = fx.targets.rows_for_split(false);
  LossWeights lw{0.5, 1.0, 0.0};
  RegressionLoss loss = loss_regression(stack, fx.targets, rows, lw);
  CHECK(loss.total <= 1e-20);

  ParamRegistry reg(stack);
  reg.zero_grad();
  (void)regression_loss_and_grad(stack, reg, fx.targets, rows, lw);
  double gmax = 0.0;
  for (double g : reg.grad) gmax = std::max(gmax, std::fabs(g));
  CHECK(gmax <= 1e-10);
}

TEST_CASE("distillation loss: plain equals taped; identity stack scores zero") {
  Fixture fx(64, 99);
  SurrogateStack exact = fx.make_stack(Family::quadrature, 1.0);
  std::vector<int> ids;
  for (int i = 0; i < 4; ++i) ids.push_back(i);

  // Student == teacher: pooled KL vanishes.
  CHECK(loss_distill(fx.w, exact, fx.targets, ids) <= 1e-12);

  // Small stack: plain and taped values agree; the gradient moves the loss.
  SurrogateStack stack = fx.make_stack(Family::quadrature, 0.2);
  const double plain = loss_distill(fx.w, stack, fx.targets, ids);
  ParamRegistry reg(stack);
  reg.zero_grad();
  const double taped = distill_loss_and_grad(fx.w, stack, reg, fx.targets, ids, 1.0);
  CHECK(taped == doctest::Approx(plain).epsilon(1e-12));
  CHECK(plain > 0.0);

  // Finite differences through the full blended decode on two parameters.
  const double h = 1e-5;
  for (std::size_t idx : {std::size_t{0}, std::size_t{9}}) {
    auto at = [&](double delta) {
      SurrogateStack copy = stack;
      copy.quad[0].w.data[idx] += delta;
      return loss_distill(fx.w, copy, fx.targets, ids);
    };
    const double fd = (at(h) - at(-h)) / (2.0 * h);
    CHECK(std::fabs(fd - reg.grad[idx]) / std::max(1.0, std::fabs(reg.grad[idx])) < 1e-4);
  }
}

TEST_CASE("train: bookkeeping, determinism, frozen base, forced quadrature alpha") {
  Fixture fx;
  const std::uint64_t base_hash_before = model_weights_hash(fx.w);

  TrainConfig tc;
  tc.seed = 11;
  tc.budget_samples = 64;
  tc.log_every = 2;
  auto run = [&](LossWeights lw, std::uint64_t stack_seed) {
    SurrogateStack stack = fx.make_stack(Family::quadrature, 0.2, stack_seed);
    TrainResult res = train(fx.w, stack, fx.targets, lw, tc);
    return std::make_pair(stack, res);
  };

  auto [s1, r1] = run({0.1, 1.0, 0.0}, 5);
  auto [s2, r2] = run({0.1, 1.0, 0.0}, 5);
  CHECK(r1.steps * r1.batch >= 64);
  CHECK(r1.samples == r1.steps * r1.batch);
  CHECK(r1.rows.front().step == 0);
  CHECK(r1.rows.back().step == r1.steps - 1);
  // Bitwise deterministic across identical runs.
  for (std::size_t m = 0; m < s1.quad.size(); ++m) {
    CHECK(s1.quad[m].w.data == s2.quad[m].w.data);
    CHECK(s1.quad[m].z.data == s2.quad[m].z.data);
  }
  // The base model never moves.
  CHECK(model_weights_hash(fx.w) == base_hash_before);

  // Quadrature forces lambda_alpha to zero: a huge alpha weight changes
  // nothing about the trained parameters.
  auto [s3, r3] = run({25.0, 1.0, 0.0}, 5);
  for (std::size_t m = 0; m < s1.quad.size(); ++m) {
    CHECK(s3.quad[m].w.data == s1.quad[m].w.data);
    CHECK(s3.quad[m].z.data == s1.quad[m].z.data);
  }
  // Training an MLP stack must reduce the full train-split loss.
  TrainConfig longer = tc;
  longer.budget_samples = 3000;
  SurrogateStack mlp_stack = fx.make_stack(Family::mlp, 0.4, 6);
  const std::vector<int> train_rows = fx.targets.rows_for_split(false);
  const LossWeights mlw{0.1, 1.0, 0.0};
  const RegressionLoss before = loss_regression(mlp_stack, fx.targets, train_rows, mlw);
  TrainResult mres = train(fx.w, mlp_stack, fx.targets, mlw, longer);
  const RegressionLoss after = loss_regression(mlp_stack, fx.targets, train_rows, mlw);
  CHECK(mres.steps >= 90);
  CHECK(after.total < before.total);
}

TEST_CASE("train: checkpoints and the metric log land on disk") {
  Fixture fx;
  const std::string dir = "/tmp/kvs_test_training_run";
  std::filesystem::remove_all(dir);

  TrainConfig tc;
  tc.seed = 21;
  tc.budget_samples = 200;
  tc.log_every = 3;
  tc.checkpoint_every = 2;
  tc.checkpoint_dir = dir + "/ckpt";
  tc.log_path = dir + "/train_log.csv";

  SurrogateStack stack = fx.make_stack(Family::quadrature, 0.2);
  TrainResult res = train(fx.w, stack, fx.targets, {0.1, 1.0, 0.0}, tc);
  REQUIRE_FALSE(res.checkpoints.empty());
  CHECK(res.checkpoints.back() == tc.checkpoint_dir + "/ck_final.stack");
  for (const std::string& p : res.checkpoints) CHECK(std::filesystem::exists(p));
  // Final checkpoint equals the in-memory stack.
  SurrogateStack final_ck = load_stack(tc.checkpoint_dir + "/ck_final.stack",
                                       model_weights_hash(fx.w));
  for (std::size_t m = 0; m < stack.quad.size(); ++m) {
    CHECK(final_ck.quad[m].w.data == stack.quad[m].w.data);
  }
  CHECK(std::filesystem::exists(tc.log_path));
  const std::string log = train_log_csv(res.rows);
  CHECK(log.rfind("step,lr,loss_score,loss_target,loss_kl,wallclock_s\n", 0) == 0);
  std::filesystem::remove_all(dir);
}

TEST_CASE("train: structured errors for impossible configurations") {
  Fixture fx;
  SurrogateStack stack = fx.make_stack(Family::quadrature, 0.2);

  TrainConfig tc;
  tc.budget_samples = 1;  // batch will be larger than the whole budget
  CHECK_THROWS_AS((void)train(fx.w, stack, fx.targets, {0.1, 1.0, 0.0}, tc),
                  std::invalid_argument);

  TrainConfig ok;
  ok.budget_samples = 64;
  CHECK_THROWS_AS((void)train(fx.w, stack, fx.targets, {0.0, 0.0, 0.0}, ok),
                  std::invalid_argument);
}
