#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kvs/blend.hpp"
#include "kvs/model.hpp"
#include "kvs/oracle.hpp"
#include "kvs/surrogate.hpp"
#include "kvs/tensor.hpp"

// Quantitative comparisons between surrogate and full-attention decoding.
// The base model is frozen random, so "accuracy" is argmax agreement with the
// full-attention model itself: acc_full is 1 by definition and the
// token-accuracy gap is the surrogate's disagreement rate (positive =
// degradation). Cross-entropy is measured against the actual response tokens
// under teacher forcing; eval KL compares full vocabularies.

namespace kvs {

// Per-sample log error ratios below this are clamped (perfect predictions
// would otherwise be -inf) and reported via the floored counters.
inline constexpr double kRteFloor = -700.0;

// Relative transport error: per (layer, query head) the mean over records of
//   log( ||target_pred - A||^2 / ||q - A||^2 )
// summed over cells; the score variant uses (score_pred - alpha)^2 / alpha^2.
// Zero denominators exclude the record from that variant's mean.
struct RteReport {
  double target_total = 0.0;
  double score_total = 0.0;
  Matrix target_cells;  // layers x query_heads
  Matrix score_cells;
  std::int64_t target_counted = 0;
  std::int64_t score_counted = 0;
  std::int64_t target_excluded = 0;
  std::int64_t score_excluded = 0;
  std::int64_t target_floored = 0;
  std::int64_t score_floored = 0;
};

RteReport rte_rows(const SurrogateStack& stack, const TargetCache& targets,
                   const std::vector<int>& rows);
// All cached rows.
RteReport rte(const SurrogateStack& stack, const TargetCache& targets);

struct EvalSummary {
  double acc_full = 1.0;       // agreement of full attention with itself
  double acc_surrogate = 0.0;  // argmax agreement with the full model
  double token_accuracy_gap_pp = 0.0;  // (acc_full - acc_surrogate) * 100
  double ce_full = 0.0;        // mean CE of response tokens, full attention
  double ce_surrogate = 0.0;
  double lm_ce_gap = 0.0;      // ce_surrogate - ce_full (nats)
  double eval_kl = 0.0;        // mean KL(full || surrogate), full vocab
  std::int64_t positions = 0;  // response-predicting positions scored
};

// Teacher-forced comparison over the cache's samples (one split). Samples are
// visited in ascending pair-id order so results do not depend on how the
// cache was assembled.
EvalSummary eval_agreement(const ModelWeights& w, const TargetCache& targets,
                           BlendProvider& provider, bool test_split);
EvalSummary eval_stack(const ModelWeights& w, const SurrogateStack& stack,
                       const TargetCache& targets, bool test_split);
// Identity mode: oracle (alpha, A) from the full context cache.
EvalSummary eval_identity(const ModelWeights& w, const KVCache& context_cache,
                          const TargetCache& targets, bool test_split);
// Degenerate reference: the student emits all-zero logits at every position.
EvalSummary eval_constant_logit_baseline(const TargetCache& targets, bool test_split);

struct BenchPoint {
  int n = 0;
  double full_ttft_ms = 0.0;     // prefill wall time
  double full_tok_per_s = 0.0;   // incremental full-attention decode
  double sur_ttft_ms = 0.0;      // first blended step (no prefill needed)
  double sur_tok_per_s = 0.0;    // blended decode throughput
  std::int64_t full_mem_entries = 0;  // 2 n L H_kv d cache entries
  std::int64_t sur_mem_params = 0;    // stack parameters, n-independent
  double full_mem_bytes = 0.0;
  double sur_mem_bytes = 0.0;
};

struct BenchOptions {
  int decode_tokens = 32;
  int reps = 5;    // median of this many timed repetitions
  int warmup = 1;  // untimed repetitions before measuring
  std::uint64_t seed = 2024;
};

// Wall-time and memory comparison across context sizes (must be strictly
// increasing). The same stack serves every n: its cost is n-independent by
// construction while the full-cache path scans all n rows.
std::vector<BenchPoint> bench(const ModelWeights& w, const SurrogateStack& stack,
                              const std::vector<int>& context_sizes, const BenchOptions& opt);

struct EvalReport {
  std::uint64_t config_hash = 0;
  std::string label;
  std::int64_t stack_params = 0;
  EvalSummary agreement;
  EvalSummary baseline;  // constant-logit reference on the same split
  RteReport transport;
  std::vector<BenchPoint> bench_points;  // empty when bench was skipped
};

// Structured text document with stable key names.
std::string report_text(const EvalReport& r);
// Flat CSV row of the deterministic metrics (bench timings excluded so
// repeated runs produce identical bytes).
std::string report_csv_header();
std::string report_csv_row(const EvalReport& r);
// layer,query_head,rte_target,rte_score
std::string rte_heatmap_csv(const RteReport& r);
// Bench timings; wall-clock columns are inherently non-deterministic.
std::string bench_csv(const std::vector<BenchPoint>& points);

}  // namespace kvs
