#pragma once

#include <utility>
#include <vector>

#include "kvs/model.hpp"
#include "kvs/surrogate.hpp"
#include "kvs/tensor.hpp"

// Decode-time combination of long-context surrogates with exact local
// attention. The surrogate contributes one virtual logit (its score) and one
// virtual value row (its target); everything passes through a single
// max-shifted softmax, so no change to the attention kernel is needed. With a
// provider that computes the true (alpha, A) from the kept context cache the
// path reproduces full attention exactly — the identity checked by
// `identity-check` and the acceptance suite.

namespace kvs {

// softmax over [score, local_logits] weighting [target; local_values rows].
// No local entries -> returns target. Errors on non-finite score; tests use
// -1e6 as the "no long-context mass" sentinel.
Vector blend_attend(double score, const Vector& target, const Vector& local_logits,
                    const Matrix& local_values);

// Source of the long-context (score, target) pair per (layer, query head).
class BlendProvider {
 public:
  virtual ~BlendProvider() = default;
  virtual std::pair<double, Vector> score_target(int layer, int query_head, const Vector& q) = 0;
};

// Trained surrogate stack.
class StackProvider : public BlendProvider {
 public:
  explicit StackProvider(const SurrogateStack& stack) : stack_(&stack) {}
  std::pair<double, Vector> score_target(int layer, int query_head, const Vector& q) override;

 private:
  const SurrogateStack* stack_;
};

// Identity mode: exact (alpha, A) recomputed from the full context cache.
// Keeps the cache around, so it verifies correctness rather than saving
// memory.
class OracleProvider : public BlendProvider {
 public:
  OracleProvider(const KVCache& context_cache, int group_size)
      : cache_(&context_cache), group_size_(group_size) {}
  std::pair<double, Vector> score_target(int layer, int query_head, const Vector& q) override;

 private:
  const KVCache* cache_;
  int group_size_;
};

// Incremental decode state. The local cache holds exactly the post-context
// positions n+1..t; the context itself lives behind the provider.
struct BlendSession {
  const ModelWeights* weights = nullptr;
  BlendProvider* provider = nullptr;
  KVCache local;
  int n = 0;  // context length
  int t = 0;  // last consumed absolute position

  BlendSession(const ModelWeights& w, BlendProvider& p, int context_len);
};

// One step at position session.t + 1. The token's local K/V are appended
// before attending (self-inclusive, matching decode_step_full), then each
// query head blends the provider's (score, target) with its local logits.
// Per-step cost is independent of the context length.
Vector decode_with_surrogate(BlendSession& session, int token);

}  // namespace kvs
