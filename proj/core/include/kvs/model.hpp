#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kvs/tensor.hpp"

// Desk-scale decoder-only transformer with rotary positions and grouped-query
// attention. The model is deliberately small and random-initialised: it exists
// to produce realistic attention intermediates, not to be trained. Weights are
// frozen everywhere downstream.

namespace kvs {

struct ModelConfig {
  int layers = 4;      // L
  int kv_heads = 2;    // KV heads per layer
  int group_size = 2;  // query heads sharing one KV head
  int head_dim = 16;   // d
  int d_model = 64;    // must equal kv_heads * group_size * head_dim
  int vocab = 256;
  double rope_base = 10000.0;
  std::uint64_t seed = 1234;

  int query_heads() const { return kv_heads * group_size; }
  int ffn_dim() const { return 4 * d_model; }
  void validate() const;  // throws on inconsistent dims
};

struct LayerWeights {
  Vector ln1_gain;            // d_model
  Vector ln2_gain;            // d_model
  std::vector<Matrix> w_q;    // query_heads of head_dim x d_model
  std::vector<Matrix> w_k;    // kv_heads of head_dim x d_model
  std::vector<Matrix> w_v;    // kv_heads of head_dim x d_model
  Matrix w_o;                 // d_model x d_model
  Matrix w_ff1;               // ffn_dim x d_model
  Matrix w_ff2;               // d_model x ffn_dim
};

struct ModelWeights {
  ModelConfig cfg;
  Matrix embed;    // vocab x d_model (untied from unembed)
  std::vector<LayerWeights> layers;
  Vector ln_final_gain;  // d_model
  Matrix unembed;  // vocab x d_model
};

// Rotated keys/values per (layer, kv head). Rows are appended in position
// order; layout per head is n x head_dim.
struct KVCache {
  int layers = 0;
  int kv_heads = 0;
  int head_dim = 0;
  int n = 0;  // rows currently stored per head
  std::vector<Matrix> k;  // layers * kv_heads matrices
  std::vector<Matrix> v;

  KVCache() = default;
  KVCache(int layers_, int kv_heads_, int head_dim_);

  int index(int layer, int head) const { return layer * kv_heads + head; }
  Matrix& key(int layer, int head) { return k[index(layer, head)]; }
  const Matrix& key(int layer, int head) const { return k[index(layer, head)]; }
  Matrix& value(int layer, int head) { return v[index(layer, head)]; }
  const Matrix& value(int layer, int head) const { return v[index(layer, head)]; }

  void append(int layer, int head, const Vector& kk, const Vector& vv);
  // Drop rows past new_n on every head (used to rewind per-sample extensions).
  void truncate(int new_n);
  // Total stored float entries: 2 * n * layers * kv_heads * head_dim.
  std::int64_t entries() const;
};

// Gaussian init with per-tensor std documented in the implementation;
// deterministic in cfg.seed.
ModelWeights init_model(const ModelConfig& cfg);

// Standard rotary rotation: adjacent pairs (2i, 2i+1) rotated by
// pos * rope_base^(-2i/d). Norm-preserving for any pos.
Vector rope_rotate(const Vector& x, double pos, double rope_base);

// Softmax(K q / sqrt(d))^T V over all rows of k/v. Convex combination of
// value rows; the single code path shared with the oracle and the quadrature
// surrogate family.
Vector attend_full(const Vector& q, const Matrix& k, const Matrix& v);
// Same computation restricted to the first `rows` rows (used to take
// context-only targets while the cache holds appended query positions).
Vector attend_rows(const Vector& q, const Matrix& k, const Matrix& v, int rows);

// RMS norm with a fixed gain vector (eps = 1e-6).
Vector rms_norm(const Vector& x, const Vector& gain);

// Embedding row for a token; errors outside the vocab.
Vector embed_token(const ModelWeights& w, int token);
// SiLU feed-forward sublayer applied to a normed residual vector.
Vector ffn_forward(const LayerWeights& layer, const Vector& xn);
// Final norm + unembedding: next-token logits from the residual stream.
Vector final_logits(const ModelWeights& w, const Vector& hidden);

struct PrefillResult {
  KVCache cache;
  std::vector<Vector> hidden;  // residual stream after the last block, per position
  std::vector<Vector> logits;  // filled only when want_logits
};

// Batch causal forward over `tokens` (positions 1..n), layer-major. Produces
// the rotated KV cache and final hidden states. Numerically identical to
// running decode_step_full token-by-token: both orderings evaluate the same
// scalar expressions.
PrefillResult prefill(const ModelWeights& w, const std::vector<int>& tokens, bool want_logits = false);

// Observation points inside a decode step; used by the target cacher to grab
// per-head rotated queries without duplicating the block forward.
struct StepObserver {
  virtual ~StepObserver() = default;
  virtual void on_query(int /*layer*/, int /*query_head*/, const Vector& /*q*/) {}
};

// One incremental step with full attention: appends the token's rotated K/V to
// the cache (self-inclusive attention), returns next-token logits.
// pos must be cache.n + 1; positions are 1-based.
Vector decode_step_full(const ModelWeights& w, KVCache& cache, int token, int pos,
                        StepObserver* obs = nullptr);

// Checkpoint IO: magic + config block + weight tensors in declaration order,
// little-endian. Round-trips are byte-exact.
void save_model(const ModelWeights& w, const std::string& path);
ModelWeights load_model(const std::string& path);

std::uint64_t model_config_hash(const ModelConfig& cfg);
// Hash over config and every weight bit; identifies the frozen base model.
std::uint64_t model_weights_hash(const ModelWeights& w);

}  // namespace kvs
