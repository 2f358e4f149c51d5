#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kvs/model.hpp"
#include "kvs/tensor.hpp"

// Ground-truth attention intermediates. For every post-context query position
// the cacher records, per (layer, query head): the rotated query q, the
// attention log-normaliser over the context keys
//   alpha(q) = log sum_j exp(<q, k_j> / sqrt(d)),   j = 1..n
// and the context-restricted attention readout
//   A(q) = softmax(K q / sqrt(d))^T V,
// plus the full-attention next-token logits at that position (the teacher
// distribution for distillation). These are exactly the quantities the
// surrogate stack is trained to reproduce.

namespace kvs {

// alpha over all rows of k.
double score_alpha(const Vector& q, const Matrix& k);
// alpha over the first `rows` rows.
double score_alpha_rows(const Vector& q, const Matrix& k, int rows);
// A over all rows; same code path as the model's attention kernel.
Vector target_A(const Vector& q, const Matrix& k, const Matrix& v);

// One query sequence sharing the cache's context. Tokens are teacher-forced;
// tokens[0, response_start) are the instruction, the rest the response.
struct QuerySample {
  int pair_id = 0;
  bool test_split = false;
  int response_start = 1;
  std::vector<int> tokens;
};

struct TargetRecordView {
  const double* q;       // head_dim
  double alpha;
  const double* target;  // head_dim
};

// Row-per-position storage of cached targets. Strides make (row, layer, head)
// lookups O(1); rows are grouped contiguously per sample in pair-id order.
struct TargetCache {
  std::uint64_t key_hash = 0;  // hashes frozen weights + context + queries
  ModelConfig cfg;
  int n = 0;  // context length

  struct Sample {
    int pair_id = 0;
    bool test_split = false;
    int response_start = 1;  // index into tokens where the response begins
    int first_row = 0;
    int count = 0;
    std::vector<int> tokens;

    // Rows whose next-token prediction is a response token: the row holding
    // the last instruction token predicts the first response token.
    int first_response_row() const { return first_row + response_start - 1; }
    int response_rows() const { return count - response_start; }
  };
  std::vector<Sample> samples;

  int rows = 0;
  std::vector<double> q;        // rows * layers * query_heads * head_dim
  std::vector<double> alpha;    // rows * layers * query_heads
  std::vector<double> target;   // rows * layers * query_heads * head_dim
  std::vector<double> teacher;  // rows * vocab (full-attention logits)

  TargetRecordView record(int row, int layer, int query_head) const;
  const double* teacher_logits(int row) const;
  // Absolute 1-based position of a row (n + offset within its sample + 1).
  int position(int row) const;
  int sample_of_row(int row) const;

  std::vector<int> rows_for_split(bool test_split) const;
};

// Builds the cache with one context prefill and teacher-forced decode steps
// per sample. All samples share the context; the working cache is rewound to
// n rows between samples.
TargetCache cache_targets(const ModelWeights& w, const std::vector<int>& context,
                          const std::vector<QuerySample>& samples);

// Key a cache is expected to carry for given inputs.
std::uint64_t target_cache_key(const ModelWeights& w, const std::vector<int>& context,
                               const std::vector<QuerySample>& samples);

void save_target_cache(const TargetCache& c, const std::string& path);
TargetCache load_target_cache(const std::string& path);
// Load and fail with a hash-mismatch error unless the file's key equals
// expected_key.
TargetCache load_target_cache(const std::string& path, std::uint64_t expected_key);

// Recomputes `sample_count` randomly chosen samples from scratch and returns
// the max absolute deviation across alpha, targets, queries and teacher
// logits.
double verify_target_cache(const TargetCache& c, const ModelWeights& w,
                           const std::vector<int>& context, int sample_count, std::uint64_t seed);

}  // namespace kvs
