#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kvs/oracle.hpp"
#include "kvs/tensor.hpp"

// Synthetic long-context corpora with planted facts. A fact is a contiguous
// block [key0 key1 val0 val1] written over random filler at a uniform random
// position. Query pairs are either associative recall (ask for a fact's value
// by its key) or span copy (reproduce the context starting at the key). With
// the default six pairs per fact the task mix is skewed 5:1 towards recall.
//
// The base model consuming these corpora is random and never trained, so task
// metrics downstream are agreement metrics against the full-attention model
// itself rather than task correctness.

namespace kvs {

constexpr int kKeySpan = 2;
constexpr int kValueSpan = 2;
constexpr int kFactSpan = kKeySpan + kValueSpan;
// Top-of-vocab marker tokens; filler and fact tokens stay below the reserve.
constexpr int kMarkerReserve = 8;

struct Fact {
  int pos = 0;  // 0-based start of the fact block in the token stream
  std::vector<int> key;
  std::vector<int> value;
};

enum class Task { recall, copy_span };

struct TaskPair {
  int id = 0;
  Task task = Task::recall;
  bool test_split = false;
  std::vector<int> instruction;
  std::vector<int> response;
};

struct SyntheticCorpus {
  std::uint64_t seed = 0;
  int n = 0;
  int vocab = 0;
  std::vector<int> tokens;
  std::vector<Fact> facts;
  std::vector<TaskPair> pairs;
};

int ask_marker(int vocab);
int copy_marker(int vocab);

// Filler plus fact_count non-overlapping fact blocks. Keys are unique across
// facts. Errors when fact_count * kFactSpan exceeds n ("overcrowded").
SyntheticCorpus gen_corpus(std::uint64_t seed, int n, int fact_count, int vocab);

// per_fact pairs per fact: index 5 within a fact is the span-copy pair (so
// per_fact = 6 gives the 5:1 recall skew), the rest are recall pairs with
// distinct nonce tokens appended to keep instructions unique. Assigns a
// deterministic 80/20 train/test split and checks that no test pair
// duplicates a train pair. Responses are clipped to response_cap tokens.
std::vector<TaskPair> gen_pairs(const SyntheticCorpus& corpus, int per_fact, int copy_len,
                                std::uint64_t seed, int response_cap = 196);

// Convenience: gen_corpus + gen_pairs stored on the corpus.
SyntheticCorpus gen_corpus_with_pairs(std::uint64_t seed, int n, int fact_count, int vocab,
                                      int per_fact, int copy_len);

std::uint64_t corpus_hash(const SyntheticCorpus& c);

// Teacher-forced query sequences for the target cacher: instruction followed
// by response, with the response boundary recorded.
std::vector<QuerySample> query_samples_from_pairs(const std::vector<TaskPair>& pairs);

void save_corpus(const SyntheticCorpus& c, const std::string& path);
SyntheticCorpus load_corpus(const std::string& path);

}  // namespace kvs
