#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kvs/eval.hpp"
#include "kvs/model.hpp"
#include "kvs/surrogate.hpp"
#include "kvs/taskgen.hpp"
#include "kvs/train.hpp"

// Configuration, run-directory layout, and the subcommand drivers behind the
// CLI. A run directory always contains the exact JSON config that produced it
// plus caches/, checkpoints/ and reports/; artifacts are rebuilt on demand and
// verified against their producer's hashes when loaded from disk.

namespace kvs {

struct CorpusSpec {
  std::uint64_t seed = 7;
  int n = 1024;
  int fact_count = 16;
  int per_fact = 6;     // pairs per fact; every sixth is a span-copy pair
  int copy_len = 12;    // span-copy response length before capping
  int response_cap = 196;
};

struct SurrogateSpec {
  Family family = Family::mlp;
  double rho = 0.05;
  std::vector<CapacityGroup> groups;  // empty = uniform multipliers
  MlpShape shape;
  std::uint64_t seed = 4242;
};

struct EvalSpec {
  std::vector<int> bench_contexts = {512, 2048, 8192};
  int decode_tokens = 32;
  int bench_reps = 5;
};

struct SweepSpec {
  std::vector<double> rhos = {0.005, 0.02};
  std::vector<LossWeights> loss_triples = {
      {0.1, 1.0, 0.0}, {0.1, 1.0, 2.0}, {0.0, 0.0, 1.0}};
};

struct RunConfig {
  ModelConfig model;
  CorpusSpec corpus;
  SurrogateSpec surrogate;
  LossWeights loss;
  TrainConfig train;
  EvalSpec eval;
  SweepSpec sweep;
  std::string output_dir = "default-run";  // under output_root() unless absolute
};

RunConfig default_run_config();
std::string run_config_to_json(const RunConfig& rc);
RunConfig run_config_from_json(const std::string& text);
RunConfig load_run_config(const std::string& path);
// FNV over the canonical JSON serialization.
std::uint64_t run_config_hash(const RunConfig& rc);

// $KVS_OUTPUT_ROOT when set, else "runs".
std::string output_root();

struct RunPaths {
  std::string dir;
  std::string config_file;
  std::string caches_dir;
  std::string checkpoints_dir;
  std::string reports_dir;
};

RunPaths run_paths(const RunConfig& rc);
// Creates the layout and writes config.json.
RunPaths prepare_run_dir(const RunConfig& rc);

// Artifact builders. When the artifact file already exists it is loaded and
// verified (hash mismatch throws); otherwise it is built and saved.
ModelWeights ensure_model(const RunConfig& rc, const RunPaths& paths);
SyntheticCorpus ensure_corpus(const RunConfig& rc, const RunPaths& paths);
TargetCache ensure_targets(const RunConfig& rc, const RunPaths& paths, const ModelWeights& w,
                           const SyntheticCorpus& corpus);
// Freshly initialised stack per the config; `cache` is required for the
// quadrature family.
SurrogateStack build_stack(const RunConfig& rc, const ModelWeights& w, const KVCache* cache);

struct IdentityCheckResult {
  int cases = 0;
  double max_rel_err = 0.0;
};

// Decodes `post_tokens` positions after random contexts with oracle-provided
// (alpha, A) and compares every logit against the full-cache decode.
IdentityCheckResult identity_check(const ModelConfig& cfg, const std::vector<int>& context_sizes,
                                   int cases_per_size, int post_tokens, std::uint64_t seed);

// Subcommand drivers; return process exit codes (0 ok, 1 failed invariant).
int run_gen_data(const RunConfig& rc);
int run_cache_targets(const RunConfig& rc);
int run_train(const RunConfig& rc);
int run_eval(const RunConfig& rc);
int run_bench(const RunConfig& rc);
int run_identity_check(const RunConfig& rc);
int run_sweep(const RunConfig& rc);

}  // namespace kvs
