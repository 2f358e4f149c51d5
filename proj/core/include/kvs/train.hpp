#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "kvs/model.hpp"
#include "kvs/oracle.hpp"
#include "kvs/surrogate.hpp"
#include "kvs/tensor.hpp"

// Surrogate training. Regression losses fit cached (alpha, A) pairs per
// query record; the distillation loss is the teacher-forced KL from the
// full-attention next-token distribution to the student that decodes with the
// surrogate stack, differentiated through the whole blended forward. Only
// surrogate parameters update; the base model stays frozen.

namespace kvs {

struct LossWeights {
  double lambda_alpha = 0.1;
  double lambda_target = 1.0;
  double lambda_kl = 0.0;

  bool distill_active() const { return lambda_kl != 0.0; }
};

// Piecewise warmup-cosine: 0 at step 0, linear to `peak` at step `warmup`,
// cosine back to 0 at step `total`.
double lr_schedule(std::int64_t step, std::int64_t total, std::int64_t warmup, double peak);

// min(total/40, 10 * dataset_size / batch), at least 1: the smaller of 2.5%
// of the budget or ten epochs.
std::int64_t warmup_steps(std::int64_t total_steps, std::int64_t dataset_size, int batch);

// Reference batch scaled inversely with context length and sqrt(rho),
// halved under distillation, clipped to [1, 32].
int effective_batch_size(int b_ref, std::int64_t n, std::int64_t n_ref, double rho, double rho_ref,
                         bool distill);

// Flat view over a stack's trainable buffers with an aligned gradient buffer.
struct ParamRegistry {
  explicit ParamRegistry(SurrogateStack& stack);

  std::vector<std::span<double>> chunks;
  std::vector<std::size_t> offsets;  // grad offset per chunk
  std::vector<double> grad;
  std::size_t total = 0;

  void zero_grad();
  double* grad_base(std::size_t chunk) { return grad.data() + offsets[chunk]; }
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip = 1.0;         // global gradient norm ceiling
  double weight_decay = 0.0; // decoupled; default off
};

struct TrainState {
  AdamConfig adam;
  std::vector<double> m;
  std::vector<double> v;
  std::int64_t step = 0;
  std::int64_t nan_masked = 0;  // non-finite gradient entries zeroed so far

  explicit TrainState(std::size_t total_params, const AdamConfig& cfg = {});
};

// Masks non-finite gradient entries to zero, clips the global norm, then
// applies one bias-corrected Adam update at the given learning rate.
void optimizer_step(TrainState& st, ParamRegistry& reg, double lr);

struct RegressionLoss {
  double total = 0.0;
  double score = 0.0;   // mean squared score error per position sample
  double target = 0.0;  // mean squared target error per position sample
};

// Plain (no-tape) evaluation over the given cache rows: per row the losses
// sum over every (layer, query head) module evaluation, then average over
// rows. `total` applies the loss weights.
RegressionLoss loss_regression(const SurrogateStack& stack, const TargetCache& targets,
                               const std::vector<int>& rows, const LossWeights& lw);

// Same quantity via the autodiff tape, accumulating parameter gradients
// scaled so that `grad` holds d(total)/d(params).
RegressionLoss regression_loss_and_grad(SurrogateStack& stack, ParamRegistry& reg,
                                        const TargetCache& targets, const std::vector<int>& rows,
                                        const LossWeights& lw);

// Mean per-pair teacher-forced KL of the student against cached teacher
// logits, via the plain blended decode path.
double loss_distill(const ModelWeights& w, const SurrogateStack& stack, const TargetCache& targets,
                    const std::vector<int>& sample_ids);

// Tape version: the full student forward (base blocks + blended attention)
// runs on the tape so gradients reach the surrogate parameters. Adds
// lambda_kl * d(mean KL)/d(params) into the registry gradient.
double distill_loss_and_grad(const ModelWeights& w, SurrogateStack& stack, ParamRegistry& reg,
                             const TargetCache& targets, const std::vector<int>& sample_ids,
                             double lambda_kl);

struct TrainConfig {
  std::uint64_t seed = 99;
  std::int64_t budget_samples = 200000;  // query-position samples
  int b_ref = 8;
  std::int64_t n_ref = 4096;
  double rho_ref = 0.05;
  double peak_lr = 1e-4;
  double weight_decay = 0.0;
  int log_every = 200;
  int checkpoint_every = 0;       // steps; 0 disables
  std::string checkpoint_dir;
  std::string log_path;           // metric CSV; empty keeps rows in memory only
};

struct MetricRow {
  std::int64_t step = 0;
  double lr = 0.0;
  double loss_score = 0.0;
  double loss_target = 0.0;
  double loss_kl = 0.0;
  double wallclock_s = 0.0;
};

struct TrainResult {
  std::vector<MetricRow> rows;
  std::int64_t steps = 0;
  std::int64_t samples = 0;
  std::int64_t nan_masked = 0;
  int batch = 0;
  std::vector<std::string> checkpoints;
};

// Trains the stack in place on the cache's train split. Pure regression draws
// position samples; with distillation active batches are whole pairs and the
// budget counts their positions. The quadrature family trains with
// lambda_alpha forced to zero (its score is already the exact form over W).
TrainResult train(const ModelWeights& w, SurrogateStack& stack, const TargetCache& targets,
                  const LossWeights& lw, const TrainConfig& tc);

// Serialise metric rows as the train-log CSV (the wallclock column is the one
// deliberately non-deterministic output).
std::string train_log_csv(const std::vector<MetricRow>& rows);

}  // namespace kvs
