#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "kvs/model.hpp"
#include "kvs/tensor.hpp"

// Trained replacements for long-context attention. One module per
// (layer, KV head); query heads in a group share their KV head's module. Each
// module maps a rotated query q in R^d to
//   score(q)  ~ alpha(q)   (log-normaliser of context attention)
//   target(q) ~ A(q)       (context attention readout, R^d)
//
// Families:
//  * quadrature: learnable key/value banks (W, Z) of p rows; score/target are
//    the exact attention forms over (W, Z), initialised from the first p rows
//    of the true cache. 2pd parameters.
//  * mlp: SiLU networks with skip-to-input layers; separate score and target
//    heads on an optional shared backbone, final linears zero-initialised.
//
// Capacity is budgeted as a fraction rho of the per-head context cache size
// (2nd entries per layer), optionally tilted across layer groups.

namespace kvs {

enum class Family { quadrature, mlp };

std::string family_name(Family f);
Family family_from_name(const std::string& name);

struct CapacityGroup {
  int begin = 0;
  int end = 0;     // exclusive
  double mult = 1.0;
};

struct CapacityPlan {
  double rho = 0.0;
  std::int64_t n = 0;
  int head_dim = 0;
  int layers = 0;
  int kv_heads = 0;
  std::vector<CapacityGroup> groups;
  std::vector<std::int64_t> per_layer_budget;  // params per module at layer l

  std::int64_t planned_total() const;  // sum of budgets across all modules
  double target_total() const {
    return rho * 2.0 * static_cast<double>(n) * head_dim * layers * kv_heads;
  }
};

// budget(l) = floor(rho * 2nd * mult(l) * L / sum_l' mult(l')). Groups must
// cover [0, layers) disjointly; empty groups list means uniform multipliers.
CapacityPlan plan_capacity(double rho, std::int64_t n, int head_dim, int layers, int kv_heads,
                           const std::vector<CapacityGroup>& groups = {});

struct QuadratureModule {
  int p = 0;
  int d = 0;
  Matrix w;  // p x d, plays the role of keys
  Matrix z;  // p x d, plays the role of values
};

// p = floor(budget / 2d); errors when even p = 1 does not fit.
int size_quadrature_to_budget(std::int64_t budget, int d);
std::int64_t quad_param_count(int p, int d);
// First p rows of the true rotated cache for one (layer, head).
QuadratureModule quad_init_from_cache(const Matrix& k, const Matrix& v, int p);
double quad_score(const QuadratureModule& m, const Vector& q);
Vector quad_target(const QuadratureModule& m, const Vector& q);

struct MlpShape {
  int depth_backbone = 0;
  int depth_score = 2;
  int depth_target = 3;
  bool residual = false;
  bool layer_norm = false;
  double score_frac = 1.0 / 9.0;  // share of the budget given to the score head
};

struct MlpDims {
  int w_backbone = 0;  // 0 when depth_backbone == 0
  int w_score = 0;
  int w_target = 0;
};

// Offsets into the flat parameter buffer. Layer 0 of a chain is
// silu(U0 x + b0); deeper layers are silu(Vk x_in + Uk h + bk) where x_in is
// the chain input (skip-to-input). Heads end in a linear projection.
struct ChainLayer {
  std::int64_t off_u = -1;
  std::int64_t off_v = -1;  // -1 on layer 0
  std::int64_t off_b = -1;
  int in = 0;
  int width = 0;
};

struct HeadLayout {
  std::vector<ChainLayer> layers;
  std::int64_t off_w = -1;  // final linear, out x h_dim
  std::int64_t off_b = -1;
  int in_final = 0;
  int out = 0;
};

struct MlpLayout {
  std::vector<ChainLayer> backbone;
  HeadLayout score;
  HeadLayout target;
  std::int64_t total = 0;
};

MlpLayout mlp_layout(const MlpShape& shape, const MlpDims& dims, int d);
std::int64_t mlp_param_count(const MlpShape& shape, const MlpDims& dims, int d);

// Widths maximal under the split budget: the score head gets
// floor(score_frac * budget), the backbone+target side the remainder. Widths
// are the largest whose exact parameter count fits; leftover is reported by
// the caller via mlp_param_count, never redistributed.
MlpDims size_mlp_to_budget(std::int64_t budget, int d, const MlpShape& shape);

struct MlpModule {
  int d = 0;
  MlpShape shape;
  MlpDims dims;
  MlpLayout layout;
  std::vector<double> params;
};

MlpModule mlp_init(const MlpShape& shape, const MlpDims& dims, int d, Prng& g);
// Returns (score, target).
std::pair<double, Vector> mlp_forward(const MlpModule& m, const Vector& q);

struct SurrogateStack {
  Family family = Family::mlp;
  int layers = 0;
  int kv_heads = 0;
  int group_size = 1;
  int head_dim = 0;
  CapacityPlan plan;
  MlpShape mlp_shape;
  std::vector<QuadratureModule> quad;  // layers * kv_heads when family == quadrature
  std::vector<MlpModule> mlp;          // layers * kv_heads when family == mlp
  std::uint64_t base_hash = 0;         // weights hash of the frozen model

  int module_count() const { return layers * kv_heads; }
  // Query heads of one group map to the same module id.
  int module_index(int layer, int query_head) const {
    return layer * kv_heads + query_head / group_size;
  }
  std::pair<double, Vector> forward(int module_idx, const Vector& q) const;
  std::int64_t total_params() const;
  // Trainable buffers in a fixed order (per module: quadrature W then Z, or
  // the MLP's single flat buffer). The optimizer state is aligned to this.
  std::vector<std::span<double>> param_chunks();
};

// cache is required for the quadrature family (init reads its leading rows)
// and ignored for mlp.
SurrogateStack init_surrogate_stack(Family family, const CapacityPlan& plan, int group_size,
                                    const MlpShape& shape, const KVCache* cache,
                                    std::uint64_t seed, std::uint64_t base_hash);

void save_stack(const SurrogateStack& s, const std::string& path);
SurrogateStack load_stack(const std::string& path);
SurrogateStack load_stack(const std::string& path, std::uint64_t expected_base_hash);

}  // namespace kvs
