#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

// Dense double-precision kernels shared by every other component.
// All reductions run left-to-right over explicit loops so that results are
// reproducible bit-for-bit across runs and platforms with the same libm.

namespace kvs {

struct Vector {
  std::vector<double> data;

  Vector() = default;
  explicit Vector(int dim, double fill = 0.0) : data(static_cast<std::size_t>(dim), fill) {}

  int dim() const { return static_cast<int>(data.size()); }
  double& operator[](int i) { return data[static_cast<std::size_t>(i)]; }
  double operator[](int i) const { return data[static_cast<std::size_t>(i)]; }
};

// Row-major matrix. Rows can be appended (used by the KV cache).
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(int r, int c, double fill = 0.0)
      : rows(r), cols(c), data(static_cast<std::size_t>(r) * static_cast<std::size_t>(c), fill) {}

  double& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  double at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
  double* row(int r) { return data.data() + static_cast<std::size_t>(r) * cols; }
  const double* row(int r) const { return data.data() + static_cast<std::size_t>(r) * cols; }

  void append_row(const Vector& v);
  void truncate_rows(int new_rows);
};

// y = M x
Vector matvec(const Matrix& m, const Vector& x);
// y = M^T x
Vector mat_t_vec(const Matrix& m, const Vector& x);
double dot(const Vector& a, const Vector& b);

// Max-shifted log(sum exp(s_j)). Safe for inputs near the double overflow
// boundary; errors on empty input and propagates NaN.
double log_sum_exp(const Vector& s);
// Max-shifted softmax; entries sum to 1 up to rounding.
Vector softmax(const Vector& s);
double silu(double x);
double sigmoid(double x);

double squared_distance(const Vector& a, const Vector& b);
double squared_norm(const Vector& v);

// KL(softmax(p_logits) || softmax(q_logits)) via max-shifted log-probs.
double kl_from_logits(const Vector& p_logits, const Vector& q_logits);

// Counter-based splittable PRNG (SplitMix64 output function over an
// incrementing counter). Streams are fully determined by (seed, key path),
// independent of how many draws other streams have consumed. The generator is
// frozen: changing it invalidates every seeded artifact in the repo.
class Prng {
 public:
  explicit Prng(std::uint64_t seed);

  std::uint64_t next_u64();
  // Uniform on [0, 1) with 53 random bits.
  double next_uniform();
  // Standard normal via Box-Muller; consumes exactly two uniforms per call.
  double next_gaussian();
  // Uniform integer in [0, bound) by rejection; errors on bound == 0.
  std::uint64_t next_below(std::uint64_t bound);

  // Derive an independent substream. Depends only on the construction seed
  // and the key, never on draw position.
  Prng split(std::uint64_t key) const;

  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_ = 0;
  std::uint64_t counter_ = 0;
};

}  // namespace kvs
