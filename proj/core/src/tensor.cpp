#include "kvs/tensor.hpp"

#include <cmath>
#include <stdexcept>

namespace kvs {

void Matrix::append_row(const Vector& v) {
  if (cols == 0) cols = v.dim();
  if (v.dim() != cols) throw std::invalid_argument("Matrix::append_row: dim mismatch");
  data.insert(data.end(), v.data.begin(), v.data.end());
  ++rows;
}

void Matrix::truncate_rows(int new_rows) {
  if (new_rows < 0 || new_rows > rows) throw std::invalid_argument("Matrix::truncate_rows: bad row count");
  data.resize(static_cast<std::size_t>(new_rows) * cols);
  rows = new_rows;
}

Vector matvec(const Matrix& m, const Vector& x) {
  if (x.dim() != m.cols) throw std::invalid_argument("matvec: dim mismatch");
  Vector y(m.rows);
  for (int r = 0; r < m.rows; ++r) {
    const double* row = m.row(r);
    double s = 0.0;
    for (int c = 0; c < m.cols; ++c) s += row[c] * x[c];
    y[r] = s;
  }
  return y;
}

Vector mat_t_vec(const Matrix& m, const Vector& x) {
  if (x.dim() != m.rows) throw std::invalid_argument("mat_t_vec: dim mismatch");
  Vector y(m.cols);
  for (int r = 0; r < m.rows; ++r) {
    const double* row = m.row(r);
    const double xr = x[r];
    for (int c = 0; c < m.cols; ++c) y[c] += xr * row[c];
  }
  return y;
}

double dot(const Vector& a, const Vector& b) {
  if (a.dim() != b.dim()) throw std::invalid_argument("dot: dim mismatch");
  double s = 0.0;
  for (int i = 0; i < a.dim(); ++i) s += a[i] * b[i];
  return s;
}

double log_sum_exp(const Vector& s) {
  if (s.dim() == 0) throw std::invalid_argument("log_sum_exp: empty input");
  double m = s[0];
  for (int i = 1; i < s.dim(); ++i)
    if (s[i] > m) m = s[i];
  if (std::isnan(m)) return m;
  double acc = 0.0;
  for (int i = 0; i < s.dim(); ++i) acc += std::exp(s[i] - m);
  return m + std::log(acc);
}

Vector softmax(const Vector& s) {
  if (s.dim() == 0) throw std::invalid_argument("softmax: empty input");
  double m = s[0];
  for (int i = 1; i < s.dim(); ++i)
    if (s[i] > m) m = s[i];
  Vector p(s.dim());
  double acc = 0.0;
  for (int i = 0; i < s.dim(); ++i) {
    p[i] = std::exp(s[i] - m);
    acc += p[i];
  }
  for (int i = 0; i < s.dim(); ++i) p[i] /= acc;
  return p;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double silu(double x) { return x * sigmoid(x); }

double squared_distance(const Vector& a, const Vector& b) {
  if (a.dim() != b.dim()) throw std::invalid_argument("squared_distance: dim mismatch");
  double s = 0.0;
  for (int i = 0; i < a.dim(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

double squared_norm(const Vector& v) {
  double s = 0.0;
  for (int i = 0; i < v.dim(); ++i) s += v[i] * v[i];
  return s;
}

double kl_from_logits(const Vector& p_logits, const Vector& q_logits) {
  const int n = p_logits.dim();
  if (n == 0 || q_logits.dim() != n)
    throw std::invalid_argument("kl_from_logits: dim mismatch");
  double mp = p_logits[0], mq = q_logits[0];
  for (int i = 1; i < n; ++i) {
    if (p_logits[i] > mp) mp = p_logits[i];
    if (q_logits[i] > mq) mq = q_logits[i];
  }
  double zp = 0.0, zq = 0.0;
  for (int i = 0; i < n; ++i) {
    zp += std::exp(p_logits[i] - mp);
    zq += std::exp(q_logits[i] - mq);
  }
  const double lse_p = mp + std::log(zp);
  const double lse_q = mq + std::log(zq);
  double kl = 0.0;
  for (int i = 0; i < n; ++i) {
    const double p = std::exp(p_logits[i] - lse_p);
    kl += p * ((p_logits[i] - lse_p) - (q_logits[i] - lse_q));
  }
  return kl;
}

namespace {

constexpr std::uint64_t kGamma = 0x9e3779b97f4a7c15ULL;

std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

Prng::Prng(std::uint64_t seed) : seed_(seed) {}

std::uint64_t Prng::next_u64() {
  const std::uint64_t c = counter_++;
  return mix64(seed_ + (c + 1) * kGamma);
}

double Prng::next_uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Prng::next_gaussian() {
  // Box-Muller; u1 nudged away from zero so log stays finite.
  const double u1 = next_uniform();
  const double u2 = next_uniform();
  const double r = std::sqrt(-2.0 * std::log(u1 + 0x1.0p-53));
  return r * std::cos(2.0 * 3.14159265358979323846 * u2);
}

std::uint64_t Prng::next_below(std::uint64_t bound) {
  if (bound == 0) throw std::invalid_argument("Prng::next_below: zero bound");
  // Rejection sampling over the largest multiple of bound.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
  for (;;) {
    const std::uint64_t x = next_u64();
    if (x < limit) return x % bound;
  }
}

Prng Prng::split(std::uint64_t key) const {
  return Prng(mix64(seed_ ^ (key + 1) * 0xda942042e4dd58b5ULL));
}

}  // namespace kvs
