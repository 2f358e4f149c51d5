#include "kvs/autodiff.hpp"

#include <cmath>
#include <stdexcept>

namespace kvs::ad {

namespace {
constexpr double kRmsEps = 1e-6;
}

void Tape::check(Var v) const {
  if (!v.valid() || v.id >= static_cast<int>(nodes_.size()))
    throw std::invalid_argument("Tape: invalid Var");
}

int Tape::push(Op op, int len) {
  Node n;
  n.op = op;
  n.off = static_cast<int>(vals_.size());
  n.len = len;
  vals_.resize(vals_.size() + static_cast<std::size_t>(len), 0.0);
  nodes_.push_back(n);
  return static_cast<int>(nodes_.size()) - 1;
}

Var Tape::leaf(const double* v, int len) {
  const int id = push(Op::leaf, len);
  double* out = val(id);
  for (int i = 0; i < len; ++i) out[i] = v[i];
  return {id};
}

Var Tape::leaf(const Vector& v) { return leaf(v.data.data(), v.dim()); }

Var Tape::param(const double* v, double* grad_out, int len, int rows, int cols) {
  if (rows != 0 && rows * cols != len) throw std::invalid_argument("Tape::param: shape mismatch");
  const int id = push(Op::param, len);
  double* out = val(id);
  for (int i = 0; i < len; ++i) out[i] = v[i];
  nodes_.back().rows = rows;
  nodes_.back().cols = cols;
  nodes_.back().gout = grad_out;
  return {id};
}

Var Tape::add(Var a, Var b) {
  check(a);
  check(b);
  const int n = len(a);
  if (n != len(b)) throw std::invalid_argument("Tape::add: length mismatch");
  const int id = push(Op::add, n);
  const double* pa = val(a.id);
  const double* pb = val(b.id);
  double* out = val(id);
  for (int i = 0; i < n; ++i) out[i] = pa[i] + pb[i];
  nodes_.back().a = a.id;
  nodes_.back().b = b.id;
  return {id};
}

Var Tape::sub(Var a, Var b) {
  check(a);
  check(b);
  const int n = len(a);
  if (n != len(b)) throw std::invalid_argument("Tape::sub: length mismatch");
  const int id = push(Op::sub, n);
  const double* pa = val(a.id);
  const double* pb = val(b.id);
  double* out = val(id);
  for (int i = 0; i < n; ++i) out[i] = pa[i] - pb[i];
  nodes_.back().a = a.id;
  nodes_.back().b = b.id;
  return {id};
}

Var Tape::scale(Var a, double c) {
  check(a);
  const int n = len(a);
  const int id = push(Op::scale, n);
  const double* pa = val(a.id);
  double* out = val(id);
  for (int i = 0; i < n; ++i) out[i] = c * pa[i];
  nodes_.back().a = a.id;
  nodes_.back().c0 = c;
  return {id};
}

Var Tape::silu_op(Var a) {
  check(a);
  const int n = len(a);
  const int id = push(Op::silu, n);
  const double* pa = val(a.id);
  double* out = val(id);
  for (int i = 0; i < n; ++i) out[i] = silu(pa[i]);
  nodes_.back().a = a.id;
  return {id};
}

Var Tape::rms_norm_op(Var a, const Vector& gain) {
  check(a);
  const int n = len(a);
  if (gain.dim() != n) throw std::invalid_argument("Tape::rms_norm_op: gain dim mismatch");
  const int id = push(Op::rmsnorm, n);
  Node& nd = nodes_.back();
  nd.a = a.id;
  nd.daux_off = static_cast<int>(daux_.size());
  daux_.insert(daux_.end(), gain.data.begin(), gain.data.end());
  const double* pa = val(a.id);
  double ms = 0.0;
  for (int i = 0; i < n; ++i) ms += pa[i] * pa[i];
  const double r = std::sqrt(ms / n + kRmsEps);
  double* out = val(id);
  for (int i = 0; i < n; ++i) out[i] = daux_[static_cast<std::size_t>(nd.daux_off) + i] * pa[i] / r;
  nd.c0 = r;
  return {id};
}

Var Tape::rope_op(Var a, double pos, double rope_base) {
  check(a);
  const int n = len(a);
  if (n % 2 != 0) throw std::invalid_argument("Tape::rope_op: odd dimension");
  const int id = push(Op::rope, n);
  const double* pa = val(a.id);
  double* out = val(id);
  for (int i = 0; i < n / 2; ++i) {
    const double theta = pos * std::pow(rope_base, -2.0 * i / n);
    const double c = std::cos(theta);
    const double s = std::sin(theta);
    out[2 * i] = pa[2 * i] * c - pa[2 * i + 1] * s;
    out[2 * i + 1] = pa[2 * i] * s + pa[2 * i + 1] * c;
  }
  nodes_.back().a = a.id;
  nodes_.back().c0 = pos;
  nodes_.back().c1 = rope_base;
  return {id};
}

Var Tape::matvec_const(const Matrix* m, Var x) {
  check(x);
  if (len(x) != m->cols) throw std::invalid_argument("Tape::matvec_const: dim mismatch");
  const int id = push(Op::matvec_c, m->rows);
  const double* px = val(x.id);
  double* out = val(id);
  for (int r = 0; r < m->rows; ++r) {
    const double* row = m->row(r);
    double s = 0.0;
    for (int c = 0; c < m->cols; ++c) s += row[c] * px[c];
    out[r] = s;
  }
  nodes_.back().a = x.id;
  nodes_.back().ext = m;
  return {id};
}

Var Tape::matvec_param(Var m, Var x) {
  check(m);
  check(x);
  const Node& mn = nodes_[static_cast<std::size_t>(m.id)];
  if (mn.rows == 0) throw std::invalid_argument("Tape::matvec_param: param has no shape");
  if (len(x) != mn.cols) throw std::invalid_argument("Tape::matvec_param: dim mismatch");
  const int rows = mn.rows;
  const int cols = mn.cols;
  const int id = push(Op::matvec_p, rows);
  const double* pm = val(m.id);
  const double* px = val(x.id);
  double* out = val(id);
  for (int r = 0; r < rows; ++r) {
    const double* row = pm + static_cast<std::size_t>(r) * cols;
    double s = 0.0;
    for (int c = 0; c < cols; ++c) s += row[c] * px[c];
    out[r] = s;
  }
  Node& nd = nodes_.back();
  nd.a = m.id;
  nd.b = x.id;
  nd.rows = rows;
  nd.cols = cols;
  return {id};
}

Var Tape::mat_t_vec_param(Var m, Var x) {
  check(m);
  check(x);
  const Node& mn = nodes_[static_cast<std::size_t>(m.id)];
  if (mn.rows == 0) throw std::invalid_argument("Tape::mat_t_vec_param: param has no shape");
  if (len(x) != mn.rows) throw std::invalid_argument("Tape::mat_t_vec_param: dim mismatch");
  const int rows = mn.rows;
  const int cols = mn.cols;
  const int id = push(Op::mat_t_vec_p, cols);
  const double* pm = val(m.id);
  const double* px = val(x.id);
  double* out = val(id);
  for (int r = 0; r < rows; ++r) {
    const double* row = pm + static_cast<std::size_t>(r) * cols;
    for (int c = 0; c < cols; ++c) out[c] += px[r] * row[c];
  }
  Node& nd = nodes_.back();
  nd.a = m.id;
  nd.b = x.id;
  nd.rows = rows;
  nd.cols = cols;
  return {id};
}

Var Tape::dot_op(Var a, Var b) {
  check(a);
  check(b);
  const int n = len(a);
  if (n != len(b)) throw std::invalid_argument("Tape::dot_op: length mismatch");
  const int id = push(Op::dot, 1);
  const double* pa = val(a.id);
  const double* pb = val(b.id);
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += pa[i] * pb[i];
  *val(id) = s;
  nodes_.back().a = a.id;
  nodes_.back().b = b.id;
  return {id};
}

Var Tape::lse_op(Var a) {
  check(a);
  const int n = len(a);
  if (n == 0) throw std::invalid_argument("Tape::lse_op: empty input");
  const int id = push(Op::lse, 1);
  const double* pa = val(a.id);
  double m = pa[0];
  for (int i = 1; i < n; ++i)
    if (pa[i] > m) m = pa[i];
  double acc = 0.0;
  for (int i = 0; i < n; ++i) acc += std::exp(pa[i] - m);
  *val(id) = m + std::log(acc);
  nodes_.back().a = a.id;
  return {id};
}

Var Tape::softmax_op(Var a) {
  check(a);
  const int n = len(a);
  if (n == 0) throw std::invalid_argument("Tape::softmax_op: empty input");
  const int id = push(Op::softmax, n);
  const double* pa = val(a.id);
  double m = pa[0];
  for (int i = 1; i < n; ++i)
    if (pa[i] > m) m = pa[i];
  double acc = 0.0;
  double* out = val(id);
  for (int i = 0; i < n; ++i) {
    out[i] = std::exp(pa[i] - m);
    acc += out[i];
  }
  for (int i = 0; i < n; ++i) out[i] /= acc;
  nodes_.back().a = a.id;
  return {id};
}

Var Tape::concat(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("Tape::concat: empty list");
  int total = 0;
  for (Var p : parts) {
    check(p);
    total += len(p);
  }
  const int id = push(Op::concat, total);
  Node& nd = nodes_.back();
  nd.aux_off = static_cast<int>(aux_.size());
  nd.aux_len = static_cast<int>(parts.size());
  for (Var p : parts) aux_.push_back(p.id);
  double* out = val(id);
  int at = 0;
  for (Var p : parts) {
    const double* pv = val(p.id);
    for (int i = 0; i < len(p); ++i) out[at++] = pv[i];
  }
  return {id};
}

Var Tape::blend(Var score, Var target, const std::vector<Var>& local_logits,
                const std::vector<Var>& local_values) {
  check(score);
  check(target);
  if (len(score) != 1) throw std::invalid_argument("Tape::blend: score must be scalar");
  if (local_logits.size() != local_values.size())
    throw std::invalid_argument("Tape::blend: logit/value count mismatch");
  const int d = len(target);
  for (Var v : local_values) {
    check(v);
    if (len(v) != d) throw std::invalid_argument("Tape::blend: value dim mismatch");
  }
  for (Var l : local_logits) {
    check(l);
    if (len(l) != 1) throw std::invalid_argument("Tape::blend: local logits must be scalars");
  }
  const int m = static_cast<int>(local_logits.size());
  const int id = push(Op::blend, d);
  Node& nd = nodes_.back();
  nd.a = score.id;
  nd.b = target.id;
  nd.aux_off = static_cast<int>(aux_.size());
  nd.aux_len = 2 * m;
  for (Var l : local_logits) aux_.push_back(l.id);
  for (Var v : local_values) aux_.push_back(v.id);

  // One softmax over [score, locals]: shared normaliser exactly as decode.
  double mx = *val(score.id);
  for (int j = 0; j < m; ++j) mx = std::max(mx, *val(aux_[static_cast<std::size_t>(nd.aux_off) + j]));
  double denom = std::exp(*val(score.id) - mx);
  double* out = val(id);
  const double* tv = val(target.id);
  const double w0 = denom;
  for (int c = 0; c < d; ++c) out[c] = w0 * tv[c];
  for (int j = 0; j < m; ++j) {
    const double wj = std::exp(*val(aux_[static_cast<std::size_t>(nd.aux_off) + j]) - mx);
    denom += wj;
    const double* vv = val(aux_[static_cast<std::size_t>(nd.aux_off) + m + j]);
    for (int c = 0; c < d; ++c) out[c] += wj * vv[c];
  }
  for (int c = 0; c < d; ++c) out[c] /= denom;
  return {id};
}

Var Tape::sq_diff(Var a, const Vector& target) {
  check(a);
  const int n = len(a);
  if (target.dim() != n) throw std::invalid_argument("Tape::sq_diff: target dim mismatch");
  const int id = push(Op::sq_diff, 1);
  Node& nd = nodes_.back();
  nd.a = a.id;
  nd.daux_off = static_cast<int>(daux_.size());
  daux_.insert(daux_.end(), target.data.begin(), target.data.end());
  const double* pa = val(a.id);
  double s = 0.0;
  for (int i = 0; i < n; ++i) {
    const double diff = pa[i] - daux_[static_cast<std::size_t>(nd.daux_off) + i];
    s += diff * diff;
  }
  *val(id) = s;
  return {id};
}

Var Tape::sq_diff_scalar(Var a, double target) {
  check(a);
  if (len(a) != 1) throw std::invalid_argument("Tape::sq_diff_scalar: input must be scalar");
  const int id = push(Op::sq_diff_s, 1);
  const double diff = *val(a.id) - target;
  *val(id) = diff * diff;
  nodes_.back().a = a.id;
  nodes_.back().c0 = target;
  return {id};
}

Var Tape::kl_teacher(Var a, const Vector& teacher_logits) {
  check(a);
  const int n = len(a);
  if (teacher_logits.dim() != n) throw std::invalid_argument("Tape::kl_teacher: teacher dim mismatch");
  const int id = push(Op::kl, 1);
  Node& nd = nodes_.back();
  nd.a = a.id;
  nd.daux_off = static_cast<int>(daux_.size());
  daux_.insert(daux_.end(), teacher_logits.data.begin(), teacher_logits.data.end());

  const double* ps = val(a.id);
  const double* pt = daux_.data() + nd.daux_off;
  double ms = ps[0], mt = pt[0];
  for (int i = 1; i < n; ++i) {
    if (ps[i] > ms) ms = ps[i];
    if (pt[i] > mt) mt = pt[i];
  }
  double zs = 0.0, zt = 0.0;
  for (int i = 0; i < n; ++i) {
    zs += std::exp(ps[i] - ms);
    zt += std::exp(pt[i] - mt);
  }
  const double lse_s = ms + std::log(zs);
  const double lse_t = mt + std::log(zt);
  double kl = 0.0;
  for (int i = 0; i < n; ++i) {
    const double p = std::exp(pt[i] - lse_t);
    kl += p * ((pt[i] - lse_t) - (ps[i] - lse_s));
  }
  *val(id) = kl;
  return {id};
}

double Tape::value(Var v) const {
  check(v);
  if (len(v) != 1) throw std::invalid_argument("Tape::value: not a scalar node");
  return *val(v.id);
}

const double* Tape::values(Var v) const {
  check(v);
  return val(v.id);
}

int Tape::len(Var v) const {
  check(v);
  return nodes_[static_cast<std::size_t>(v.id)].len;
}

void Tape::backward(Var root, double seed) {
  check(root);
  if (len(root) != 1) throw std::invalid_argument("Tape::backward: root must be scalar");
  grads_.assign(vals_.size(), 0.0);
  grads_[static_cast<std::size_t>(nodes_[static_cast<std::size_t>(root.id)].off)] = seed;

  for (int id = root.id; id >= 0; --id) {
    const Node& nd = nodes_[static_cast<std::size_t>(id)];
    const double* g = grads_.data() + nd.off;
    switch (nd.op) {
      case Op::leaf:
        break;
      case Op::param:
        if (nd.gout) {
          for (int i = 0; i < nd.len; ++i) nd.gout[i] += g[i];
        }
        break;
      case Op::add: {
        double* ga = grad(nd.a);
        double* gb = grad(nd.b);
        for (int i = 0; i < nd.len; ++i) {
          ga[i] += g[i];
          gb[i] += g[i];
        }
        break;
      }
      case Op::sub: {
        double* ga = grad(nd.a);
        double* gb = grad(nd.b);
        for (int i = 0; i < nd.len; ++i) {
          ga[i] += g[i];
          gb[i] -= g[i];
        }
        break;
      }
      case Op::scale: {
        double* ga = grad(nd.a);
        for (int i = 0; i < nd.len; ++i) ga[i] += nd.c0 * g[i];
        break;
      }
      case Op::silu: {
        double* ga = grad(nd.a);
        const double* x = val(nd.a);
        for (int i = 0; i < nd.len; ++i) {
          const double s = sigmoid(x[i]);
          ga[i] += g[i] * s * (1.0 + x[i] * (1.0 - s));
        }
        break;
      }
      case Op::rmsnorm: {
        double* ga = grad(nd.a);
        const double* x = val(nd.a);
        const double* gain = daux_.data() + nd.daux_off;
        const double r = nd.c0;
        double inner = 0.0;
        for (int i = 0; i < nd.len; ++i) inner += g[i] * gain[i] * x[i];
        inner /= (static_cast<double>(nd.len) * r * r * r);
        for (int i = 0; i < nd.len; ++i) ga[i] += g[i] * gain[i] / r - x[i] * inner;
        break;
      }
      case Op::rope: {
        double* ga = grad(nd.a);
        for (int i = 0; i < nd.len / 2; ++i) {
          const double theta = nd.c0 * std::pow(nd.c1, -2.0 * i / nd.len);
          const double c = std::cos(theta);
          const double s = std::sin(theta);
          // transpose of the rotation = rotation by -theta
          ga[2 * i] += g[2 * i] * c + g[2 * i + 1] * s;
          ga[2 * i + 1] += -g[2 * i] * s + g[2 * i + 1] * c;
        }
        break;
      }
      case Op::matvec_c: {
        double* gx = grad(nd.a);
        const Matrix* m = nd.ext;
        for (int r = 0; r < m->rows; ++r) {
          const double* row = m->row(r);
          const double gr = g[r];
          for (int c = 0; c < m->cols; ++c) gx[c] += gr * row[c];
        }
        break;
      }
      case Op::matvec_p: {
        double* gm = grad(nd.a);
        double* gx = grad(nd.b);
        const double* pm = val(nd.a);
        const double* px = val(nd.b);
        for (int r = 0; r < nd.rows; ++r) {
          const double gr = g[r];
          const std::size_t base = static_cast<std::size_t>(r) * nd.cols;
          for (int c = 0; c < nd.cols; ++c) {
            gm[base + c] += gr * px[c];
            gx[c] += gr * pm[base + c];
          }
        }
        break;
      }
      case Op::mat_t_vec_p: {
        double* gm = grad(nd.a);
        double* gx = grad(nd.b);
        const double* pm = val(nd.a);
        const double* px = val(nd.b);
        for (int r = 0; r < nd.rows; ++r) {
          const std::size_t base = static_cast<std::size_t>(r) * nd.cols;
          double s = 0.0;
          for (int c = 0; c < nd.cols; ++c) {
            gm[base + c] += px[r] * g[c];
            s += pm[base + c] * g[c];
          }
          gx[r] += s;
        }
        break;
      }
      case Op::dot: {
        double* ga = grad(nd.a);
        double* gb = grad(nd.b);
        const double* pa = val(nd.a);
        const double* pb = val(nd.b);
        const int n = nodes_[static_cast<std::size_t>(nd.a)].len;
        for (int i = 0; i < n; ++i) {
          ga[i] += g[0] * pb[i];
          gb[i] += g[0] * pa[i];
        }
        break;
      }
      case Op::lse: {
        double* ga = grad(nd.a);
        const double* x = val(nd.a);
        const int n = nodes_[static_cast<std::size_t>(nd.a)].len;
        double m = x[0];
        for (int i = 1; i < n; ++i)
          if (x[i] > m) m = x[i];
        double acc = 0.0;
        for (int i = 0; i < n; ++i) acc += std::exp(x[i] - m);
        for (int i = 0; i < n; ++i) ga[i] += g[0] * std::exp(x[i] - m) / acc;
        break;
      }
      case Op::softmax: {
        double* ga = grad(nd.a);
        const double* p = val(id);
        double inner = 0.0;
        for (int i = 0; i < nd.len; ++i) inner += g[i] * p[i];
        for (int i = 0; i < nd.len; ++i) ga[i] += p[i] * (g[i] - inner);
        break;
      }
      case Op::concat: {
        int at = 0;
        for (int k = 0; k < nd.aux_len; ++k) {
          const int pid = aux_[static_cast<std::size_t>(nd.aux_off) + k];
          double* gp = grad(pid);
          const int plen = nodes_[static_cast<std::size_t>(pid)].len;
          for (int i = 0; i < plen; ++i) gp[i] += g[at++];
        }
        break;
      }
      case Op::blend: {
        const int m = nd.aux_len / 2;
        const int d = nd.len;
        const double* y = val(id);
        const double* tv = val(nd.b);
        // Recompute the shared softmax weights.
        double mx = *val(nd.a);
        for (int j = 0; j < m; ++j)
          mx = std::max(mx, *val(aux_[static_cast<std::size_t>(nd.aux_off) + j]));
        double denom = std::exp(*val(nd.a) - mx);
        const double e0 = denom;
        for (int j = 0; j < m; ++j) denom += std::exp(*val(aux_[static_cast<std::size_t>(nd.aux_off) + j]) - mx);
        const double w0 = e0 / denom;
        // d y / d target = w0 * I ; d y / d score = w0 * (target - y)
        double* gt = grad(nd.b);
        double acc_score = 0.0;
        for (int c = 0; c < d; ++c) {
          gt[c] += w0 * g[c];
          acc_score += g[c] * (tv[c] - y[c]);
        }
        *grad(nd.a) += w0 * acc_score;
        for (int j = 0; j < m; ++j) {
          const int lid = aux_[static_cast<std::size_t>(nd.aux_off) + j];
          const int vid = aux_[static_cast<std::size_t>(nd.aux_off) + m + j];
          const double wj = std::exp(*val(lid) - mx) / denom;
          const double* vv = val(vid);
          double* gv = grad(vid);
          double acc = 0.0;
          for (int c = 0; c < d; ++c) {
            gv[c] += wj * g[c];
            acc += g[c] * (vv[c] - y[c]);
          }
          *grad(lid) += wj * acc;
        }
        break;
      }
      case Op::sq_diff: {
        double* ga = grad(nd.a);
        const double* x = val(nd.a);
        const double* t = daux_.data() + nd.daux_off;
        const int n = nodes_[static_cast<std::size_t>(nd.a)].len;
        for (int i = 0; i < n; ++i) ga[i] += g[0] * 2.0 * (x[i] - t[i]);
        break;
      }
      case Op::sq_diff_s: {
        *grad(nd.a) += g[0] * 2.0 * (*val(nd.a) - nd.c0);
        break;
      }
      case Op::kl: {
        double* ga = grad(nd.a);
        const double* ps = val(nd.a);
        const double* pt = daux_.data() + nd.daux_off;
        const int n = nodes_[static_cast<std::size_t>(nd.a)].len;
        double ms = ps[0], mt = pt[0];
        for (int i = 1; i < n; ++i) {
          if (ps[i] > ms) ms = ps[i];
          if (pt[i] > mt) mt = pt[i];
        }
        double zs = 0.0, zt = 0.0;
        for (int i = 0; i < n; ++i) {
          zs += std::exp(ps[i] - ms);
          zt += std::exp(pt[i] - mt);
        }
        for (int i = 0; i < n; ++i) {
          const double soft_s = std::exp(ps[i] - ms) / zs;
          const double soft_t = std::exp(pt[i] - mt) / zt;
          ga[i] += g[0] * (soft_s - soft_t);
        }
        break;
      }
    }
  }
}

void Tape::reset() {
  nodes_.clear();
  vals_.clear();
  grads_.clear();
  aux_.clear();
  daux_.clear();
}

}  // namespace kvs::ad
