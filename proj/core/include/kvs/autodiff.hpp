#pragma once

#include <cstdint>
#include <vector>

#include "kvs/tensor.hpp"

// Minimal reverse-mode tape over vector-valued nodes. Forward values are
// computed eagerly at node creation; backward() walks the tape in reverse and
// accumulates gradients, flushing parameter gradients into caller-owned
// buffers. The op set covers exactly what the surrogate families, the losses
// and the base model's block forward need — enough for distillation gradients
// to flow from next-token logits through blended attention back into
// surrogate parameters.
//
// Storage is arena-style: reset() keeps capacity, so building millions of
// short tapes (one per training record) stays allocation-free after warmup.

namespace kvs::ad {

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

class Tape {
 public:
  // Leaf with no gradient tracking (constants, embeddings, frozen inputs).
  Var leaf(const double* v, int len);
  Var leaf(const Vector& v);
  // Trainable leaf: values are copied in; backward() adds this tape's
  // gradient into grad_out. Matrix-shaped params carry rows x cols.
  Var param(const double* v, double* grad_out, int len, int rows = 0, int cols = 0);

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var scale(Var a, double c);
  Var silu_op(Var a);
  // RMS norm with a constant gain vector, eps = 1e-6.
  Var rms_norm_op(Var a, const Vector& gain);
  // Rotary rotation by `pos`; the adjoint is the inverse rotation.
  Var rope_op(Var a, double pos, double rope_base);
  // y = M x with a frozen matrix (no gradient into M).
  Var matvec_const(const Matrix* m, Var x);
  // y = M x with a matrix-shaped param node.
  Var matvec_param(Var m, Var x);
  // y = M^T x with a matrix-shaped param node.
  Var mat_t_vec_param(Var m, Var x);
  Var dot_op(Var a, Var b);           // scalar
  Var lse_op(Var a);                  // scalar log-sum-exp
  Var softmax_op(Var a);
  Var concat(const std::vector<Var>& parts);
  // Blended attention: softmax over [score, local_logits...] weighting
  // [target, local_values...]. Exactly the decode-time combination; with no
  // local entries the output is the target itself.
  Var blend(Var score, Var target, const std::vector<Var>& local_logits,
            const std::vector<Var>& local_values);
  Var sq_diff(Var a, const Vector& target);    // scalar ||a - t||^2
  Var sq_diff_scalar(Var a, double target);    // scalar (a - t)^2
  // KL(softmax(teacher) || softmax(a)), teacher logits constant.
  Var kl_teacher(Var a, const Vector& teacher_logits);

  double value(Var v) const;           // scalar nodes
  const double* values(Var v) const;
  int len(Var v) const;

  // Seeds the scalar root with `seed`, propagates, and flushes param grads.
  void backward(Var root, double seed = 1.0);
  void reset();
  std::size_t node_count() const { return nodes_.size(); }

 private:
  enum class Op : std::uint8_t {
    leaf, param, add, sub, scale, silu, rmsnorm, rope, matvec_c, matvec_p,
    mat_t_vec_p, dot, lse, softmax, concat, blend, sq_diff, sq_diff_s, kl
  };

  struct Node {
    Op op;
    int off = 0;       // value offset
    int len = 0;
    int a = -1;        // parent ids
    int b = -1;
    int aux_off = 0;   // int payload (concat/blend parent lists)
    int aux_len = 0;
    int daux_off = 0;  // double payload (const targets, gains, teachers)
    int rows = 0;
    int cols = 0;
    double c0 = 0.0;
    double c1 = 0.0;
    const Matrix* ext = nullptr;
    double* gout = nullptr;
  };

  int push(Op op, int len);
  double* val(int id) { return vals_.data() + nodes_[static_cast<std::size_t>(id)].off; }
  const double* val(int id) const { return vals_.data() + nodes_[static_cast<std::size_t>(id)].off; }
  double* grad(int id) { return grads_.data() + nodes_[static_cast<std::size_t>(id)].off; }
  void check(Var v) const;

  std::vector<Node> nodes_;
  std::vector<double> vals_;
  std::vector<double> grads_;
  std::vector<int> aux_;
  std::vector<double> daux_;
};

}  // namespace kvs::ad
