#include "kvs/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <numbers>
#include <stdexcept>
#include <string>

#include "kvs/autodiff.hpp"
#include "kvs/blend.hpp"
#include "kvs/serial.hpp"

namespace kvs {

double lr_schedule(std::int64_t step, std::int64_t total, std::int64_t warmup, double peak) {
  if (total < 1) throw std::invalid_argument("lr_schedule: total must be >= 1");
  if (warmup < 0 || warmup > total) throw std::invalid_argument("lr_schedule: warmup out of range");
  if (step < 0) throw std::invalid_argument("lr_schedule: negative step");
  if (step >= total) return 0.0;
  if (step < warmup)
    return peak * static_cast<double>(step) / static_cast<double>(warmup);
  const double frac =
      static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

std::int64_t warmup_steps(std::int64_t total_steps, std::int64_t dataset_size, int batch) {
  if (total_steps < 1) throw std::invalid_argument("warmup_steps: total must be >= 1");
  if (dataset_size < 1 || batch < 1) throw std::invalid_argument("warmup_steps: bad sizes");
  const std::int64_t by_budget = total_steps / 40;
  const std::int64_t by_epochs = 10 * dataset_size / batch;
  std::int64_t w = std::min(by_budget, by_epochs);
  return std::clamp<std::int64_t>(w, 1, total_steps);
}

int effective_batch_size(int b_ref, std::int64_t n, std::int64_t n_ref, double rho, double rho_ref,
                         bool distill) {
  if (b_ref < 1 || n < 1 || n_ref < 1) throw std::invalid_argument("effective_batch_size: bad sizes");
  if (rho <= 0.0 || rho_ref <= 0.0) throw std::invalid_argument("effective_batch_size: bad rho");
  double raw = static_cast<double>(b_ref) * (static_cast<double>(n_ref) / static_cast<double>(n)) *
               std::sqrt(rho_ref / rho);
  if (distill) raw *= 0.5;
  const long long r = std::llround(raw);
  return static_cast<int>(std::clamp<long long>(r, 1, 32));
}

ParamRegistry::ParamRegistry(SurrogateStack& stack) {
  chunks = stack.param_chunks();
  offsets.reserve(chunks.size());
  for (const auto& c : chunks) {
    offsets.push_back(total);
    total += c.size();
  }
  grad.assign(total, 0.0);
}

void ParamRegistry::zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

TrainState::TrainState(std::size_t total_params, const AdamConfig& cfg)
    : adam(cfg), m(total_params, 0.0), v(total_params, 0.0) {}

void optimizer_step(TrainState& st, ParamRegistry& reg, double lr) {
  if (st.m.size() != reg.total) throw std::invalid_argument("optimizer_step: state size mismatch");
  double* g = reg.grad.data();
  for (std::size_t i = 0; i < reg.total; ++i) {
    if (!std::isfinite(g[i])) {
      g[i] = 0.0;
      ++st.nan_masked;
    }
  }
  double sq = 0.0;
  for (std::size_t i = 0; i < reg.total; ++i) sq += g[i] * g[i];
  const double norm = std::sqrt(sq);
  if (norm > st.adam.clip) {
    const double s = st.adam.clip / norm;
    for (std::size_t i = 0; i < reg.total; ++i) g[i] *= s;
  }
  st.step += 1;
  const double bc1 = 1.0 - std::pow(st.adam.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(st.adam.beta2, static_cast<double>(st.step));
  std::size_t flat = 0;
  for (auto& chunk : reg.chunks) {
    for (double& p : chunk) {
      const double gi = g[flat];
      st.m[flat] = st.adam.beta1 * st.m[flat] + (1.0 - st.adam.beta1) * gi;
      st.v[flat] = st.adam.beta2 * st.v[flat] + (1.0 - st.adam.beta2) * gi * gi;
      const double mhat = st.m[flat] / bc1;
      const double vhat = st.v[flat] / bc2;
      p -= lr * (mhat / (std::sqrt(vhat) + st.adam.eps) + st.adam.weight_decay * p);
      ++flat;
    }
  }
}

namespace {

struct ChainVars {
  ad::Var u, v, b;
};

struct HeadVars {
  std::vector<ChainVars> chain;
  ad::Var w, b;
};

// Tape-side mirror of one module's parameters; bound lazily per tape so a
// module's values are copied in at most once per tape build.
class StackTape {
 public:
  StackTape(SurrogateStack& stack, ParamRegistry& reg, ad::Tape& tape)
      : s_(&stack), r_(&reg), t_(&tape) {
    bound_.assign(static_cast<std::size_t>(stack.module_count()), false);
    quad_w_.resize(bound_.size());
    quad_z_.resize(bound_.size());
    backbone_.resize(bound_.size());
    score_.resize(bound_.size());
    target_.resize(bound_.size());
  }

  std::pair<ad::Var, ad::Var> forward(int mi, ad::Var q) {
    bind(mi);
    if (s_->family == Family::quadrature) return quad_forward(mi, q);
    return mlp_forward_tape(mi, q);
  }

 private:
  void bind(int mi) {
    const auto u = static_cast<std::size_t>(mi);
    if (bound_[u]) return;
    bound_[u] = true;
    if (s_->family == Family::quadrature) {
      const QuadratureModule& m = s_->quad[u];
      const std::size_t cw = 2 * u, cz = 2 * u + 1;
      quad_w_[u] = t_->param(r_->chunks[cw].data(), r_->grad_base(cw), m.p * m.d, m.p, m.d);
      quad_z_[u] = t_->param(r_->chunks[cz].data(), r_->grad_base(cz), m.p * m.d, m.p, m.d);
      return;
    }
    const MlpModule& m = s_->mlp[u];
    const double* base = r_->chunks[u].data();
    double* gbase = r_->grad_base(u);
    auto piece = [&](std::int64_t off, int count, int rows, int cols) {
      return t_->param(base + off, gbase + off, count, rows, cols);
    };
    auto bind_chain = [&](const std::vector<ChainLayer>& layers) {
      std::vector<ChainVars> out;
      for (std::size_t k = 0; k < layers.size(); ++k) {
        const ChainLayer& cl = layers[k];
        ChainVars cv;
        if (k == 0) {
          cv.u = piece(cl.off_u, cl.width * cl.in, cl.width, cl.in);
        } else {
          cv.v = piece(cl.off_v, cl.width * cl.in, cl.width, cl.in);
          cv.u = piece(cl.off_u, cl.width * cl.width, cl.width, cl.width);
        }
        cv.b = piece(cl.off_b, cl.width, 0, 0);
        out.push_back(cv);
      }
      return out;
    };
    auto bind_head = [&](const HeadLayout& h) {
      HeadVars hv;
      hv.chain = bind_chain(h.layers);
      hv.w = piece(h.off_w, h.out * h.in_final, h.out, h.in_final);
      hv.b = piece(h.off_b, h.out, 0, 0);
      return hv;
    };
    backbone_[u] = bind_chain(m.layout.backbone);
    score_[u] = bind_head(m.layout.score);
    target_[u] = bind_head(m.layout.target);
  }

  std::pair<ad::Var, ad::Var> quad_forward(int mi, ad::Var q) {
    const auto u = static_cast<std::size_t>(mi);
    const QuadratureModule& m = s_->quad[u];
    const double sc = 1.0 / std::sqrt(static_cast<double>(m.d));
    ad::Var logits = t_->scale(t_->matvec_param(quad_w_[u], q), sc);
    ad::Var score = t_->lse_op(logits);
    ad::Var probs = t_->softmax_op(logits);
    ad::Var target = t_->mat_t_vec_param(quad_z_[u], probs);
    return {score, target};
  }

  ad::Var chain_forward(const std::vector<ChainVars>& vars, ad::Var input, const MlpShape& shape) {
    ad::Var h = input;
    for (std::size_t k = 0; k < vars.size(); ++k) {
      const ChainVars& cv = vars[k];
      ad::Var z = k == 0 ? t_->matvec_param(cv.u, input)
                         : t_->add(t_->matvec_param(cv.v, input), t_->matvec_param(cv.u, h));
      z = t_->add(z, cv.b);
      if (shape.layer_norm) z = t_->rms_norm_op(z, ones(t_->len(z)));
      ad::Var s = t_->silu_op(z);
      h = (shape.residual && k >= 1) ? t_->add(s, h) : s;
    }
    return h;
  }

  ad::Var head_forward(const HeadVars& hv, ad::Var input, const MlpShape& shape) {
    ad::Var feed = hv.chain.empty() ? input : chain_forward(hv.chain, input, shape);
    return t_->add(t_->matvec_param(hv.w, feed), hv.b);
  }

  std::pair<ad::Var, ad::Var> mlp_forward_tape(int mi, ad::Var q) {
    const auto u = static_cast<std::size_t>(mi);
    const MlpShape& shape = s_->mlp[u].shape;
    ad::Var head_in = backbone_[u].empty() ? q : chain_forward(backbone_[u], q, shape);
    ad::Var score = head_forward(score_[u], head_in, shape);
    ad::Var target = head_forward(target_[u], head_in, shape);
    return {score, target};
  }

  const Vector& ones(int n) {
    auto& v = ones_[n];
    if (v.dim() != n) v = Vector(n, 1.0);
    return v;
  }

  SurrogateStack* s_;
  ParamRegistry* r_;
  ad::Tape* t_;
  std::vector<bool> bound_;
  std::vector<ad::Var> quad_w_, quad_z_;
  std::vector<std::vector<ChainVars>> backbone_;
  std::vector<HeadVars> score_, target_;
  std::map<int, Vector> ones_;
};

}  // namespace

RegressionLoss loss_regression(const SurrogateStack& stack, const TargetCache& targets,
                               const std::vector<int>& rows, const LossWeights& lw) {
  if (rows.empty()) throw std::invalid_argument("loss_regression: no rows");
  const int hq = targets.cfg.query_heads();
  const int d = targets.cfg.head_dim;
  RegressionLoss out;
  Vector q(d);
  for (int row : rows) {
    for (int l = 0; l < targets.cfg.layers; ++l) {
      for (int h = 0; h < hq; ++h) {
        const TargetRecordView rec = targets.record(row, l, h);
        for (int c = 0; c < d; ++c) q[c] = rec.q[c];
        auto [s, t] = stack.forward(stack.module_index(l, h), q);
        const double ds = s - rec.alpha;
        out.score += ds * ds;
        double dt = 0.0;
        for (int c = 0; c < d; ++c) {
          const double diff = t[c] - rec.target[c];
          dt += diff * diff;
        }
        out.target += dt;
      }
    }
  }
  // Mean over every (position, layer, query head) evaluation.
  const double inv = 1.0 / (static_cast<double>(rows.size()) * targets.cfg.layers * hq);
  out.score *= inv;
  out.target *= inv;
  out.total = lw.lambda_alpha * out.score + lw.lambda_target * out.target;
  return out;
}

RegressionLoss regression_loss_and_grad(SurrogateStack& stack, ParamRegistry& reg,
                                        const TargetCache& targets, const std::vector<int>& rows,
                                        const LossWeights& lw) {
  if (rows.empty()) throw std::invalid_argument("regression_loss_and_grad: no rows");
  const int hq = targets.cfg.query_heads();
  const int d = targets.cfg.head_dim;
  const int modules = stack.module_count();

  // Group record coordinates by module so each module's parameters are bound
  // to one tape exactly once per batch.
  std::vector<std::vector<std::pair<int, int>>> per_module(
      static_cast<std::size_t>(modules));  // (row, query_head via layer)
  std::vector<std::vector<int>> per_module_layer(static_cast<std::size_t>(modules));
  for (int row : rows) {
    for (int l = 0; l < targets.cfg.layers; ++l) {
      for (int h = 0; h < hq; ++h) {
        const int mi = stack.module_index(l, h);
        per_module[static_cast<std::size_t>(mi)].push_back({row, h});
        per_module_layer[static_cast<std::size_t>(mi)].push_back(l);
      }
    }
  }

  RegressionLoss out;
  const double inv = 1.0 / (static_cast<double>(rows.size()) * targets.cfg.layers * hq);
  ad::Tape tape;
  for (int mi = 0; mi < modules; ++mi) {
    const auto& items = per_module[static_cast<std::size_t>(mi)];
    if (items.empty()) continue;
    tape.reset();
    StackTape st(stack, reg, tape);
    ad::Var sum_score, sum_target;
    for (std::size_t it = 0; it < items.size(); ++it) {
      const auto [row, h] = items[it];
      const int l = per_module_layer[static_cast<std::size_t>(mi)][it];
      const TargetRecordView rec = targets.record(row, l, h);
      ad::Var q = tape.leaf(rec.q, d);
      auto [s, t] = st.forward(mi, q);
      Vector tgt(d);
      for (int c = 0; c < d; ++c) tgt[c] = rec.target[c];
      ad::Var ls = tape.sq_diff_scalar(s, rec.alpha);
      ad::Var lt = tape.sq_diff(t, tgt);
      sum_score = sum_score.valid() ? tape.add(sum_score, ls) : ls;
      sum_target = sum_target.valid() ? tape.add(sum_target, lt) : lt;
    }
    out.score += tape.value(sum_score) * inv;
    out.target += tape.value(sum_target) * inv;
    ad::Var root = tape.add(tape.scale(sum_score, lw.lambda_alpha),
                            tape.scale(sum_target, lw.lambda_target));
    tape.backward(root, inv);
  }
  out.total = lw.lambda_alpha * out.score + lw.lambda_target * out.target;
  return out;
}

double loss_distill(const ModelWeights& w, const SurrogateStack& stack, const TargetCache& targets,
                    const std::vector<int>& sample_ids) {
  if (sample_ids.empty()) throw std::invalid_argument("loss_distill: no samples");
  StackProvider provider(stack);
  const int vocab = w.cfg.vocab;
  double total = 0.0;
  std::int64_t positions = 0;
  Vector teacher(vocab);
  for (int sid : sample_ids) {
    const TargetCache::Sample& s = targets.samples[static_cast<std::size_t>(sid)];
    BlendSession session(w, provider, targets.n);
    for (int j = 0; j < s.count; ++j) {
      Vector logits = decode_with_surrogate(session, s.tokens[static_cast<std::size_t>(j)]);
      const double* t = targets.teacher_logits(s.first_row + j);
      for (int c = 0; c < vocab; ++c) teacher[c] = t[c];
      total += kl_from_logits(teacher, logits);
      ++positions;
    }
  }
  // Pooled mean over teacher-forced positions.
  return total / static_cast<double>(positions);
}

double distill_loss_and_grad(const ModelWeights& w, SurrogateStack& stack, ParamRegistry& reg,
                             const TargetCache& targets, const std::vector<int>& sample_ids,
                             double lambda_kl) {
  if (sample_ids.empty()) throw std::invalid_argument("distill_loss_and_grad: no samples");
  const ModelConfig& cfg = w.cfg;
  const double sc = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim));
  std::int64_t positions = 0;
  for (int sid : sample_ids) positions += targets.samples[static_cast<std::size_t>(sid)].count;
  if (positions < 1) throw std::invalid_argument("distill_loss_and_grad: empty samples");
  const double inv = 1.0 / static_cast<double>(positions);
  double total = 0.0;
  ad::Tape tape;
  Vector teacher(cfg.vocab);
  for (int sid : sample_ids) {
    const TargetCache::Sample& s = targets.samples[static_cast<std::size_t>(sid)];
    tape.reset();
    StackTape st(stack, reg, tape);
    // Local K/V vars per (layer, kv head), growing with each position.
    std::vector<std::vector<ad::Var>> loc_k(
        static_cast<std::size_t>(cfg.layers * cfg.kv_heads));
    std::vector<std::vector<ad::Var>> loc_v(loc_k.size());
    ad::Var sum_kl;
    for (int j = 0; j < s.count; ++j) {
      const double pos = static_cast<double>(targets.n + j + 1);
      ad::Var x = tape.leaf(w.embed.row(s.tokens[static_cast<std::size_t>(j)]), cfg.d_model);
      for (int l = 0; l < cfg.layers; ++l) {
        const LayerWeights& layer = w.layers[static_cast<std::size_t>(l)];
        ad::Var xn = tape.rms_norm_op(x, layer.ln1_gain);
        for (int h = 0; h < cfg.kv_heads; ++h) {
          const std::size_t slot = static_cast<std::size_t>(l * cfg.kv_heads + h);
          loc_k[slot].push_back(
              tape.rope_op(tape.matvec_const(&layer.w_k[static_cast<std::size_t>(h)], xn), pos,
                           cfg.rope_base));
          loc_v[slot].push_back(tape.matvec_const(&layer.w_v[static_cast<std::size_t>(h)], xn));
        }
        std::vector<ad::Var> heads;
        for (int qh = 0; qh < cfg.query_heads(); ++qh) {
          const std::size_t slot = static_cast<std::size_t>(l * cfg.kv_heads + qh / cfg.group_size);
          ad::Var q = tape.rope_op(
              tape.matvec_const(&layer.w_q[static_cast<std::size_t>(qh)], xn), pos, cfg.rope_base);
          auto [score, target] = st.forward(stack.module_index(l, qh), q);
          std::vector<ad::Var> logits;
          for (ad::Var kv : loc_k[slot]) logits.push_back(tape.scale(tape.dot_op(q, kv), sc));
          heads.push_back(tape.blend(score, target, logits, loc_v[slot]));
        }
        x = tape.add(x, tape.matvec_const(&layer.w_o, tape.concat(heads)));
        ad::Var xn2 = tape.rms_norm_op(x, layer.ln2_gain);
        ad::Var ff = tape.matvec_const(&layer.w_ff2, tape.silu_op(tape.matvec_const(&layer.w_ff1, xn2)));
        x = tape.add(x, ff);
      }
      ad::Var logits = tape.matvec_const(&w.unembed, tape.rms_norm_op(x, w.ln_final_gain));
      const double* t = targets.teacher_logits(s.first_row + j);
      for (int c = 0; c < cfg.vocab; ++c) teacher[c] = t[c];
      ad::Var kl = tape.kl_teacher(logits, teacher);
      sum_kl = sum_kl.valid() ? tape.add(sum_kl, kl) : kl;
    }
    total += tape.value(sum_kl) * inv;
    tape.backward(sum_kl, lambda_kl * inv);
  }
  return total;
}

namespace {

std::string checkpoint_name(std::int64_t step) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "ck_%07lld.stack", static_cast<long long>(step));
  return buf;
}

}  // namespace

TrainResult train(const ModelWeights& w, SurrogateStack& stack, const TargetCache& targets,
                  const LossWeights& lw, const TrainConfig& tc) {
  if (tc.budget_samples < 1) throw std::invalid_argument("train: budget must be >= 1");
  LossWeights eff = lw;
  if (stack.family == Family::quadrature) eff.lambda_alpha = 0.0;
  const bool regression_on = eff.lambda_alpha != 0.0 || eff.lambda_target != 0.0;
  const bool distill_on = eff.distill_active();
  if (!regression_on && !distill_on)
    throw std::invalid_argument("train: all loss weights are zero");

  const std::vector<int> train_rows = targets.rows_for_split(false);
  if (train_rows.empty()) throw std::invalid_argument("train: target cache has no train rows");
  std::vector<int> train_sample_ids;
  for (std::size_t i = 0; i < targets.samples.size(); ++i)
    if (!targets.samples[i].test_split) train_sample_ids.push_back(static_cast<int>(i));
  if (distill_on && train_sample_ids.empty())
    throw std::invalid_argument("train: target cache has no train pairs");

  const int batch = effective_batch_size(tc.b_ref, targets.n, tc.n_ref, stack.plan.rho, tc.rho_ref,
                                         distill_on);
  if (tc.budget_samples < batch)
    throw std::invalid_argument("train: budget smaller than one batch");
  std::int64_t total_steps = 0;
  double avg_count = 0.0;
  if (distill_on) {
    std::int64_t rows_in_train_pairs = 0;
    for (int sid : train_sample_ids)
      rows_in_train_pairs += targets.samples[static_cast<std::size_t>(sid)].count;
    avg_count = static_cast<double>(rows_in_train_pairs) /
                static_cast<double>(train_sample_ids.size());
    total_steps = static_cast<std::int64_t>(
        std::ceil(static_cast<double>(tc.budget_samples) / (batch * avg_count)));
  } else {
    total_steps = (tc.budget_samples + batch - 1) / batch;
  }
  total_steps = std::max<std::int64_t>(total_steps, 1);
  const std::int64_t warmup =
      warmup_steps(total_steps, static_cast<std::int64_t>(train_rows.size()), batch);
  const double peak = tc.peak_lr * std::sqrt(static_cast<double>(batch) /
                                             static_cast<double>(tc.b_ref));

  ParamRegistry reg(stack);
  AdamConfig ac;
  ac.weight_decay = tc.weight_decay;
  TrainState state(reg.total, ac);
  Prng sampler = Prng(tc.seed).split(0x74726e73ULL);

  TrainResult res;
  res.batch = batch;
  if (!tc.checkpoint_dir.empty()) ensure_dir(tc.checkpoint_dir);
  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };

  std::vector<int> batch_rows;
  std::vector<int> batch_pairs;
  for (std::int64_t step = 0; step < total_steps; ++step) {
    const double lr = lr_schedule(step, total_steps, warmup, peak);
    reg.zero_grad();

    double l_score = 0.0, l_target = 0.0, l_kl = 0.0;
    if (distill_on) {
      batch_pairs.clear();
      batch_rows.clear();
      for (int i = 0; i < batch; ++i) {
        const int sid = train_sample_ids[static_cast<std::size_t>(
            sampler.next_below(train_sample_ids.size()))];
        batch_pairs.push_back(sid);
        const TargetCache::Sample& s = targets.samples[static_cast<std::size_t>(sid)];
        for (int j = 0; j < s.count; ++j) batch_rows.push_back(s.first_row + j);
      }
      res.samples += static_cast<std::int64_t>(batch_rows.size());
      if (regression_on) {
        const RegressionLoss rl = regression_loss_and_grad(stack, reg, targets, batch_rows, eff);
        l_score = rl.score;
        l_target = rl.target;
      }
      l_kl = distill_loss_and_grad(w, stack, reg, targets, batch_pairs, eff.lambda_kl);
    } else {
      batch_rows.clear();
      for (int i = 0; i < batch; ++i)
        batch_rows.push_back(train_rows[static_cast<std::size_t>(
            sampler.next_below(train_rows.size()))]);
      res.samples += batch;
      const RegressionLoss rl = regression_loss_and_grad(stack, reg, targets, batch_rows, eff);
      l_score = rl.score;
      l_target = rl.target;
    }

    optimizer_step(state, reg, lr);

    if (step % tc.log_every == 0 || step == total_steps - 1) {
      res.rows.push_back({step, lr, l_score, l_target, l_kl, elapsed()});
    }
    if (tc.checkpoint_every > 0 && !tc.checkpoint_dir.empty() &&
        (step + 1) % tc.checkpoint_every == 0 && step + 1 != total_steps) {
      const std::string path = tc.checkpoint_dir + "/" + checkpoint_name(step + 1);
      save_stack(stack, path);
      res.checkpoints.push_back(path);
    }
  }
  res.steps = total_steps;
  res.nan_masked = state.nan_masked;
  if (!tc.checkpoint_dir.empty()) {
    const std::string path = tc.checkpoint_dir + "/ck_final.stack";
    save_stack(stack, path);
    res.checkpoints.push_back(path);
  }
  if (!tc.log_path.empty()) write_text_file(tc.log_path, train_log_csv(res.rows));
  return res;
}

std::string train_log_csv(const std::vector<MetricRow>& rows) {
  std::string out = "step,lr,loss_score,loss_target,loss_kl,wallclock_s\n";
  char buf[256];
  for (const MetricRow& r : rows) {
    std::snprintf(buf, sizeof(buf), "%lld,%.17g,%.17g,%.17g,%.17g,%.6f\n",
                  static_cast<long long>(r.step), r.lr, r.loss_score, r.loss_target, r.loss_kl,
                  r.wallclock_s);
    out += buf;
  }
  return out;
}

}  // namespace kvs
