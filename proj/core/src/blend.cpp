#include "kvs/blend.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "kvs/oracle.hpp"

namespace kvs {

Vector blend_attend(double score, const Vector& target, const Vector& local_logits,
                    const Matrix& local_values) {
  if (!std::isfinite(score)) throw std::invalid_argument("blend_attend: non-finite score");
  const int m = local_logits.dim();
  if (local_values.rows != m) throw std::invalid_argument("blend_attend: logit/value row mismatch");
  if (m > 0 && local_values.cols != target.dim())
    throw std::invalid_argument("blend_attend: value dim mismatch");

  double mx = score;
  for (int j = 0; j < m; ++j)
    if (local_logits[j] > mx) mx = local_logits[j];

  const int d = target.dim();
  Vector out(d);
  double denom = std::exp(score - mx);
  for (int c = 0; c < d; ++c) out[c] = denom * target[c];
  for (int j = 0; j < m; ++j) {
    const double wj = std::exp(local_logits[j] - mx);
    denom += wj;
    const double* row = local_values.row(j);
    for (int c = 0; c < d; ++c) out[c] += wj * row[c];
  }
  for (int c = 0; c < d; ++c) out[c] /= denom;
  return out;
}

std::pair<double, Vector> StackProvider::score_target(int layer, int query_head, const Vector& q) {
  return stack_->forward(stack_->module_index(layer, query_head), q);
}

std::pair<double, Vector> OracleProvider::score_target(int layer, int query_head, const Vector& q) {
  const int kvh = query_head / group_size_;
  const Matrix& k = cache_->key(layer, kvh);
  const Matrix& v = cache_->value(layer, kvh);
  return {score_alpha(q, k), attend_full(q, k, v)};
}

BlendSession::BlendSession(const ModelWeights& w, BlendProvider& p, int context_len)
    : weights(&w), provider(&p), n(context_len), t(context_len) {
  if (context_len < 1) throw std::invalid_argument("BlendSession: context length must be >= 1");
  local = KVCache(w.cfg.layers, w.cfg.kv_heads, w.cfg.head_dim);
}

Vector decode_with_surrogate(BlendSession& session, int token) {
  const ModelWeights& w = *session.weights;
  const ModelConfig& cfg = w.cfg;
  const int pos = session.t + 1;
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim));

  Vector x = embed_token(w, token);
  for (int l = 0; l < cfg.layers; ++l) {
    const LayerWeights& layer = w.layers[static_cast<std::size_t>(l)];
    Vector xn = rms_norm(x, layer.ln1_gain);
    for (int h = 0; h < cfg.kv_heads; ++h) {
      Vector k = rope_rotate(matvec(layer.w_k[h], xn), static_cast<double>(pos), cfg.rope_base);
      Vector v = matvec(layer.w_v[h], xn);
      session.local.append(l, h, k, v);
    }
    Vector merged(cfg.d_model);
    for (int qh = 0; qh < cfg.query_heads(); ++qh) {
      const int kvh = qh / cfg.group_size;
      Vector q = rope_rotate(matvec(layer.w_q[qh], xn), static_cast<double>(pos), cfg.rope_base);
      auto [score, target] = session.provider->score_target(l, qh, q);
      const Matrix& lk = session.local.key(l, kvh);
      Vector local_logits(lk.rows);
      for (int j = 0; j < lk.rows; ++j) {
        const double* row = lk.row(j);
        double s = 0.0;
        for (int c = 0; c < cfg.head_dim; ++c) s += q[c] * row[c];
        local_logits[j] = s * scale;
      }
      Vector att = blend_attend(score, target, local_logits, session.local.value(l, kvh));
      for (int c = 0; c < cfg.head_dim; ++c) merged[qh * cfg.head_dim + c] = att[c];
    }
    Vector delta = matvec(layer.w_o, merged);
    for (int c = 0; c < cfg.d_model; ++c) x[c] += delta[c];
    Vector xn2 = rms_norm(x, layer.ln2_gain);
    Vector delta2 = ffn_forward(layer, xn2);
    for (int c = 0; c < cfg.d_model; ++c) x[c] += delta2[c];
  }
  session.local.n = pos - session.n;
  session.t = pos;
  return final_logits(w, x);
}

}  // namespace kvs
