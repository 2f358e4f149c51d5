#include "kvs/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace kvs {

namespace {

int argmax(const double* v, int n) {
  int best = 0;
  for (int i = 1; i < n; ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

double cross_entropy(const Vector& logits, int truth) {
  return log_sum_exp(logits) - logits[truth];
}

void check_stack_matches(const SurrogateStack& stack, const ModelConfig& cfg,
                         const char* where) {
  if (stack.layers != cfg.layers || stack.kv_heads != cfg.kv_heads ||
      stack.group_size != cfg.group_size || stack.head_dim != cfg.head_dim)
    throw std::invalid_argument(std::string(where) + ": stack and model config disagree");
}

// Sample indices of one split in ascending pair-id order.
std::vector<int> split_order(const TargetCache& targets, bool test_split) {
  std::vector<int> order;
  for (std::size_t i = 0; i < targets.samples.size(); ++i)
    if (targets.samples[i].test_split == test_split) order.push_back(static_cast<int>(i));
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    return targets.samples[static_cast<std::size_t>(a)].pair_id <
           targets.samples[static_cast<std::size_t>(b)].pair_id;
  });
  return order;
}

}  // namespace

RteReport rte_rows(const SurrogateStack& stack, const TargetCache& targets,
                   const std::vector<int>& rows) {
  check_stack_matches(stack, targets.cfg, "rte");
  if (rows.empty()) throw std::invalid_argument("rte: no rows");
  const int layers = targets.cfg.layers;
  const int hq = targets.cfg.query_heads();
  const int d = targets.cfg.head_dim;

  RteReport r;
  r.target_cells = Matrix(layers, hq);
  r.score_cells = Matrix(layers, hq);
  Matrix t_count(layers, hq), s_count(layers, hq);

  Vector q(d), pred_t(d), truth(d);
  for (int row : rows) {
    for (int l = 0; l < layers; ++l) {
      for (int h = 0; h < hq; ++h) {
        const TargetRecordView rec = targets.record(row, l, h);
        for (int c = 0; c < d; ++c) {
          q[c] = rec.q[c];
          truth[c] = rec.target[c];
        }
        auto [s, t] = stack.forward(stack.module_index(l, h), q);

        const double den_t = squared_distance(q, truth);
        if (den_t == 0.0) {
          ++r.target_excluded;
        } else {
          const double num_t = squared_distance(t, truth);
          double lr = std::log(num_t / den_t);
          if (!(lr >= kRteFloor)) {  // catches -inf from num_t == 0
            lr = kRteFloor;
            ++r.target_floored;
          }
          r.target_cells.at(l, h) += lr;
          t_count.at(l, h) += 1.0;
          ++r.target_counted;
        }

        const double den_s = rec.alpha * rec.alpha;
        if (den_s == 0.0) {
          ++r.score_excluded;
        } else {
          const double diff = s - rec.alpha;
          double lr = std::log(diff * diff / den_s);
          if (!(lr >= kRteFloor)) {
            lr = kRteFloor;
            ++r.score_floored;
          }
          r.score_cells.at(l, h) += lr;
          s_count.at(l, h) += 1.0;
          ++r.score_counted;
        }
      }
    }
  }
  for (int l = 0; l < layers; ++l) {
    for (int h = 0; h < hq; ++h) {
      if (t_count.at(l, h) > 0.0) r.target_cells.at(l, h) /= t_count.at(l, h);
      if (s_count.at(l, h) > 0.0) r.score_cells.at(l, h) /= s_count.at(l, h);
      r.target_total += r.target_cells.at(l, h);
      r.score_total += r.score_cells.at(l, h);
    }
  }
  return r;
}

RteReport rte(const SurrogateStack& stack, const TargetCache& targets) {
  std::vector<int> rows(static_cast<std::size_t>(targets.rows));
  for (int i = 0; i < targets.rows; ++i) rows[static_cast<std::size_t>(i)] = i;
  return rte_rows(stack, targets, rows);
}

EvalSummary eval_agreement(const ModelWeights& w, const TargetCache& targets,
                           BlendProvider& provider, bool test_split) {
  const std::vector<int> order = split_order(targets, test_split);
  if (order.empty()) throw std::invalid_argument("eval_agreement: empty eval split");
  const int vocab = w.cfg.vocab;

  EvalSummary e;
  double agree = 0.0;
  Vector teacher(vocab);
  for (int si : order) {
    const TargetCache::Sample& s = targets.samples[static_cast<std::size_t>(si)];
    BlendSession session(w, provider, targets.n);
    for (int j = 0; j + 1 < s.count; ++j) {
      Vector logits = decode_with_surrogate(session, s.tokens[static_cast<std::size_t>(j)]);
      if (j < s.response_start - 1) continue;  // still inside the instruction
      const double* t = targets.teacher_logits(s.first_row + j);
      for (int c = 0; c < vocab; ++c) teacher[c] = t[c];
      const int truth = s.tokens[static_cast<std::size_t>(j) + 1];
      if (argmax(teacher.data.data(), vocab) == argmax(logits.data.data(), vocab)) agree += 1.0;
      e.ce_full += cross_entropy(teacher, truth);
      e.ce_surrogate += cross_entropy(logits, truth);
      e.eval_kl += kl_from_logits(teacher, logits);
      ++e.positions;
    }
  }
  if (e.positions == 0) throw std::invalid_argument("eval_agreement: no response positions");
  const double inv = 1.0 / static_cast<double>(e.positions);
  e.acc_full = 1.0;
  e.acc_surrogate = agree * inv;
  e.token_accuracy_gap_pp = (e.acc_full - e.acc_surrogate) * 100.0;
  e.ce_full *= inv;
  e.ce_surrogate *= inv;
  e.lm_ce_gap = e.ce_surrogate - e.ce_full;
  e.eval_kl *= inv;
  return e;
}

EvalSummary eval_stack(const ModelWeights& w, const SurrogateStack& stack,
                       const TargetCache& targets, bool test_split) {
  check_stack_matches(stack, w.cfg, "eval_stack");
  StackProvider provider(stack);
  return eval_agreement(w, targets, provider, test_split);
}

EvalSummary eval_identity(const ModelWeights& w, const KVCache& context_cache,
                          const TargetCache& targets, bool test_split) {
  if (context_cache.n != targets.n)
    throw std::invalid_argument("eval_identity: context cache length differs from target cache");
  OracleProvider provider(context_cache, w.cfg.group_size);
  return eval_agreement(w, targets, provider, test_split);
}

EvalSummary eval_constant_logit_baseline(const TargetCache& targets, bool test_split) {
  const std::vector<int> order = split_order(targets, test_split);
  if (order.empty()) throw std::invalid_argument("eval_constant_logit_baseline: empty eval split");
  const int vocab = targets.cfg.vocab;

  EvalSummary e;
  double agree = 0.0;
  Vector teacher(vocab);
  const Vector zeros(vocab, 0.0);
  for (int si : order) {
    const TargetCache::Sample& s = targets.samples[static_cast<std::size_t>(si)];
    for (int j = s.response_start - 1; j + 1 < s.count; ++j) {
      const double* t = targets.teacher_logits(s.first_row + j);
      for (int c = 0; c < vocab; ++c) teacher[c] = t[c];
      const int truth = s.tokens[static_cast<std::size_t>(j) + 1];
      if (argmax(teacher.data.data(), vocab) == 0) agree += 1.0;  // argmax of zeros
      e.ce_full += cross_entropy(teacher, truth);
      e.ce_surrogate += cross_entropy(zeros, truth);
      e.eval_kl += kl_from_logits(teacher, zeros);
      ++e.positions;
    }
  }
  if (e.positions == 0) throw std::invalid_argument("eval_constant_logit_baseline: no positions");
  const double inv = 1.0 / static_cast<double>(e.positions);
  e.acc_full = 1.0;
  e.acc_surrogate = agree * inv;
  e.token_accuracy_gap_pp = (e.acc_full - e.acc_surrogate) * 100.0;
  e.ce_full *= inv;
  e.ce_surrogate *= inv;
  e.lm_ce_gap = e.ce_surrogate - e.ce_full;
  e.eval_kl *= inv;
  return e;
}

namespace {

double median(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  return n % 2 == 1 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

}  // namespace

std::vector<BenchPoint> bench(const ModelWeights& w, const SurrogateStack& stack,
                              const std::vector<int>& context_sizes, const BenchOptions& opt) {
  if (context_sizes.empty()) throw std::invalid_argument("bench: no context sizes");
  for (std::size_t i = 1; i < context_sizes.size(); ++i)
    if (context_sizes[i] <= context_sizes[i - 1])
      throw std::invalid_argument("bench: context sizes must be strictly increasing");
  if (opt.decode_tokens < 1 || opt.reps < 1) throw std::invalid_argument("bench: bad options");
  check_stack_matches(stack, w.cfg, "bench");

  const ModelConfig& cfg = w.cfg;
  std::vector<BenchPoint> out;
  for (int n : context_sizes) {
    Prng g = Prng(opt.seed).split(static_cast<std::uint64_t>(n));
    std::vector<int> context(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i)
      context[static_cast<std::size_t>(i)] =
          static_cast<int>(g.next_below(static_cast<std::uint64_t>(cfg.vocab)));
    std::vector<int> cont(static_cast<std::size_t>(opt.decode_tokens));
    for (int i = 0; i < opt.decode_tokens; ++i)
      cont[static_cast<std::size_t>(i)] =
          static_cast<int>(g.next_below(static_cast<std::uint64_t>(cfg.vocab)));

    BenchPoint pt;
    pt.n = n;
    pt.full_mem_entries = 2LL * n * cfg.layers * cfg.kv_heads * cfg.head_dim;
    pt.sur_mem_params = stack.total_params();
    pt.full_mem_bytes = static_cast<double>(pt.full_mem_entries) * sizeof(double);
    pt.sur_mem_bytes = static_cast<double>(pt.sur_mem_params) * sizeof(double);

    std::vector<double> ttft_full, tps_full, ttft_sur, tps_sur;
    for (int rep = 0; rep < opt.warmup + opt.reps; ++rep) {
      const bool timed = rep >= opt.warmup;

      auto t0 = Clock::now();
      PrefillResult pre = prefill(w, context);
      const double prefill_ms = ms_since(t0);
      KVCache cache = std::move(pre.cache);
      t0 = Clock::now();
      for (int i = 0; i < opt.decode_tokens; ++i)
        decode_step_full(w, cache, cont[static_cast<std::size_t>(i)], n + i + 1);
      const double full_ms = ms_since(t0);

      StackProvider provider(stack);
      BlendSession session(w, provider, n);
      t0 = Clock::now();
      (void)decode_with_surrogate(session, cont[0]);
      const double first_ms = ms_since(t0);
      t0 = Clock::now();
      for (int i = 1; i < opt.decode_tokens; ++i)
        decode_with_surrogate(session, cont[static_cast<std::size_t>(i)]);
      const double rest_ms = ms_since(t0);

      if (timed) {
        ttft_full.push_back(prefill_ms);
        tps_full.push_back(opt.decode_tokens / (full_ms / 1000.0));
        ttft_sur.push_back(first_ms);
        tps_sur.push_back(opt.decode_tokens / ((first_ms + rest_ms) / 1000.0));
      }
    }
    pt.full_ttft_ms = median(ttft_full);
    pt.full_tok_per_s = median(tps_full);
    pt.sur_ttft_ms = median(ttft_sur);
    pt.sur_tok_per_s = median(tps_sur);
    out.push_back(pt);
  }
  return out;
}

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void key_val(std::string& out, const char* key, const std::string& v) {
  out += key;
  out += ": ";
  out += v;
  out += "\n";
}

void summary_block(std::string& out, const char* prefix, const EvalSummary& e) {
  const std::string p(prefix);
  key_val(out, (p + "acc_full").c_str(), fmt(e.acc_full));
  key_val(out, (p + "acc_surrogate").c_str(), fmt(e.acc_surrogate));
  key_val(out, (p + "token_accuracy_gap_pp").c_str(), fmt(e.token_accuracy_gap_pp));
  key_val(out, (p + "ce_full").c_str(), fmt(e.ce_full));
  key_val(out, (p + "ce_surrogate").c_str(), fmt(e.ce_surrogate));
  key_val(out, (p + "lm_ce_gap").c_str(), fmt(e.lm_ce_gap));
  key_val(out, (p + "eval_kl").c_str(), fmt(e.eval_kl));
  key_val(out, (p + "positions").c_str(), std::to_string(e.positions));
}

}  // namespace

std::string report_text(const EvalReport& r) {
  std::string out;
  key_val(out, "schema", "kvs-eval-report-1");
  key_val(out, "label", r.label);
  {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "0x%016llx",
                  static_cast<unsigned long long>(r.config_hash));
    key_val(out, "config_hash", buf);
  }
  key_val(out, "stack_params", std::to_string(r.stack_params));
  summary_block(out, "", r.agreement);
  summary_block(out, "baseline_", r.baseline);
  key_val(out, "rte_target", fmt(r.transport.target_total));
  key_val(out, "rte_score", fmt(r.transport.score_total));
  key_val(out, "rte_target_counted", std::to_string(r.transport.target_counted));
  key_val(out, "rte_score_counted", std::to_string(r.transport.score_counted));
  key_val(out, "rte_target_excluded", std::to_string(r.transport.target_excluded));
  key_val(out, "rte_score_excluded", std::to_string(r.transport.score_excluded));
  key_val(out, "rte_target_floored", std::to_string(r.transport.target_floored));
  key_val(out, "rte_score_floored", std::to_string(r.transport.score_floored));
  for (const BenchPoint& b : r.bench_points) {
    const std::string p = "bench[n=" + std::to_string(b.n) + "].";
    key_val(out, (p + "full_ttft_ms").c_str(), fmt(b.full_ttft_ms));
    key_val(out, (p + "full_tok_per_s").c_str(), fmt(b.full_tok_per_s));
    key_val(out, (p + "sur_ttft_ms").c_str(), fmt(b.sur_ttft_ms));
    key_val(out, (p + "sur_tok_per_s").c_str(), fmt(b.sur_tok_per_s));
    key_val(out, (p + "full_mem_entries").c_str(), std::to_string(b.full_mem_entries));
    key_val(out, (p + "sur_mem_params").c_str(), std::to_string(b.sur_mem_params));
  }
  return out;
}

std::string report_csv_header() {
  return "config_hash,label,stack_params,acc_surrogate,token_accuracy_gap_pp,ce_full,"
         "ce_surrogate,lm_ce_gap,eval_kl,positions,baseline_gap_pp,baseline_eval_kl,"
         "rte_target,rte_score,rte_target_excluded,rte_score_excluded\n";
}

std::string report_csv_row(const EvalReport& r) {
  char head[32];
  std::snprintf(head, sizeof(head), "0x%016llx", static_cast<unsigned long long>(r.config_hash));
  std::string out(head);
  out += "," + r.label;
  out += "," + std::to_string(r.stack_params);
  out += "," + fmt(r.agreement.acc_surrogate);
  out += "," + fmt(r.agreement.token_accuracy_gap_pp);
  out += "," + fmt(r.agreement.ce_full);
  out += "," + fmt(r.agreement.ce_surrogate);
  out += "," + fmt(r.agreement.lm_ce_gap);
  out += "," + fmt(r.agreement.eval_kl);
  out += "," + std::to_string(r.agreement.positions);
  out += "," + fmt(r.baseline.token_accuracy_gap_pp);
  out += "," + fmt(r.baseline.eval_kl);
  out += "," + fmt(r.transport.target_total);
  out += "," + fmt(r.transport.score_total);
  out += "," + std::to_string(r.transport.target_excluded);
  out += "," + std::to_string(r.transport.score_excluded);
  out += "\n";
  return out;
}

std::string rte_heatmap_csv(const RteReport& r) {
  std::string out = "layer,query_head,rte_target,rte_score\n";
  for (int l = 0; l < r.target_cells.rows; ++l) {
    for (int h = 0; h < r.target_cells.cols; ++h) {
      out += std::to_string(l) + "," + std::to_string(h) + "," + fmt(r.target_cells.at(l, h)) +
             "," + fmt(r.score_cells.at(l, h)) + "\n";
    }
  }
  return out;
}

std::string bench_csv(const std::vector<BenchPoint>& points) {
  std::string out =
      "n,full_ttft_ms,full_tok_per_s,sur_ttft_ms,sur_tok_per_s,full_mem_entries,"
      "sur_mem_params,full_mem_bytes,sur_mem_bytes\n";
  for (const BenchPoint& b : points) {
    out += std::to_string(b.n) + "," + fmt(b.full_ttft_ms) + "," + fmt(b.full_tok_per_s) + "," +
           fmt(b.sur_ttft_ms) + "," + fmt(b.sur_tok_per_s) + "," +
           std::to_string(b.full_mem_entries) + "," + std::to_string(b.sur_mem_params) + "," +
           fmt(b.full_mem_bytes) + "," + fmt(b.sur_mem_bytes) + "\n";
  }
  return out;
}

}  // namespace kvs
