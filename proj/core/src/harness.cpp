#include "kvs/harness.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <stdexcept>

#include "json.hpp"

#include "kvs/blend.hpp"
#include "kvs/serial.hpp"

namespace kvs {
namespace {

using nlohmann::json;

json config_tree(const RunConfig& rc) {
  json j;
  j["model"] = {{"layers", rc.model.layers},       {"kv_heads", rc.model.kv_heads},
                {"group_size", rc.model.group_size}, {"head_dim", rc.model.head_dim},
                {"d_model", rc.model.d_model},     {"vocab", rc.model.vocab},
                {"rope_base", rc.model.rope_base}, {"seed", rc.model.seed}};
  j["corpus"] = {{"seed", rc.corpus.seed},         {"n", rc.corpus.n},
                 {"fact_count", rc.corpus.fact_count}, {"per_fact", rc.corpus.per_fact},
                 {"copy_len", rc.corpus.copy_len}, {"response_cap", rc.corpus.response_cap}};
  json groups = json::array();
  for (const CapacityGroup& g : rc.surrogate.groups) {
    groups.push_back({{"begin", g.begin}, {"end", g.end}, {"mult", g.mult}});
  }
  j["surrogate"] = {{"family", family_name(rc.surrogate.family)},
                    {"rho", rc.surrogate.rho},
                    {"groups", groups},
                    {"depth_backbone", rc.surrogate.shape.depth_backbone},
                    {"depth_score", rc.surrogate.shape.depth_score},
                    {"depth_target", rc.surrogate.shape.depth_target},
                    {"residual", rc.surrogate.shape.residual},
                    {"layer_norm", rc.surrogate.shape.layer_norm},
                    {"score_frac", rc.surrogate.shape.score_frac},
                    {"seed", rc.surrogate.seed}};
  j["loss"] = {{"lambda_alpha", rc.loss.lambda_alpha},
               {"lambda_target", rc.loss.lambda_target},
               {"lambda_kl", rc.loss.lambda_kl}};
  j["train"] = {{"seed", rc.train.seed},
                {"budget_samples", rc.train.budget_samples},
                {"b_ref", rc.train.b_ref},
                {"n_ref", rc.train.n_ref},
                {"rho_ref", rc.train.rho_ref},
                {"peak_lr", rc.train.peak_lr},
                {"weight_decay", rc.train.weight_decay},
                {"log_every", rc.train.log_every},
                {"checkpoint_every", rc.train.checkpoint_every}};
  j["eval"] = {{"bench_contexts", rc.eval.bench_contexts},
               {"decode_tokens", rc.eval.decode_tokens},
               {"bench_reps", rc.eval.bench_reps}};
  json triples = json::array();
  for (const LossWeights& lw : rc.sweep.loss_triples) {
    triples.push_back({lw.lambda_alpha, lw.lambda_target, lw.lambda_kl});
  }
  j["sweep"] = {{"rhos", rc.sweep.rhos}, {"loss_triples", triples}};
  j["output_dir"] = rc.output_dir;
  return j;
}

}  // namespace

RunConfig default_run_config() { return RunConfig{}; }

std::string run_config_to_json(const RunConfig& rc) { return config_tree(rc).dump(2) + "\n"; }

RunConfig run_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const std::exception& e) {
    throw std::runtime_error(std::string("config: not valid JSON: ") + e.what());
  }
  RunConfig rc;
  try {
    if (j.contains("model")) {
      const json& m = j.at("model");
      rc.model.layers = m.value("layers", rc.model.layers);
      rc.model.kv_heads = m.value("kv_heads", rc.model.kv_heads);
      rc.model.group_size = m.value("group_size", rc.model.group_size);
      rc.model.head_dim = m.value("head_dim", rc.model.head_dim);
      rc.model.d_model = m.value("d_model", rc.model.d_model);
      rc.model.vocab = m.value("vocab", rc.model.vocab);
      rc.model.rope_base = m.value("rope_base", rc.model.rope_base);
      rc.model.seed = m.value("seed", rc.model.seed);
    }
    if (j.contains("corpus")) {
      const json& c = j.at("corpus");
      rc.corpus.seed = c.value("seed", rc.corpus.seed);
      rc.corpus.n = c.value("n", rc.corpus.n);
      rc.corpus.fact_count = c.value("fact_count", rc.corpus.fact_count);
      rc.corpus.per_fact = c.value("per_fact", rc.corpus.per_fact);
      rc.corpus.copy_len = c.value("copy_len", rc.corpus.copy_len);
      rc.corpus.response_cap = c.value("response_cap", rc.corpus.response_cap);
    }
    if (j.contains("surrogate")) {
      const json& s = j.at("surrogate");
      rc.surrogate.family = family_from_name(s.value("family", family_name(rc.surrogate.family)));
      rc.surrogate.rho = s.value("rho", rc.surrogate.rho);
      if (s.contains("groups")) {
        rc.surrogate.groups.clear();
        for (const json& g : s.at("groups")) {
          CapacityGroup cg;
          cg.begin = g.at("begin").get<int>();
          cg.end = g.at("end").get<int>();
          cg.mult = g.at("mult").get<double>();
          rc.surrogate.groups.push_back(cg);
        }
      }
      rc.surrogate.shape.depth_backbone = s.value("depth_backbone", rc.surrogate.shape.depth_backbone);
      rc.surrogate.shape.depth_score = s.value("depth_score", rc.surrogate.shape.depth_score);
      rc.surrogate.shape.depth_target = s.value("depth_target", rc.surrogate.shape.depth_target);
      rc.surrogate.shape.residual = s.value("residual", rc.surrogate.shape.residual);
      rc.surrogate.shape.layer_norm = s.value("layer_norm", rc.surrogate.shape.layer_norm);
      rc.surrogate.shape.score_frac = s.value("score_frac", rc.surrogate.shape.score_frac);
      rc.surrogate.seed = s.value("seed", rc.surrogate.seed);
    }
    if (j.contains("loss")) {
      const json& l = j.at("loss");
      rc.loss.lambda_alpha = l.value("lambda_alpha", rc.loss.lambda_alpha);
      rc.loss.lambda_target = l.value("lambda_target", rc.loss.lambda_target);
      rc.loss.lambda_kl = l.value("lambda_kl", rc.loss.lambda_kl);
    }
    if (j.contains("train")) {
      const json& t = j.at("train");
      rc.train.seed = t.value("seed", rc.train.seed);
      rc.train.budget_samples = t.value("budget_samples", rc.train.budget_samples);
      rc.train.b_ref = t.value("b_ref", rc.train.b_ref);
      rc.train.n_ref = t.value("n_ref", rc.train.n_ref);
      rc.train.rho_ref = t.value("rho_ref", rc.train.rho_ref);
      rc.train.peak_lr = t.value("peak_lr", rc.train.peak_lr);
      rc.train.weight_decay = t.value("weight_decay", rc.train.weight_decay);
      rc.train.log_every = t.value("log_every", rc.train.log_every);
      rc.train.checkpoint_every = t.value("checkpoint_every", rc.train.checkpoint_every);
    }
    if (j.contains("eval")) {
      const json& e = j.at("eval");
      if (e.contains("bench_contexts")) {
        rc.eval.bench_contexts = e.at("bench_contexts").get<std::vector<int>>();
      }
      rc.eval.decode_tokens = e.value("decode_tokens", rc.eval.decode_tokens);
      rc.eval.bench_reps = e.value("bench_reps", rc.eval.bench_reps);
    }
    if (j.contains("sweep")) {
      const json& s = j.at("sweep");
      if (s.contains("rhos")) rc.sweep.rhos = s.at("rhos").get<std::vector<double>>();
      if (s.contains("loss_triples")) {
        rc.sweep.loss_triples.clear();
        for (const json& t : s.at("loss_triples")) {
          if (!t.is_array() || t.size() != 3) {
            throw std::runtime_error("config: sweep.loss_triples entries must be [alpha, target, kl]");
          }
          LossWeights lw;
          lw.lambda_alpha = t.at(0).get<double>();
          lw.lambda_target = t.at(1).get<double>();
          lw.lambda_kl = t.at(2).get<double>();
          rc.sweep.loss_triples.push_back(lw);
        }
      }
    }
    rc.output_dir = j.value("output_dir", rc.output_dir);
    rc.model.validate();
  } catch (const std::runtime_error&) {
    throw;  // already carries the config: prefix
  } catch (const std::exception& e) {
    throw std::runtime_error(std::string("config: ") + e.what());
  }
  return rc;
}

RunConfig load_run_config(const std::string& path) {
  return run_config_from_json(read_text_file(path));
}

std::uint64_t run_config_hash(const RunConfig& rc) {
  const std::string canonical = config_tree(rc).dump();
  return fnv1a(canonical.data(), canonical.size());
}

std::string output_root() {
  if (const char* env = std::getenv("KVS_OUTPUT_ROOT"); env != nullptr && env[0] != '\0') {
    return env;
  }
  return "runs";
}

RunPaths run_paths(const RunConfig& rc) {
  std::filesystem::path p(rc.output_dir);
  RunPaths out;
  out.dir = p.is_absolute() ? p.string() : output_root() + "/" + rc.output_dir;
  out.config_file = out.dir + "/config.json";
  out.caches_dir = out.dir + "/caches";
  out.checkpoints_dir = out.dir + "/checkpoints";
  out.reports_dir = out.dir + "/reports";
  return out;
}

RunPaths prepare_run_dir(const RunConfig& rc) {
  RunPaths paths = run_paths(rc);
  ensure_dir(paths.dir);
  ensure_dir(paths.caches_dir);
  ensure_dir(paths.checkpoints_dir);
  ensure_dir(paths.reports_dir);
  write_text_file(paths.config_file, run_config_to_json(rc));
  return paths;
}

ModelWeights ensure_model(const RunConfig& rc, const RunPaths& paths) {
  ModelWeights w = init_model(rc.model);
  const std::string path = paths.caches_dir + "/model.bin";
  if (file_exists(path)) {
    ModelWeights disk = load_model(path);
    if (model_weights_hash(disk) != model_weights_hash(w)) {
      throw std::runtime_error("model cache hash mismatch: " + path +
                               " was produced by a different model config");
    }
  } else {
    save_model(w, path);
  }
  return w;
}

SyntheticCorpus ensure_corpus(const RunConfig& rc, const RunPaths& paths) {
  SyntheticCorpus c = gen_corpus(rc.corpus.seed, rc.corpus.n, rc.corpus.fact_count, rc.model.vocab);
  c.pairs = gen_pairs(c, rc.corpus.per_fact, rc.corpus.copy_len, rc.corpus.seed,
                      rc.corpus.response_cap);
  const std::string path = paths.caches_dir + "/corpus.bin";
  if (file_exists(path)) {
    SyntheticCorpus disk = load_corpus(path);
    if (corpus_hash(disk) != corpus_hash(c)) {
      throw std::runtime_error("corpus cache hash mismatch: " + path +
                               " was produced by a different corpus config");
    }
  } else {
    save_corpus(c, path);
  }
  return c;
}

TargetCache ensure_targets(const RunConfig& rc, const RunPaths& paths, const ModelWeights& w,
                           const SyntheticCorpus& corpus) {
  (void)rc;
  const std::vector<QuerySample> samples = query_samples_from_pairs(corpus.pairs);
  const std::uint64_t key = target_cache_key(w, corpus.tokens, samples);
  const std::string path = paths.caches_dir + "/targets.bin";
  if (file_exists(path)) {
    return load_target_cache(path, key);
  }
  TargetCache t = cache_targets(w, corpus.tokens, samples);
  save_target_cache(t, path);
  return t;
}

SurrogateStack build_stack(const RunConfig& rc, const ModelWeights& w, const KVCache* cache) {
  CapacityPlan plan = plan_capacity(rc.surrogate.rho, rc.corpus.n, rc.model.head_dim,
                                    rc.model.layers, rc.model.kv_heads, rc.surrogate.groups);
  return init_surrogate_stack(rc.surrogate.family, plan, rc.model.group_size, rc.surrogate.shape,
                              cache, rc.surrogate.seed, model_weights_hash(w));
}

IdentityCheckResult identity_check(const ModelConfig& cfg, const std::vector<int>& context_sizes,
                                   int cases_per_size, int post_tokens, std::uint64_t seed) {
  ModelWeights w = init_model(cfg);
  IdentityCheckResult res;
  Prng root(seed);
  for (int n : context_sizes) {
    for (int c = 0; c < cases_per_size; ++c) {
      Prng g = root.split(static_cast<std::uint64_t>(n) * 100003ull + static_cast<std::uint64_t>(c));
      std::vector<int> context(static_cast<std::size_t>(n));
      for (int& t : context) t = static_cast<int>(g.next_below(static_cast<std::uint64_t>(cfg.vocab)));
      std::vector<int> cont(static_cast<std::size_t>(post_tokens));
      for (int& t : cont) t = static_cast<int>(g.next_below(static_cast<std::uint64_t>(cfg.vocab)));

      PrefillResult pre = prefill(w, context);
      KVCache grow = pre.cache;          // extended by the full-attention decode
      const KVCache frozen = pre.cache;  // context view used by the oracle provider
      OracleProvider provider(frozen, cfg.group_size);
      BlendSession session(w, provider, n);
      for (int i = 0; i < post_tokens; ++i) {
        const int pos = n + 1 + i;
        Vector full = decode_step_full(w, grow, cont[static_cast<std::size_t>(i)], pos);
        Vector blended = decode_with_surrogate(session, cont[static_cast<std::size_t>(i)]);
        for (int vtok = 0; vtok < full.dim(); ++vtok) {
          const double rel =
              std::fabs(full[vtok] - blended[vtok]) / std::max(1.0, std::fabs(full[vtok]));
          if (rel > res.max_rel_err) res.max_rel_err = rel;
        }
      }
      ++res.cases;
    }
  }
  return res;
}

int run_gen_data(const RunConfig& rc) {
  RunPaths paths = prepare_run_dir(rc);
  ModelWeights w = ensure_model(rc, paths);
  SyntheticCorpus corpus = ensure_corpus(rc, paths);
  int train_pairs = 0;
  int test_pairs = 0;
  for (const TaskPair& p : corpus.pairs) (p.test_split ? test_pairs : train_pairs) += 1;
  std::printf("run dir: %s\n", paths.dir.c_str());
  std::printf("model: hash 0x%016llx\n",
              static_cast<unsigned long long>(model_weights_hash(w)));
  std::printf("corpus: %d tokens, %zu facts, %zu pairs (%d train / %d test), hash 0x%016llx\n",
              corpus.n, corpus.facts.size(), corpus.pairs.size(), train_pairs, test_pairs,
              static_cast<unsigned long long>(corpus_hash(corpus)));
  return 0;
}

int run_cache_targets(const RunConfig& rc) {
  RunPaths paths = prepare_run_dir(rc);
  ModelWeights w = ensure_model(rc, paths);
  SyntheticCorpus corpus = ensure_corpus(rc, paths);
  TargetCache targets = ensure_targets(rc, paths, w, corpus);
  std::printf("run dir: %s\n", paths.dir.c_str());
  std::printf("targets: %d rows over %zu samples, key 0x%016llx\n", targets.rows,
              targets.samples.size(), static_cast<unsigned long long>(targets.key_hash));
  return 0;
}

int run_train(const RunConfig& rc) {
  RunPaths paths = prepare_run_dir(rc);
  ModelWeights w = ensure_model(rc, paths);
  SyntheticCorpus corpus = ensure_corpus(rc, paths);
  TargetCache targets = ensure_targets(rc, paths, w, corpus);

  PrefillResult pre;
  const KVCache* context_cache = nullptr;
  if (rc.surrogate.family == Family::quadrature) {
    pre = prefill(w, corpus.tokens);
    context_cache = &pre.cache;
  }
  SurrogateStack stack = build_stack(rc, w, context_cache);
  std::printf("run dir: %s\n", paths.dir.c_str());
  std::printf("stack: %s, %lld params (budget %lld)\n", family_name(stack.family).c_str(),
              static_cast<long long>(stack.total_params()),
              static_cast<long long>(stack.plan.planned_total()));

  TrainConfig tc = rc.train;
  tc.checkpoint_dir = paths.checkpoints_dir;
  tc.log_path = paths.reports_dir + "/train_log.csv";
  TrainResult tr = train(w, stack, targets, rc.loss, tc);

  const MetricRow& last = tr.rows.back();
  std::printf("train: %lld steps, batch %d, %lld samples, %lld non-finite grads masked\n",
              static_cast<long long>(tr.steps), tr.batch, static_cast<long long>(tr.samples),
              static_cast<long long>(tr.nan_masked));
  std::printf("final losses: score %.6g, target %.6g, kl %.6g\n", last.loss_score,
              last.loss_target, last.loss_kl);
  std::printf("train log: %s\n", tc.log_path.c_str());
  if (!tr.checkpoints.empty()) {
    std::printf("checkpoint: %s\n", tr.checkpoints.back().c_str());
  }
  return 0;
}

namespace {

// Shared by run_eval and run_sweep: evaluation block for one trained stack.
EvalReport evaluate_stack(const ModelWeights& w, const SurrogateStack& stack,
                          const TargetCache& targets, const RunConfig& rc,
                          const std::string& label) {
  EvalReport rep;
  rep.config_hash = run_config_hash(rc);
  rep.label = label;
  rep.stack_params = stack.total_params();
  rep.agreement = eval_stack(w, stack, targets, /*test_split=*/true);
  rep.baseline = eval_constant_logit_baseline(targets, /*test_split=*/true);
  rep.transport = rte(stack, targets);
  return rep;
}

void write_eval_reports(const RunPaths& paths, const EvalReport& rep) {
  write_text_file(paths.reports_dir + "/eval.txt", report_text(rep));
  write_text_file(paths.reports_dir + "/eval.csv", report_csv_header() + report_csv_row(rep));
  write_text_file(paths.reports_dir + "/rte_heatmap.csv", rte_heatmap_csv(rep.transport));
}

SurrogateStack load_or_init_stack(const RunConfig& rc, const RunPaths& paths,
                                  const ModelWeights& w, const SyntheticCorpus& corpus,
                                  std::string* label) {
  const std::string ckpt = paths.checkpoints_dir + "/ck_final.stack";
  if (file_exists(ckpt)) {
    *label = "trained";
    return load_stack(ckpt, model_weights_hash(w));
  }
  *label = "init";
  PrefillResult pre;
  const KVCache* context_cache = nullptr;
  if (rc.surrogate.family == Family::quadrature) {
    pre = prefill(w, corpus.tokens);
    context_cache = &pre.cache;
  }
  return build_stack(rc, w, context_cache);
}

}  // namespace

int run_eval(const RunConfig& rc) {
  RunPaths paths = prepare_run_dir(rc);
  ModelWeights w = ensure_model(rc, paths);
  SyntheticCorpus corpus = ensure_corpus(rc, paths);
  TargetCache targets = ensure_targets(rc, paths, w, corpus);
  std::string label;
  SurrogateStack stack = load_or_init_stack(rc, paths, w, corpus, &label);

  EvalReport rep = evaluate_stack(w, stack, targets, rc, label);
  write_eval_reports(paths, rep);

  std::printf("run dir: %s\n", paths.dir.c_str());
  std::printf("stack: %s (%s), %lld params\n", family_name(stack.family).c_str(), label.c_str(),
              static_cast<long long>(rep.stack_params));
  std::printf("agreement: %.4f (gap %.2f pp), ce gap %.4f nats, eval kl %.6g over %lld positions\n",
              rep.agreement.acc_surrogate, rep.agreement.token_accuracy_gap_pp,
              rep.agreement.lm_ce_gap, rep.agreement.eval_kl,
              static_cast<long long>(rep.agreement.positions));
  std::printf("baseline gap: %.2f pp, baseline kl %.6g\n", rep.baseline.token_accuracy_gap_pp,
              rep.baseline.eval_kl);
  std::printf("rte: target %.6g, score %.6g\n", rep.transport.target_total,
              rep.transport.score_total);
  std::printf("reports: %s/{eval.txt,eval.csv,rte_heatmap.csv}\n", paths.reports_dir.c_str());
  return 0;
}

int run_bench(const RunConfig& rc) {
  RunPaths paths = prepare_run_dir(rc);
  ModelWeights w = ensure_model(rc, paths);
  SyntheticCorpus corpus = ensure_corpus(rc, paths);
  std::string label;
  SurrogateStack stack = load_or_init_stack(rc, paths, w, corpus, &label);

  BenchOptions opt;
  opt.decode_tokens = rc.eval.decode_tokens;
  opt.reps = rc.eval.bench_reps;
  std::vector<BenchPoint> points = bench(w, stack, rc.eval.bench_contexts, opt);
  write_text_file(paths.reports_dir + "/bench.csv", bench_csv(points));

  std::printf("run dir: %s (stack: %s)\n", paths.dir.c_str(), label.c_str());
  std::printf("%8s %14s %14s %14s %14s %16s %16s\n", "n", "full_ttft_ms", "full_tok_s",
              "sur_ttft_ms", "sur_tok_s", "full_mem_bytes", "sur_mem_bytes");
  for (const BenchPoint& p : points) {
    std::printf("%8d %14.3f %14.1f %14.3f %14.1f %16.0f %16.0f\n", p.n, p.full_ttft_ms,
                p.full_tok_per_s, p.sur_ttft_ms, p.sur_tok_per_s, p.full_mem_bytes,
                p.sur_mem_bytes);
  }
  std::printf("bench report: %s/bench.csv\n", paths.reports_dir.c_str());
  return 0;
}

int run_identity_check(const RunConfig& rc) {
  const std::vector<int> sizes = {16, 128, 1024};
  const int cases_per_size = 17;
  const int post_tokens = 32;
  IdentityCheckResult res = identity_check(rc.model, sizes, cases_per_size, post_tokens, 777);
  std::printf("identity check: %d cases (contexts 16/128/1024, %d post tokens each)\n", res.cases,
              post_tokens);
  std::printf("max relative logit error vs full attention: %.3e\n", res.max_rel_err);
  if (!(res.max_rel_err <= 1e-10)) {
    std::printf("FAILED invariant: oracle-blended decode must match full attention within 1e-10\n");
    return 1;
  }
  std::printf("ok: blended decode with the oracle provider reproduces full attention\n");
  return 0;
}

int run_sweep(const RunConfig& rc) {
  RunPaths paths = prepare_run_dir(rc);
  ModelWeights w = ensure_model(rc, paths);
  SyntheticCorpus corpus = ensure_corpus(rc, paths);
  TargetCache targets = ensure_targets(rc, paths, w, corpus);

  PrefillResult pre;
  const KVCache* context_cache = nullptr;
  if (rc.surrogate.family == Family::quadrature) {
    pre = prefill(w, corpus.tokens);
    context_cache = &pre.cache;
  }

  std::string csv = report_csv_header();
  for (double rho : rc.sweep.rhos) {
    for (const LossWeights& lw : rc.sweep.loss_triples) {
      char label[96];
      std::snprintf(label, sizeof(label), "rho%g_la%g_lt%g_lkl%g", rho, lw.lambda_alpha,
                    lw.lambda_target, lw.lambda_kl);
      RunConfig sub = rc;
      sub.surrogate.rho = rho;
      sub.loss = lw;
      sub.output_dir = rc.output_dir + "/sweep/" + label;
      RunPaths sub_paths = prepare_run_dir(sub);

      SurrogateStack stack = build_stack(sub, w, context_cache);
      TrainConfig tc = sub.train;
      tc.checkpoint_dir = sub_paths.checkpoints_dir;
      tc.log_path = sub_paths.reports_dir + "/train_log.csv";
      TrainResult tr = train(w, stack, targets, sub.loss, tc);

      EvalReport rep = evaluate_stack(w, stack, targets, sub, label);
      write_eval_reports(sub_paths, rep);
      csv += report_csv_row(rep);

      std::printf("[%s] %lld params, %lld steps, gap %.2f pp, ce gap %.4f, rte %.4g\n", label,
                  static_cast<long long>(rep.stack_params), static_cast<long long>(tr.steps),
                  rep.agreement.token_accuracy_gap_pp, rep.agreement.lm_ce_gap,
                  rep.transport.target_total);
    }
  }
  const std::string sweep_path = paths.reports_dir + "/sweep.csv";
  write_text_file(sweep_path, csv);
  std::printf("sweep report: %s (%zu points)\n", sweep_path.c_str(),
              rc.sweep.rhos.size() * rc.sweep.loss_triples.size());
  return 0;
}

}  // namespace kvs
