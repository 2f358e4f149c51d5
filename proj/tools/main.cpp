// Command-line front end. Subcommands map 1:1 onto the harness drivers; every
// subcommand reads the same JSON run config (defaults when --config is
// omitted) and writes its artifacts under the run directory.
//
// Exit codes: 0 success, 1 failed invariant or runtime error (the message
// names what went wrong), 2 usage error.

#include <cstdio>
#include <exception>
#include <string>

#include "CLI11.hpp"

#include "kvs/harness.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Trained per-head surrogates for long-context attention: data generation,\n"
               "target caching, training, evaluation and benchmarking."};
  app.require_subcommand(0, 1);

  std::string config_path;
  std::string output_dir;
  bool print_config = false;
  app.add_option("--config", config_path, "JSON run config file (defaults when omitted)");
  app.add_option("--output-dir", output_dir, "Override output_dir from the config");
  app.add_flag("--print-config", print_config,
               "Print the effective config as JSON and exit");

  double rho = 0.0;
  std::string family;
  long long budget = 0;
  double lambda_alpha = 0.0, lambda_target = 0.0, lambda_kl = 0.0;
  unsigned long long train_seed = 0;
  auto* opt_rho = app.add_option("--rho", rho, "Override surrogate.rho (capacity fraction)");
  auto* opt_family = app.add_option("--family", family, "Override surrogate.family (mlp|quadrature)");
  auto* opt_budget = app.add_option("--budget", budget, "Override train.budget_samples");
  auto* opt_la = app.add_option("--lambda-alpha", lambda_alpha, "Override loss.lambda_alpha");
  auto* opt_lt = app.add_option("--lambda-target", lambda_target, "Override loss.lambda_target");
  auto* opt_lkl = app.add_option("--lambda-kl", lambda_kl, "Override loss.lambda_kl");
  auto* opt_seed = app.add_option("--train-seed", train_seed, "Override train.seed");

  auto* sc_gen = app.add_subcommand("gen-data", "Generate the synthetic corpus and task pairs");
  auto* sc_cache = app.add_subcommand("cache-targets",
                                      "Cache per-head attention targets and teacher logits");
  auto* sc_train = app.add_subcommand("train", "Train the surrogate stack");
  auto* sc_eval = app.add_subcommand("eval",
                                     "Agreement, cross-entropy, KL and transport-error report");
  auto* sc_bench = app.add_subcommand("bench", "Decode wall time and memory across context sizes");
  auto* sc_idc = app.add_subcommand("identity-check",
                                    "Verify oracle-blended decode equals full attention");
  auto* sc_sweep = app.add_subcommand("sweep", "Train and evaluate the capacity x loss grid");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);  // prints help, exit 0
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    std::fprintf(stderr, "run '%s --help' for usage\n", argv[0]);
    return 2;
  }

  kvs::RunConfig rc;
  try {
    rc = config_path.empty() ? kvs::default_run_config() : kvs::load_run_config(config_path);
    if (!output_dir.empty()) rc.output_dir = output_dir;
    if (opt_rho->count() > 0) rc.surrogate.rho = rho;
    if (opt_family->count() > 0) rc.surrogate.family = kvs::family_from_name(family);
    if (opt_budget->count() > 0) rc.train.budget_samples = budget;
    if (opt_la->count() > 0) rc.loss.lambda_alpha = lambda_alpha;
    if (opt_lt->count() > 0) rc.loss.lambda_target = lambda_target;
    if (opt_lkl->count() > 0) rc.loss.lambda_kl = lambda_kl;
    if (opt_seed->count() > 0) rc.train.seed = train_seed;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }

  if (print_config) {
    std::fputs(kvs::run_config_to_json(rc).c_str(), stdout);
    return 0;
  }
  if (app.get_subcommands().empty()) {
    std::fprintf(stderr, "usage error: a subcommand is required\n");
    std::fprintf(stderr, "run '%s --help' for usage\n", argv[0]);
    return 2;
  }

  try {
    if (sc_gen->parsed()) return kvs::run_gen_data(rc);
    if (sc_cache->parsed()) return kvs::run_cache_targets(rc);
    if (sc_train->parsed()) return kvs::run_train(rc);
    if (sc_eval->parsed()) return kvs::run_eval(rc);
    if (sc_bench->parsed()) return kvs::run_bench(rc);
    if (sc_idc->parsed()) return kvs::run_identity_check(rc);
    if (sc_sweep->parsed()) return kvs::run_sweep(rc);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
