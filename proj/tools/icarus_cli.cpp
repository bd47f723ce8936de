// Copyright 2026 The icarus-kv Authors.
// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "CLI11.hpp"

#include "icarus/cli.hpp"

namespace {

struct Flags {
  std::string config;
  uint64_t seed = 0;
  std::string out;
  std::string mode;
  std::vector<size_t> agents;
  std::vector<double> qps;
  double budget_mb = 0;
  std::string eviction;
  size_t steps = 0;
  std::string path;
  bool inject_kv_adapter = false;
};

void add_common(CLI::App* app, Flags& f) {
  app->add_option("--config", f.config, "JSON config file")->check(CLI::ExistingFile);
  app->add_option("--seed", f.seed, "seed for every generator");
  app->add_option("--out", f.out, "output directory");
}

icarus::Overrides overrides(CLI::App* app, const Flags& f) {
  icarus::Overrides o;
  auto given = [&](const char* name) { return app->get_option_no_throw(name) && app->count(name) > 0; };
  if (given("--seed")) o.seed = f.seed;
  if (given("--out")) o.out = f.out;
  if (given("--mode")) o.mode = f.mode;
  if (given("--agents")) o.agents = f.agents;
  if (given("--qps")) o.qps = f.qps;
  if (given("--budget-mb")) o.budget_mb = f.budget_mb;
  if (given("--eviction")) o.eviction = f.eviction;
  if (given("--steps")) o.steps = f.steps;
  if (given("--path")) o.path = f.path;
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"icarus: shared-cache multi-adapter inference toolkit"};
  app.require_subcommand(1);
  Flags f;

  auto* verify = app.add_subcommand("verify", "run the cache-identity, decode, gradient and namespace suites");
  add_common(verify, f);
  verify->add_flag("--inject-kv-adapter", f.inject_kv_adapter, "serve purity trials with K/V-adapted models");

  auto* train = app.add_subcommand("train", "train adapters on a toy corpus and write paired loss traces");
  add_common(train, f);
  train->add_option("--mode", f.mode, "icarus, conventional or both");
  train->add_option("--steps", f.steps, "optimizer steps");

  auto* sim = app.add_subcommand("sim", "sweep the serving simulator");
  add_common(sim, f);
  sim->add_option("--mode", f.mode, "baseline, icarus or both");
  sim->add_option("--agents", f.agents, "agent counts")->delimiter(',');
  sim->add_option("--qps", f.qps, "arrival rates")->delimiter(',');
  sim->add_option("--budget-mb", f.budget_mb, "KV memory budget in MiB");
  sim->add_option("--eviction", f.eviction, "recompute or swap");
  sim->add_option("--path", f.path, "fused or sequential decode for icarus cells");

  CLI11_PARSE(app, argc, argv);

  try {
    CLI::App* cmd = app.get_subcommands().front();
    const std::string name = cmd->get_name();
    icarus::CliConfig config = icarus::load_config(f.config);
    icarus::apply_overrides(config, overrides(cmd, f), name);
    if (name == "verify") {
      if (f.inject_kv_adapter) config.verify.inject_kv_adapter = true;
      return icarus::cmd_verify(config, std::cout);
    }
    if (name == "train") return icarus::cmd_train(config, std::cout);
    return icarus::cmd_sim(config, std::cout);
  } catch (const icarus::UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const icarus::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 3;
  } catch (const icarus::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
