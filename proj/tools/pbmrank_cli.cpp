// pbmrank command-line front end.
//
//   pbmrank run --spec FILE [--out results.json] [--threads N]
//   pbmrank report --results FILE --format csv|json
//   pbmrank plotdata --results FILE --metric reward|bias|regret
//   pbmrank export-dataset --spec FILE --rounds N [--out FILE]
//   pbmrank calibrate --log FILE --slots L [--sweeps N]
//   pbmrank serve [--config FILE]
//
// Failures exit with status 1 (usage) or 2 (runtime) and print one line of
// JSON to stderr: {"error": {"kind": ..., "message": ...}}.

#include <cstdio>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"
#include "pbmrank/bias.hpp"
#include "pbmrank/experiment_spec.hpp"
#include "pbmrank/harness.hpp"
#include "pbmrank/serving.hpp"

namespace {

int fail(const std::string& kind, const std::string& message, int code) {
  nlohmann::json j = {{"error", {{"kind", kind}, {"message", message}}}};
  std::cerr << j.dump() << std::endl;
  return code;
}

int cmd_run(const std::string& spec_path, const std::string& out_path, unsigned threads) {
  const auto specs = pbmrank::load_spec_file(spec_path);
  auto results = pbmrank::run_experiments(specs, threads);
  std::vector<pbmrank::ExperimentOutcome> outcomes;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    for (const auto& r : results[i]) {
      std::fprintf(stderr, "%s replicate %zu: reward %.2f (%.1fs)\n", r.spec_id.c_str(),
                   r.replicate, r.cumulative_reward, r.wall_seconds);
    }
    outcomes.push_back({specs[i], std::move(results[i])});
  }
  pbmrank::write_results(out_path, outcomes);
  pbmrank::write_report_csv(std::cout, pbmrank::results_to_json(outcomes));
  return 0;
}

int cmd_export(const std::string& spec_path, std::uint64_t rounds, const std::string& out_path) {
  const auto specs = pbmrank::load_spec_file(spec_path);
  pbmrank::EnvConfig cfg = specs.front().env;
  cfg.seed = specs.front().replicate_seed(0);
  if (out_path.empty() || out_path == "-") {
    pbmrank::export_dataset(std::cout, cfg, rounds);
  } else {
    std::ofstream out(out_path);
    if (!out) throw std::runtime_error("cannot write " + out_path);
    pbmrank::export_dataset(out, cfg, rounds);
  }
  return 0;
}

int cmd_calibrate(const std::string& log_path, std::size_t slots, int sweeps) {
  std::ifstream in(log_path);
  if (!in) throw std::runtime_error("cannot open click log " + log_path);
  const auto entries = pbmrank::read_click_log(in);
  std::vector<double> init(slots);
  for (std::size_t s = 0; s < slots; ++s) init[s] = 1.0 / (static_cast<double>(s) + 1.05);
  const auto em = pbmrank::em_joint(entries, slots, init, sweeps);

  pbmrank::CtrState ctr(slots);
  pbmrank::ctr_update(ctr, entries);
  nlohmann::json out = {{"records", entries.size()}, {"em", em.q}};
  try {
    out["ctr"] = pbmrank::ctr_bias(ctr).q.values();
  } catch (const pbmrank::NotEstimableError& e) {
    out["ctr"] = nullptr;
  }
  std::cout << out.dump(2) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Contextual ranking bandits under the position-based click model"};
  app.require_subcommand(1);

  std::string spec_path, out_path = "results.json", results_path, format = "csv",
                         metric = "reward", log_path, config_path;
  unsigned threads = 0;
  std::uint64_t rounds = 1000;
  std::size_t slots = 5;
  int sweeps = 50;

  auto* run = app.add_subcommand("run", "Run every experiment in a spec file");
  run->add_option("--spec", spec_path, "Spec file")->required();
  run->add_option("--out", out_path, "Results file");
  run->add_option("--threads", threads, "Worker threads (0 = all cores)");

  auto* report = app.add_subcommand("report", "Summarize a results file");
  report->add_option("--results", results_path, "Results file")->required();
  report->add_option("--format", format, "csv or json")->check(CLI::IsMember({"csv", "json"}));

  auto* plot = app.add_subcommand("plotdata", "Tidy CSV traces from a results file");
  plot->add_option("--results", results_path, "Results file")->required();
  plot->add_option("--metric", metric, "reward, bias or regret")
      ->check(CLI::IsMember({"reward", "bias", "regret"}));

  auto* exp = app.add_subcommand("export-dataset", "Write the synthetic stream of a spec");
  exp->add_option("--spec", spec_path, "Spec file (first grid cell, first seed)")->required();
  exp->add_option("--rounds", rounds, "Rounds to export");
  exp->add_option("--out", out_path, "Output file or - for stdout");

  auto* cal = app.add_subcommand("calibrate", "Estimate position bias from a click log");
  cal->add_option("--log", log_path, "JSON-lines click log")->required();
  cal->add_option("--slots", slots, "Number of positions")->required();
  cal->add_option("--sweeps", sweeps, "EM sweeps");

  auto* serve = app.add_subcommand("serve", "Start the HTTP ranking service");
  serve->add_option("--config", config_path, "Service config (JSON)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what(), 1);
  }

  try {
    if (*run) return cmd_run(spec_path, out_path, threads);
    if (*report) {
      const auto results = pbmrank::read_results(results_path);
      if (format == "csv") pbmrank::write_report_csv(std::cout, results);
      else pbmrank::write_report_json(std::cout, results);
      return 0;
    }
    if (*plot) {
      pbmrank::write_plotdata(std::cout, pbmrank::read_results(results_path), metric);
      return 0;
    }
    if (*exp) return cmd_export(spec_path, rounds, *exp->get_option("--out") ? out_path : "-");
    if (*cal) return cmd_calibrate(log_path, slots, sweeps);
    if (*serve) {
      return pbmrank::run_server(pbmrank::load_service_config(config_path));
    }
  } catch (const pbmrank::SpecError& e) {
    return fail("spec", e.what(), 2);
  } catch (const std::exception& e) {
    return fail("runtime", e.what(), 2);
  }
  return 0;
}
