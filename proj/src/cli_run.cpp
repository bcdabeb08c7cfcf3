#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "psla/cli.hpp"
#include "psla/errors.hpp"
#include "psla/neighborhood.hpp"

namespace psla::cli {

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write '" + path.string() + "'");
  f << text;
  if (!f) throw IoError("failed writing '" + path.string() + "'");
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Sparse local attention feature propagation toolkit"};
  app.require_subcommand(1);

  std::string config_path, out_path;
  std::uint64_t seed = 0;
  std::size_t repeat = 0;
  int d = 4;
  std::string variant = "psla";

  auto* bench = app.add_subcommand("bench", "time run_video over a {variant x d x interval x mode} grid");
  bench->add_option("--config", config_path, "JSON grid config")->check(CLI::ExistingFile);
  bench->add_option("--out", out_path, "CSV path; a .json report is written next to it");
  bench->add_option("--seed", seed, "synthetic data and init seed");
  bench->add_option("--repeat", repeat, "timed repetitions per cell (>= 5)");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference checks of every differentiable op");
  gradcheck->add_option("--seed", seed, "seed for inputs and parameters");
  gradcheck->add_option("--out", out_path, "optional JSON table");

  auto* params = app.add_subcommand("params", "parameter ledger of the propagation machinery");
  params->add_option("--config", config_path, "JSON pipeline config (default: full channel sizes)")
      ->check(CLI::ExistingFile);
  params->add_option("--out", out_path, "optional JSON ledger");

  auto* demo = app.add_subcommand("demo", "dump tensors and stats of one synthetic run");
  demo->add_option("--seed", seed, "seed");
  demo->add_option("--out", out_path, "output directory")->required();
  demo->add_option("--config", config_path, "JSON pipeline config with optional \"video\" block")
      ->check(CLI::ExistingFile);

  auto* dump = app.add_subcommand("dump-neighborhood", "print a neighborhood spec as JSON");
  dump->add_option("--d", d, "max displacement");
  dump->add_option("--variant", variant, "psla | dense");
  dump->add_option("--config", config_path, "JSON config; its \"d\" and \"variant\" are used")
      ->check(CLI::ExistingFile);
  dump->add_option("--out", out_path, "output file (default stdout)");

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: usage: " << e.what() << '\n';
    return 2;
  }

  try {
    if (bench->parsed()) {
      BenchConfig config = config_path.empty() ? default_bench_config() : parse_bench_config(load_json_file(config_path));
      if (repeat) {
        if (repeat < 5) throw ConfigError("--repeat must be >= 5");
        config.repeat = repeat;
      }
      const BenchReport report = run_bench(config, seed);
      std::ostringstream csv;
      write_bench_csv(csv, report);
      if (out_path.empty()) {
        out << csv.str();
      } else {
        write_text(out_path, csv.str());
        write_text(std::filesystem::path(out_path).replace_extension(".json"), to_json(report).dump(2) + "\n");
        out << "wrote " << report.rows().size() << " rows to " << out_path << '\n';
      }
      return 0;
    }
    if (gradcheck->parsed()) {
      const auto rows = run_grad_checks(default_grad_checks(), seed);
      write_grad_table(out, rows);
      if (!out_path.empty()) {
        nlohmann::json doc = nlohmann::json::array();
        for (const auto& r : rows) doc.push_back({{"check", r.name}, {"max_rel_error", r.result.max_rel_error}, {"skipped", r.result.skipped}, {"pass", r.pass}});
        write_text(out_path, doc.dump(2) + "\n");
      }
      if (!all_pass(rows)) {
        err << "error: gradcheck: " << std::count_if(rows.begin(), rows.end(), [](auto& r) { return !r.pass; })
            << " check(s) failed\n";
        return 1;
      }
      return 0;
    }
    if (params->parsed()) {
      const PipelineConfig config = config_path.empty() ? PipelineConfig{} : parse_pipeline_config(load_json_file(config_path));
      write_params_table(out, config);
      if (!out_path.empty()) write_text(out_path, params_report(config).dump(2) + "\n");
      return 0;
    }
    if (demo->parsed()) {
      const DemoConfig config = config_path.empty() ? default_demo_config() : parse_demo_config(load_json_file(config_path));
      const DemoSummary summary = run_demo(config, seed, out_path);
      out << "wrote " << summary.tensor_files.size() << " tensors to " << out_path << '\n';
      return 0;
    }
    if (dump->parsed()) {
      if (!config_path.empty()) {
        const auto doc = load_json_file(config_path);
        d = doc.value("d", d);
        variant = doc.value("variant", variant);
      }
      const Variant v = parse_variant(variant);
      NeighborhoodSpec spec;
      if (v == Variant::Psla) {
        spec = build_progressive(d);
      } else if (v == Variant::Dense || v == Variant::MatchTrans) {
        spec = build_dense(d);
      } else {
        throw ConfigError("variant '" + variant + "' has no local neighborhood");
      }
      const std::string text = to_json(spec).dump() + "\n";
      if (out_path.empty()) {
        out << text;
      } else {
        write_text(out_path, text);
      }
      return 0;
    }
  } catch (const Error& e) {
    err << "error: " << e.kind() << ": " << e.what() << '\n';
    return 1;
  } catch (const nlohmann::json::exception& e) {
    err << "error: config: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: internal: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace psla::cli
