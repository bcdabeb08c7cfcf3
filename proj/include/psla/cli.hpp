#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "psla/autograd.hpp"
#include "psla/pipeline.hpp"
#include "psla/synthetic.hpp"

namespace psla::cli {

inline constexpr const char* kBenchCsvHeader = "variant,mode,d,interval,C,H,W,stage,median_ms,p90_ms,macs,params,corr_acc";

// ---- bench ----

struct BenchConfig {
  PipelineConfig base;
  std::vector<Variant> variants;
  std::vector<int> ds;
  std::vector<std::size_t> intervals;
  std::vector<Mode> modes;
  SyntheticVideoConfig video;
  std::vector<std::string> stages{"total"};
  std::size_t repeat = 11;
  std::size_t warmup = 2;
};

// Pipeline keys plus "video", "stages", "repeat", "warmup". variant, d,
// interval and mode may be scalars or arrays; arrays span the grid.
BenchConfig parse_bench_config(const nlohmann::json& doc);
BenchConfig default_bench_config();

struct BenchRow {
  Variant variant = Variant::Psla;
  Mode mode = Mode::Full;
  int d = 0;
  std::size_t interval = 0;
  std::size_t channels = 0, height = 0, width = 0;
  std::string stage;
  double median_ms = 0.0;
  double p90_ms = 0.0;
  std::uint64_t macs = 0;
  std::size_t params = 0;
  std::optional<double> corr_acc;
};

struct BenchCell {
  PipelineConfig config;
  double fps_equivalent = 0.0;  // median over repetitions
  std::vector<BenchRow> rows;
};

struct BenchReport {
  std::vector<BenchCell> cells;
  std::vector<BenchRow> rows() const;
};

BenchReport run_bench(const BenchConfig& config, std::uint64_t seed);
void write_bench_csv(std::ostream& out, const BenchReport& report);
nlohmann::json to_json(const BenchReport& report);

double median(std::vector<double> values);
double percentile90(std::vector<double> values);

// ---- gradcheck ----

struct GradCheckCase {
  std::string name;
  std::function<GradCheckResult(std::uint64_t seed)> run;
};

struct GradCheckRow {
  std::string name;
  GradCheckResult result;
  bool pass = false;
};

inline constexpr double kGradCheckTolerance = 1e-3;

std::vector<GradCheckCase> default_grad_checks();
std::vector<GradCheckRow> run_grad_checks(const std::vector<GradCheckCase>& cases, std::uint64_t seed);
void write_grad_table(std::ostream& out, const std::vector<GradCheckRow>& rows);
bool all_pass(const std::vector<GradCheckRow>& rows);

// ---- params ----

nlohmann::json params_report(const PipelineConfig& config);
void write_params_table(std::ostream& out, const PipelineConfig& config);

// ---- demo ----

struct DemoConfig {
  PipelineConfig pipeline;
  SyntheticVideoConfig video;
};

DemoConfig default_demo_config();
// Pipeline keys plus "video".
DemoConfig parse_demo_config(const nlohmann::json& doc);

struct DemoSummary {
  std::vector<std::filesystem::path> tensor_files;
  RunStats stats;
};

DemoSummary run_demo(const DemoConfig& config, std::uint64_t seed, const std::filesystem::path& out_dir);

// ---- shared ----

nlohmann::json load_json_file(const std::filesystem::path& path);
void apply_video_json(SyntheticVideoConfig& video, const nlohmann::json& doc);

// Parses and dispatches a command line (args[0] is the program name);
// returns the process exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace psla::cli
