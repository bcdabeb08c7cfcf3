#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "psla/cli.hpp"
#include "psla/errors.hpp"
#include "psla/tensor_io.hpp"

using namespace psla;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "psla");
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path temp(const std::string& name) {
  const auto p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  return p;
}

void write_file(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

std::map<std::string, std::string> tensor_hashes(const fs::path& dir) {
  std::map<std::string, std::string> h;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".psla") h[e.path().filename().string()] = io::sha256_file(e.path());
  return h;
}

cli::BenchConfig tiny_bench() {
  auto c = cli::parse_bench_config(nlohmann::json::parse(R"({
    "channels": {"low": 8, "feat": 16, "embed": 8},
    "video": {"frames": 20, "height": 16, "width": 16},
    "repeat": 5, "warmup": 1})"));
  return c;
}

}  // namespace

TEST_CASE("bench csv header matches the golden file") {
  const std::string golden = read_file(std::string(PSLA_GOLDEN_DIR) + "/bench_header.csv");
  std::ostringstream csv;
  cli::write_bench_csv(csv, {});
  CHECK(csv.str() == golden);
}

TEST_CASE("single-cell bench writes exactly one row") {
  const auto dir = temp("psla_cli_bench");
  fs::create_directories(dir);
  write_file(dir / "grid.json", R"({"channels": {"low": 8, "feat": 16, "embed": 8},
      "video": {"frames": 6, "height": 12, "width": 12}, "repeat": 5, "warmup": 0})");
  const auto r = run_cli({"bench", "--config", (dir / "grid.json").string(), "--out", (dir / "b.csv").string()});
  REQUIRE(r.code == 0);
  const auto rows = lines(read_file(dir / "b.csv"));
  REQUIRE(rows.size() == 2);
  CHECK(rows[0] == cli::kBenchCsvHeader);
  CHECK(rows[1].rfind("psla,F,4,10,16,12,12,total,", 0) == 0);
  const auto report = nlohmann::json::parse(read_file(dir / "b.json"));
  CHECK(report["cells"].size() == 1);
  fs::remove_all(dir);
}

TEST_CASE("bench grids span every combination") {
  auto c = tiny_bench();
  c.variants = {Variant::Psla, Variant::Dense};
  c.ds = {2, 4};
  c.stages = {"total", "attend"};
  c.video.frames = 4;
  const auto report = cli::run_bench(c, 0);
  CHECK(report.cells.size() == 4);
  CHECK(report.rows().size() == 8);
  const auto& row = report.cells[0].rows[1];
  CHECK(row.stage == "attend");
  CHECK(row.macs > 0);
}

TEST_CASE("fps rises with the key-frame interval in full mode") {
  auto c = tiny_bench();
  c.intervals = {1, 5, 10, 20};
  // key frames must cost visibly more than non-key frames for the ordering to show
  c.base.channels.feat = 32;
  c.video.height = c.video.width = 32;
  c.base.backbone_heavy_layers = 24;
  c.repeat = 7;
  const auto report = cli::run_bench(c, 0);
  REQUIRE(report.cells.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) MESSAGE("interval " << c.intervals[i] << " fps " << report.cells[i].fps_equivalent);
  for (std::size_t i = 1; i < 4; ++i) CHECK(report.cells[i].fps_equivalent >= report.cells[i - 1].fps_equivalent);
}

TEST_CASE("bench config errors name the key") {
  try {
    cli::parse_bench_config(nlohmann::json::parse(R"({"repeats": 5})"));
    FAIL("expected a config error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("repeats") != std::string::npos);
  }
  CHECK_THROWS_AS(cli::parse_bench_config(nlohmann::json::parse(R"({"repeat": 3})")), ConfigError);
  CHECK_THROWS_AS(cli::parse_bench_config(nlohmann::json::parse(R"({"video": {"fps": 3}})")), ConfigError);
  CHECK_THROWS_AS(cli::parse_bench_config(nlohmann::json::parse(R"({"channels": {"feat": 0}})")), ConfigError);
}

TEST_CASE("median and p90") {
  CHECK(cli::median({3, 1, 2}) == 2);
  CHECK(cli::median({4, 1, 2, 3}) == 2.5);
  std::vector<double> v;
  for (int i = 1; i <= 10; ++i) v.push_back(i);
  CHECK(cli::percentile90(v) == 9);
}

TEST_CASE("gradcheck passes and is deterministic") {
  const auto a = run_cli({"gradcheck", "--seed", "3"});
  CHECK(a.code == 0);
  const auto b = run_cli({"gradcheck", "--seed", "3"});
  CHECK(a.out == b.out);
  CHECK(a.out.find("FAIL") == std::string::npos);
  CHECK(lines(a.out).size() == cli::default_grad_checks().size() + 1);
}

TEST_CASE("a corrupted backward fails the table") {
  cli::GradCheckCase broken{"broken_square", [](std::uint64_t) {
                              return grad_check_detailed(
                                  [](GradTape& tape, std::span<const Var> in) {
                                    const Tensor x = tape.value(in[0]);
                                    Tensor y = x;
                                    for (auto& v : y.data()) v = v * v;
                                    return tape.record(y, {in[0]}, [x](const Tensor& g, const std::vector<bool>&) {
                                      Tensor dx = g;
                                      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] *= 3.0f * x[i];
                                      return std::vector<Tensor>{dx};
                                    });
                                  },
                                  std::vector<Tensor>{Tensor({4}, std::vector<float>{0.5f, -1.0f, 2.0f, 1.5f})});
                            }};
  const auto rows = cli::run_grad_checks({broken}, 0);
  CHECK_FALSE(cli::all_pass(rows));
  std::ostringstream table;
  cli::write_grad_table(table, rows);
  CHECK(table.str().find("FAIL") != std::string::npos);
}

TEST_CASE("params: ledger at full sizes and disabled embeddings") {
  const auto r = run_cli({"params"});
  CHECK(r.code == 0);
  CHECK(r.out.find("5385828") != std::string::npos);
  PipelineConfig off;
  off.channels.embed = 0;
  const auto report = cli::params_report(off);
  CHECK(report["components"]["rfu_embedding"] == 0);
  CHECK(report["components"]["denseft_embedding"] == 0);
}

TEST_CASE("demo dumps are byte-identical for one seed") {
  const auto a = temp("psla_demo_a"), b = temp("psla_demo_b");
  REQUIRE(run_cli({"demo", "--seed", "5", "--out", a.string()}).code == 0);
  REQUIRE(run_cli({"demo", "--seed", "5", "--out", b.string()}).code == 0);
  const auto ha = tensor_hashes(a), hb = tensor_hashes(b);
  CHECK(ha.size() > 12);
  CHECK(ha == hb);
  const auto w = io::load(a / "frame_000.denseft_weights.psla");
  CHECK(w.rank() == 3);
  CHECK(w.dim(2) == 33);
  const auto sidecar = nlohmann::json::parse(read_file(a / "frame_000.denseft_weights.json"));
  CHECK(sidecar == nlohmann::json{{"d", 4}, {"variant", "psla"}});
  const auto stats = nlohmann::json::parse(read_file(a / "run_stats.json"));
  CHECK(stats["frames"].size() == 12);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("demo with interval 1 has no dense-transform outputs") {
  const auto dir = temp("psla_demo_l1");
  const auto cfg_path = fs::temp_directory_path() / "psla_demo_l1.json";
  write_file(cfg_path, R"({"interval": 1, "channels": {"low": 8, "feat": 8, "embed": 8}})");
  REQUIRE(run_cli({"demo", "--out", dir.string(), "--config", cfg_path.string()}).code == 0);
  std::size_t denseft = 0, rfu = 0;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    denseft += name.find("denseft") != std::string::npos;
    rfu += name.find("rfu_weights.psla") != std::string::npos;
  }
  CHECK(denseft == 0);
  CHECK(rfu == 11);
  fs::remove_all(dir);
  fs::remove(cfg_path);
}

TEST_CASE("demo into an unwritable location is an io error") {
  const auto blocker = fs::temp_directory_path() / "psla_demo_blocker";
  fs::remove_all(blocker);
  write_file(blocker, "x");
  CHECK_THROWS_AS(cli::run_demo(cli::default_demo_config(), 0, blocker / "sub"), IoError);
  const auto r = run_cli({"demo", "--out", (blocker / "sub").string()});
  CHECK(r.code == 1);
  CHECK(r.err.rfind("error: io: ", 0) == 0);
  fs::remove(blocker);
}

TEST_CASE("dump-neighborhood matches the golden file") {
  const auto r = run_cli({"dump-neighborhood", "--d", "2"});
  REQUIRE(r.code == 0);
  const auto golden = nlohmann::json::parse(read_file(std::string(PSLA_GOLDEN_DIR) + "/neighborhood_d2.json"));
  CHECK(nlohmann::json::parse(r.out) == golden);
  const auto dense = nlohmann::json::parse(run_cli({"dump-neighborhood", "--d", "4", "--variant", "dense"}).out);
  CHECK(dense["offsets"].size() == 81);
}

TEST_CASE("usage and error exit codes") {
  CHECK(run_cli({}).code == 2);
  const auto bad = run_cli({"frobnicate"});
  CHECK(bad.code == 2);
  CHECK(bad.err.rfind("error: usage: ", 0) == 0);
  const auto d0 = run_cli({"dump-neighborhood", "--d", "0"});
  CHECK(d0.code == 1);
  CHECK(d0.err.rfind("error: invalid-input: ", 0) == 0);
  const auto nl = run_cli({"dump-neighborhood", "--variant", "nonlocal"});
  CHECK(nl.code == 1);
  CHECK(nl.err.rfind("error: config: ", 0) == 0);
  const auto missing = run_cli({"params", "--config", "/nonexistent.json"});
  CHECK(missing.code == 2);
}

TEST_CASE("the installed binary reports exit codes") {
  const std::string exe = PSLA_CLI_PATH;
  CHECK(std::system((exe + " dump-neighborhood --d 1 > /dev/null").c_str()) == 0);
  const int status = std::system((exe + " dump-neighborhood --d 0 2> /dev/null").c_str());
  CHECK(WEXITSTATUS(status) == 1);
}
