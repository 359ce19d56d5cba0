#include <doctest.h>

#include "nvtwin/dataset.hpp"
#include "test_support.hpp"

#include <array>
#include <cstdio>
#include <fstream>
#include <regex>
#include <sstream>
#include <sys/wait.h>

using nvtwin::testing::ScratchDir;

namespace {

struct Output {
  int status = -1;
  std::string text;  // stdout and stderr
};

Output run_cli(const std::string& args) {
  const std::string cmd = std::string(NVTWIN_CLI_PATH) + " " + args + " 2>&1";
  Output out;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), buf.size(), pipe)) out.text += buf.data();
  const int raw = ::pclose(pipe);
  out.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  return out;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

const std::string kConfig = std::string(NVTWIN_SOURCE_DIR) + "/configs/default.json";

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("rabi with a fixed seed writes bit-identical files") {
    ScratchDir dir("cli");
    const auto a = dir.path / "a.ds", b = dir.path / "b.ds";
    const auto first = run_cli("rabi --config " + kConfig + " --seed 7 --out " + a.string());
    REQUIRE(first.status == 0);
    CHECK(first.text.find("tau_pi = 24.5") != std::string::npos);
    REQUIRE(run_cli("rabi --config " + kConfig + " --seed 7 --out " + b.string()).status == 0);
    CHECK(slurp(a) == slurp(b));
    CHECK(nvtwin::data::load_dataset(a).metadata["seed"] == 7);

    const auto c = dir.path / "c.ds";
    REQUIRE(run_cli("rabi --config " + kConfig + " --seed 8 --out " + c.string()).status == 0);
    CHECK(slurp(a) != slurp(c));
  }

  TEST_CASE("odmr --bz reports the inferred field") {
    ScratchDir dir("cli");
    const auto out = run_cli("odmr --bz 356e-6 --seed 3 --out " + (dir.path / "o.ds").string() +
                             R"( --params '{"laser_power": 0.3e-3, "mw_rabi": 0.2e6, "dwell": 200}')");
    REQUIRE(out.status == 0);
    std::smatch m;
    REQUIRE(std::regex_search(out.text, m, std::regex(R"(Bz = ([0-9.]+) \+- ([0-9.]+) uT)")));
    const double bz = std::stod(m[1]), sigma = std::stod(m[2]);
    MESSAGE("Bz = " << bz << " +- " << sigma << " uT");
    CHECK(bz == doctest::Approx(356.0).epsilon(2.0 / 356.0));
    CHECK(sigma < 2.0);
  }

  TEST_CASE("render writes figures with the fit overlay and annotations") {
    ScratchDir dir("cli");
    const auto ds = dir.path / "r.ds";
    REQUIRE(run_cli("rabi --seed 2 --out " + ds.string()).status == 0);
    const auto out = run_cli("render " + ds.string());
    REQUIRE(out.status == 0);
    const std::string svg = slurp(dir.path / "r.svg");
    CHECK(svg.find("<svg") != std::string::npos);
    CHECK(svg.find("stroke='black' stroke-width='1.5' points=") != std::string::npos);  // fitted curve
    CHECK(svg.find("Ω = 20.") != std::string::npos);
    CHECK(svg.find("τπ = 24.5") != std::string::npos);

    const auto scan = dir.path / "s.ds";
    REQUIRE(run_cli("scan --seed 2 --out " + scan.string() + R"( --params '{"resolution": 0.1}')").status == 0);
    REQUIRE(run_cli("render " + scan.string()).status == 0);
    CHECK(slurp(dir.path / "s.png").rfind("\x89PNG", 0) == 0);
    CHECK(slurp(dir.path / "s.svg").find("s.png") != std::string::npos);
  }

  TEST_CASE("calibrate-rates passes on the default rates") {
    const auto out = run_cli("calibrate-rates --no-simulate");
    CHECK(out.status == 0);
    CHECK(out.text.find("calibration OK") != std::string::npos);
  }

  TEST_CASE("replay regenerates a dataset from its metadata") {
    ScratchDir dir("cli");
    const auto a = dir.path / "l.ds", b = dir.path / "l2.ds";
    REQUIRE(run_cli("lifetime --seed 4 --out " + a.string()).status == 0);
    REQUIRE(run_cli("replay " + a.string() + " --out " + b.string()).status == 0);
    CHECK(nvtwin::data::load_dataset(a) == nvtwin::data::load_dataset(b));
  }

  TEST_CASE("exit codes: usage errors 2, runtime errors 1") {
    CHECK(run_cli("").status == 2);
    CHECK(run_cli("rabi --no-such-flag").status == 2);
    CHECK(run_cli("frobnicate").status == 2);
    CHECK(run_cli("render /nonexistent.ds").status == 2);
    const auto bad = run_cli(R"(rabi --out /tmp/x.ds --params '{"pointz": 3}')");
    CHECK(bad.status == 1);
    CHECK(bad.text.find("pointz") != std::string::npos);
    ScratchDir dir("cli");
    const auto broken = dir.path / "broken.ds";
    std::ofstream(broken) << "NVTWIN-DS 1\n{}";
    CHECK(run_cli("render " + broken.string()).status == 1);
    const auto cfg = dir.path / "bad.json";
    std::ofstream(cfg) << R"({"format_version": 1, "physcs": {}})";
    const auto c = run_cli("rabi --config " + cfg.string());
    CHECK(c.status == 1);
    CHECK(c.text.find("physcs") != std::string::npos);
  }
}
