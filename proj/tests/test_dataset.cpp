#include <doctest.h>

#include "nvtwin/config.hpp"
#include "nvtwin/dataset.hpp"

#include <csignal>
#include <filesystem>
#include <fstream>
#include <random>
#include <sys/wait.h>
#include <unistd.h>

using namespace nvtwin::data;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("nvtwin-ds-" + std::to_string(::getpid()) + "-" + std::to_string(counter()++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  static int& counter() {
    static int c = 0;
    return c;
  }
};

std::vector<double> ramp(std::size_t n, double a = 0.0, double step = 1.0) {
  std::vector<double> v(n);
  for (std::size_t k = 0; k < n; ++k) v[k] = a + step * static_cast<double>(k);
  return v;
}

Dataset sample_dataset(Kind kind) {
  Dataset ds;
  ds.kind = kind;
  if (kind == Kind::scan2d) {
    ds.axes = {{"x", "um", ramp(7, 9.0, 0.05)}, {"y", "um", ramp(5, 9.5, 0.05)}};
  } else {
    ds.axes = {{"t", "s", ramp(11, 0.0, 1e-9)}};
  }
  const std::size_t n = ds.point_count();
  std::vector<double> v = ramp(n, 3.25, 0.1);
  v[1] = std::numeric_limits<double>::quiet_NaN();
  v[2] = -0.0;
  v[3] = 1e-310;  // subnormal survives
  ds.channels.push_back({"counts", "counts", v, {}});
  ds.channels.push_back({"signal", "", ramp(n, 1.0, 0.5), ramp(n, 0.1, 0.0)});
  ds.metadata = {{"seed", 7}, {"sequence", "laser 3us;\nwait 1us"}, {"unicode", "µs"}};
  nvtwin::analysis::FitResult f;
  f.model = nvtwin::analysis::ModelKind::rabi_eq4;
  f.parameters = {{"a", 1.0 / 3.0, std::numeric_limits<double>::infinity()}, {"omega", 20.4e6, 1e5}};
  f.converged = true;
  f.dof = 6;
  ds.fits.push_back(f);
  return ds;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

}  // namespace

TEST_SUITE("dataset") {
  TEST_CASE("round trip for every kind") {
    TempDir dir;
    for (auto kind : {Kind::scan2d, Kind::spectrum, Kind::time_trace, Kind::histogram, Kind::sweep}) {
      const Dataset ds = sample_dataset(kind);
      const fs::path p = dir.path / (to_string(kind) + ".ds");
      save_dataset(ds, p);
      const Dataset back = load_dataset(p);
      CHECK(back == ds);
      CHECK(std::signbit(back.channel("counts").values[2]));
      CHECK(back.fits[0].parameters[0].sigma == std::numeric_limits<double>::infinity());
      CHECK(read_header(p)["kind"] == to_string(kind));
    }
  }

  TEST_CASE("header is a readable text line") {
    TempDir dir;
    const fs::path p = dir.path / "a.ds";
    save_dataset(sample_dataset(Kind::sweep), p);
    const std::string bytes = slurp(p);
    CHECK(bytes.rfind("NVTWIN-DS 1\n{", 0) == 0);
    const auto nl = bytes.find('\n', 12);
    const auto header = nlohmann::json::parse(bytes.substr(12, nl - 12));
    CHECK(header["channels"][1]["sigma"] == true);
    CHECK(header["payload_bytes"] == 8 * (11 + 11 + 22));
    CHECK(bytes.size() == nl + 1 + 8 * 44 + 16);
    CHECK(bytes.substr(bytes.size() - 16, 7) == "\nCRC32 ");
  }

  TEST_CASE("validation") {
    Dataset ds = sample_dataset(Kind::sweep);
    ds.channels[0].values.pop_back();
    CHECK_THROWS_AS(ds.validate(), DatasetError);
    ds = sample_dataset(Kind::spectrum);
    ds.channels[1].sigma.pop_back();
    CHECK_THROWS_AS(ds.validate(), DatasetError);
    ds = sample_dataset(Kind::scan2d);
    ds.kind = Kind::sweep;
    CHECK_THROWS_AS(ds.validate(), DatasetError);
    CHECK_THROWS_AS(kind_from_string("movie"), DatasetError);
  }

  TEST_CASE("truncation and corruption are detected") {
    TempDir dir;
    const fs::path p = dir.path / "a.ds";
    save_dataset(sample_dataset(Kind::scan2d), p);
    const std::string good = slurp(p);
    const fs::path q = dir.path / "cut.ds";
    for (std::size_t cut = 12; cut < good.size(); cut += 7) {
      spit(q, good.substr(0, cut));
      CHECK_THROWS_AS(load_dataset(q), ChecksumError);
    }
    std::mt19937_64 rng(1);
    for (int k = 0; k < 50; ++k) {
      std::string bad = good;
      const std::size_t at = std::uniform_int_distribution<std::size_t>(12, good.size() - 17)(rng);
      bad[at] = static_cast<char>(bad[at] ^ 0x10);
      spit(q, bad);
      CHECK_THROWS_AS(load_dataset(q), ChecksumError);
    }
    std::string v2 = good;
    v2[10] = '2';
    spit(q, v2);
    CHECK_THROWS_AS(load_dataset(q), VersionError);
    spit(q, "hello world");
    CHECK_THROWS_AS(load_dataset(q), DatasetError);
    CHECK_THROWS_AS(load_dataset(dir.path / "missing.ds"), DatasetError);
  }

  TEST_CASE("save replaces atomically and leaves no temp files") {
    TempDir dir;
    const fs::path p = dir.path / "a.ds";
    save_dataset(sample_dataset(Kind::sweep), p);
    save_dataset(sample_dataset(Kind::histogram), p);
    CHECK(load_dataset(p).kind == Kind::histogram);
    int files = 0;
    for ([[maybe_unused]] const auto& e : fs::directory_iterator(dir.path)) ++files;
    CHECK(files == 1);
    CHECK_THROWS_AS(save_dataset(sample_dataset(Kind::sweep), dir.path / "no" / "such" / "dir.ds"), DatasetError);
  }

  TEST_CASE("killed writer never leaves a valid but wrong file") {
    TempDir dir;
    const fs::path p = dir.path / "big.ds";
    Dataset big;
    big.kind = Kind::scan2d;
    big.axes = {{"x", "um", ramp(600)}, {"y", "um", ramp(600)}};
    big.channels.push_back({"counts", "counts", ramp(600 * 600, 0.5), {}});
    const Dataset old = sample_dataset(Kind::sweep);
    save_dataset(old, p);
    for (int trial = 0; trial < 6; ++trial) {
      const pid_t pid = ::fork();
      REQUIRE(pid >= 0);
      if (pid == 0) {
        for (;;) save_dataset(big, p);
      }
      ::usleep(static_cast<useconds_t>(3000 + 7000 * trial));
      ::kill(pid, SIGKILL);
      int status = 0;
      ::waitpid(pid, &status, 0);
      const Dataset now = load_dataset(p);
      CHECK((now == old || now == big));
      for (const auto& e : fs::directory_iterator(dir.path)) {
        if (e.path() == p) continue;
        // A leftover temp file is either incomplete or a complete copy.
        bool ok = false;
        try {
          ok = load_dataset(e.path()) == big;
        } catch (const DatasetError&) {
          ok = true;
        }
        CHECK(ok);
        fs::remove(e.path());
      }
    }
  }

  TEST_CASE("streaming writer") {
    TempDir dir;
    const fs::path p = dir.path / "s.ds";
    {
      StreamWriter w(p, Kind::scan2d, {{"x", "um", ramp(4)}, {"y", "um", ramp(3)}}, {{"counts", "counts"}, {"aux", ""}});
      const std::vector<double> row = {1, 2, 3, 4};
      w.append(0, row);
      w.append(0, row);
      CHECK(w.written(0) == 8);
      CHECK_THROWS_AS(w.append(0, ramp(5)), DatasetError);
      w.append(1, std::vector<double>{9});
      CHECK_THROWS_AS(w.append(0, row), DatasetError);
      w.finish({{"note", "partial"}}, {}, true);
    }
    const Dataset ds = load_dataset(p);
    CHECK(ds.aborted);
    CHECK(ds.point_count() == 12);
    const auto& c = ds.channel("counts").values;
    CHECK(c[7] == 4.0);
    CHECK(std::isnan(c[8]));
    CHECK(ds.channel("aux").values[0] == 9.0);
    CHECK(std::isnan(ds.channel("aux").values[1]));
    CHECK(ds.metadata["note"] == "partial");
  }

  TEST_CASE("2000 x 2000 scan streams and reloads bit-identically") {
    TempDir dir;
    const fs::path p = dir.path / "full.ds";
    const std::size_t n = 2000;
    std::vector<double> axis = ramp(n, 0.0, 0.01);
    std::mt19937_64 rng(4);
    std::poisson_distribution<int> pois(30.0);
    {
      StreamWriter w(p, Kind::scan2d, {{"x", "um", axis}, {"y", "um", axis}}, {{"counts", "counts"}});
      std::vector<double> row(n);
      for (std::size_t y = 0; y < n; ++y) {
        for (auto& v : row) v = pois(rng);
        w.append(0, row);
      }
      w.finish(Json::object(), {}, false);
    }
    CHECK(fs::file_size(p) > 8 * n * n);
    const Dataset ds = load_dataset(p);
    REQUIRE(ds.point_count() == n * n);
    std::mt19937_64 check(4);
    std::poisson_distribution<int> pc(30.0);
    bool same = true;
    for (double v : ds.channel("counts").values) same = same && v == pc(check);
    CHECK(same);
  }
}
