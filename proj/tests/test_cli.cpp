#include <gtest/gtest.h>

#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "support.hpp"

using namespace mixedsi;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int status = 0;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("mixedsi_cli_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                        "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::create_directories(dir_);
    ScenarioConfig cfg;
    cfg.D = 8;
    const auto sc = generate_scenario(cfg, 1);
    std::ofstream os(dir_ / "toy.csv");
    write_data_csv(os, sc.data);
  }
  void TearDown() override { fs::remove_all(dir_); }

  CliResult invoke(const std::string& args) {
    const auto out = dir_ / "stdout.txt";
    const auto err = dir_ / "stderr.txt";
    const std::string cmd = std::string(MIXEDSI_CLI) + " " + args + " > " + out.string() + " 2> " + err.string();
    const int raw = std::system(cmd.c_str());
    CliResult r;
    r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
  }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, SpiIsByteIdenticalAcrossThreadCounts) {
  const std::string base = "spi --model nerm --data " + path("toy.csv") + " --method bs --alpha 0.05 --B 200 --seed 1";
  const auto a = invoke(base + " --threads 1 --out " + path("a.json"));
  const auto b = invoke(base + " --threads 3 --out " + path("b.json"));
  ASSERT_EQ(a.status, 0) << a.err;
  ASSERT_EQ(b.status, 0) << b.err;
  const std::string ja = slurp(path("a.json"));
  EXPECT_EQ(ja, slurp(path("b.json")));
  const auto j = nlohmann::json::parse(ja);
  EXPECT_EQ(j["method"], "BS");
  EXPECT_EQ(j["B"], 200);
  EXPECT_EQ(j["seed"], 1);
  ASSERT_EQ(j["intervals"].size(), 8u);
  const auto& iv = j["intervals"][0];
  EXPECT_NEAR(iv["center"].get<double>() - iv["lower"].get<double>(),
              iv["upper"].get<double>() - iv["center"].get<double>(), 1e-12);
}

TEST_F(Cli, AllMethodsRun) {
  {
    std::ofstream os(path("tube.txt"));
    os << "kappa0 = 3\nnu = 30\n";
  }
  for (const std::string m : {"mc", "bo", "be", "vt"}) {
    const auto r = invoke("spi --data " + path("toy.csv") + " --method " + m + " --B 100 --K 2000 --tube-constants " + path("tube.txt"));
    EXPECT_EQ(r.status, 0) << m << ": " << r.err;
    const auto j = nlohmann::json::parse(r.out);
    EXPECT_GT(j["critical_value"].get<double>(), 0.0) << m;
  }
}

TEST_F(Cli, UsageAndComputationErrors) {
  EXPECT_EQ(invoke("").status, 1);
  EXPECT_EQ(invoke("spi --method zz --data " + path("toy.csv")).status, 1);
  EXPECT_EQ(invoke("spi --method vt --data " + path("toy.csv")).status, 1);
  {
    std::ofstream os(path("bad.csv"));
    os << "cluster,y,x1\na,1,0.5\na,oops,0.1\n";
  }
  const auto r = invoke("--error-json fit --data " + path("bad.csv") + " --out " + path("never.json"));
  EXPECT_EQ(r.status, 2);
  const auto j = nlohmann::json::parse(r.err);
  EXPECT_EQ(j["error"], "ParseError");
  EXPECT_FALSE(fs::exists(path("never.json")));

  const auto alpha = invoke("spi --data " + path("toy.csv") + " --alpha 1.5 --out " + path("never2.json"));
  EXPECT_EQ(alpha.status, 2);
  EXPECT_FALSE(fs::exists(path("never2.json")));
}

TEST_F(Cli, StepdownMatchesLibrary) {
  {
    std::ofstream os(path("h.csv"));
    for (int d = 0; d < 8; ++d) os << (d < 2 ? 5.0 : 1.5) << '\n';
  }
  const auto r = invoke("test --data " + path("toy.csv") + " --h " + path("h.csv") + " --method bs --stepdown --B 300 --seed 4");
  ASSERT_EQ(r.status, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);

  std::ifstream in(path("toy.csv"));
  const auto data = read_unit_csv(in);
  const auto spec = cluster_mean_spec(data);
  const auto fit = eblup(data, spec);
  const auto draws = parametric_bootstrap(data, spec, fit, 300, 4);
  VectorXd h(8);
  for (int d = 0; d < 8; ++d) h(d) = d < 2 ? 5.0 : 1.5;
  const VectorXd t = t_statistics(fit.mu_hat, fit.scale, h);
  const auto expected = step_down_test(t, stepdown_quantile_provider(draws, 0.05), 0.05);
  EXPECT_EQ(j["stepdown_rejected"].get<std::vector<Index>>(), expected);
  EXPECT_DOUBLE_EQ(j["critical_value"].get<double>(), critical_value_bs(draws, 0.05).value);
}

TEST_F(Cli, FitResidualsTransformSimulate) {
  const auto fit = invoke("fit --data " + path("toy.csv"));
  ASSERT_EQ(fit.status, 0) << fit.err;
  EXPECT_EQ(nlohmann::json::parse(fit.out)["clusters"].size(), 8u);

  const auto res = invoke("residuals --data " + path("toy.csv"));
  ASSERT_EQ(res.status, 0) << res.err;
  EXPECT_EQ(res.out.substr(0, res.out.find('\n')), "kind,cluster,value,normal_score");

  const auto tr = invoke("transform --data " + path("toy.csv") + " --grid 4,5,6");
  ASSERT_EQ(tr.status, 0) << tr.err;
  EXPECT_NE(tr.err.find("c_star"), std::string::npos);

  const auto sim = invoke("simulate --preset table1-row --D 10 --I 4 --B 50 --K 500 --seed 7 --methods bs,bo");
  ASSERT_EQ(sim.status, 0) << sim.err;
  std::istringstream lines(sim.out);
  std::string header;
  std::getline(lines, header);
  EXPECT_EQ(header, "scenario,method,criterion,value,mc_halfwidth");
  int rows = 0;
  for (std::string l; std::getline(lines, l);) ++rows;
  EXPECT_EQ(rows, 6);
  const auto again = invoke("simulate --preset table1-row --D 10 --I 4 --B 50 --K 500 --seed 7 --methods bs,bo --threads 2");
  EXPECT_EQ(sim.out, again.out);

  const auto power = invoke("simulate --preset power --D 10 --I 4 --B 50 --K 500 --delta-grid -1,0,1");
  ASSERT_EQ(power.status, 0) << power.err;
  EXPECT_EQ(power.out.substr(0, power.out.find('\n')), "delta,method,power");
}
