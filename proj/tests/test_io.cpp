#include <gtest/gtest.h>

#include <sstream>

#include "support.hpp"

using namespace mixedsi;

namespace {

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorCode::InvalidValue;
}

}  // namespace

TEST(UnitCsv, GroupsByFirstAppearance) {
  std::istringstream in("cluster,y,x1\nb,1.0,0.5\na,2.0,0.1\nb,3.0,0.7\na,4,0.2\n");
  const auto data = read_unit_csv(in);
  ASSERT_EQ(data.num_clusters(), 2);
  EXPECT_EQ(data.cluster(0).id, "b");
  EXPECT_EQ(data.cluster(0).size(), 2);
  EXPECT_EQ(data.cluster(1).size(), 2);
  EXPECT_DOUBLE_EQ(data.cluster(0).y(1), 3.0);
  EXPECT_DOUBLE_EQ(data.cluster(1).X(1, 1), 0.2);
  EXPECT_DOUBLE_EQ(data.cluster(1).X(1, 0), 1.0);
}

TEST(UnitCsv, ParseErrorNamesRowAndColumn) {
  std::istringstream in("cluster,y,x1\na,1.0,0.5\na,abc,0.1\n");
  try {
    read_unit_csv(in);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ParseError);
    const std::string msg = e.what();
    EXPECT_NE(msg.find("row 3"), std::string::npos) << msg;
    EXPECT_NE(msg.find("'y'"), std::string::npos) << msg;
  }
  std::istringstream ragged("cluster,y,x1\na,1.0\n");
  EXPECT_EQ(code_of([&] { read_unit_csv(ragged); }), ErrorCode::ParseError);
  std::istringstream no_cov("cluster,y\na,1.0\n");
  EXPECT_EQ(code_of([&] { read_unit_csv(no_cov); }), ErrorCode::ParseError);
}

TEST(UnitCsv, EmptyInput) {
  std::istringstream empty("");
  EXPECT_EQ(code_of([&] { read_unit_csv(empty); }), ErrorCode::EmptyFile);
  std::istringstream header_only("cluster,y,x1\n");
  EXPECT_EQ(code_of([&] { read_unit_csv(header_only); }), ErrorCode::EmptyFile);
}

TEST(UnitCsv, RoundTrip) {
  ScenarioConfig cfg;
  cfg.D = 7;
  const auto sc = generate_scenario(cfg, 3);
  std::stringstream buf;
  write_data_csv(buf, sc.data);
  const auto back = read_unit_csv(buf);
  ASSERT_EQ(back.num_clusters(), sc.data.num_clusters());
  EXPECT_EQ(back.stacked_response(), sc.data.stacked_response());
  EXPECT_EQ(back.stacked_design(), sc.data.stacked_design());
  for (Index d = 0; d < 7; ++d) EXPECT_EQ(back.cluster(d).id, sc.data.cluster(d).id);
}

TEST(AreaCsv, ParsesAndRoundTrips) {
  std::istringstream in("area,y,x1,error_var\nA,1.5,0.2,0.7\nB,2.5,0.9,0.3\n");
  const auto data = read_area_csv(in);
  ASSERT_EQ(data.tag(), ModelTag::FHM);
  EXPECT_DOUBLE_EQ(*data.cluster(1).error_var, 0.3);
  std::stringstream buf;
  write_data_csv(buf, data);
  const auto back = read_area_csv(buf);
  EXPECT_DOUBLE_EQ(*back.cluster(0).error_var, 0.7);
  EXPECT_EQ(back.stacked_design(), data.stacked_design());

  std::istringstream bad("area,y,x1,error_var\nA,1.5,0.2,-1\n");
  EXPECT_EQ(code_of([&] { read_area_csv(bad); }), ErrorCode::ParseError);
  std::istringstream dup("area,y,x1,error_var\nA,1.5,0.2,1\nA,1,0.3,1\n");
  EXPECT_EQ(code_of([&] { read_area_csv(dup); }), ErrorCode::ParseError);
}

TEST(MatrixCsv, OptionalHeader) {
  std::istringstream a("c1,c2\n1,-1\n0,2\n");
  const MatrixXd A = read_matrix_csv(a);
  EXPECT_EQ(A.rows(), 2);
  EXPECT_DOUBLE_EQ(A(1, 1), 2.0);
  std::istringstream b("3.5\n");
  EXPECT_DOUBLE_EQ(read_matrix_csv(b)(0, 0), 3.5);
}

TEST(TubeConstantsFile, ParsesKeysAndComments) {
  std::istringstream in("# geometry\nkappa0 = 4.5\nzeta0=1\nnu = 30\neuler=1 # Euler characteristic\n");
  const auto k = read_tube_constants(in);
  EXPECT_DOUBLE_EQ(k.kappa0, 4.5);
  EXPECT_DOUBLE_EQ(k.zeta0, 1.0);
  EXPECT_DOUBLE_EQ(k.nu, 30.0);
  EXPECT_DOUBLE_EQ(k.euler, 1.0);
  EXPECT_DOUBLE_EQ(k.xi0, 1.0);
  std::istringstream unknown("kappa7 = 1\n");
  EXPECT_EQ(code_of([&] { read_tube_constants(unknown); }), ErrorCode::ParseError);
  std::istringstream invalid("kappa0 = 0\n");
  EXPECT_EQ(code_of([&] { read_tube_constants(invalid); }), ErrorCode::InvalidConstants);
}

namespace {

// log(y + c0) is made of +-z pairs around cluster levels that themselves come
// in +-a pairs, so the conditional residuals at c0 are symmetric.
BlockLmmData symmetric_after_shift(double c0) {
  std::vector<ClusterBlock> cl;
  const double z[] = {0.3, 0.9, 1.4};
  const double offset[] = {-0.5, 0.5, -0.25, 0.25, -0.1, 0.1};
  for (int d = 0; d < 6; ++d) {
    ClusterBlock c;
    c.id = std::to_string(d);
    c.y.resize(6);
    c.X = MatrixXd::Ones(6, 1);
    const double level = 2.0 + offset[d];
    for (int j = 0; j < 3; ++j) {
      c.y(2 * j) = std::exp(level + z[j]) - c0;
      c.y(2 * j + 1) = std::exp(level - z[j]) - c0;
    }
    cl.push_back(std::move(c));
  }
  return BlockLmmData(ModelTag::NERM, std::move(cl));
}

}  // namespace

TEST(LogShift, FindsConstructedMinimum) {
  const double c0 = 3.0;
  const auto data = symmetric_after_shift(c0);
  const std::vector<double> grid{2.0, 2.5, 3.0, 3.5, 4.0, 5.0};
  const auto res = log_shift_transform(data, grid);
  EXPECT_DOUBLE_EQ(res.c_star, c0);
  EXPECT_NEAR(res.skewness[2], 0.0, 1e-9);
  for (Index i = 0; i < res.y_log.size(); ++i) {
    EXPECT_DOUBLE_EQ(res.y_log(i), std::log(data.stacked_response()(i) + c0));
  }
}

TEST(LogShift, GridMinimizerIsExhaustive) {
  std::mt19937_64 rng(3);
  auto data = testing_support::random_nerm(rng, 8, 1, 0.3, 0.5, 4, 6);
  data = data.with_response(data.stacked_response().array().exp().matrix());
  std::vector<double> grid;
  for (int i = 0; i < 15; ++i) grid.push_back(0.1 + 0.4 * i);
  const auto res = log_shift_transform(data, grid);
  const auto it = std::find(grid.begin(), grid.end(), res.c_star);
  ASSERT_NE(it, grid.end());
  const double best = std::abs(res.skewness[static_cast<std::size_t>(it - grid.begin())]);
  for (double s : res.skewness) EXPECT_LE(best, std::abs(s));
}

TEST(LogShift, SingletonGridAndErrors) {
  const auto data = symmetric_after_shift(1.0);
  EXPECT_DOUBLE_EQ(log_shift_transform(data, {2.5}).c_star, 2.5);
  EXPECT_EQ(code_of([&] { log_shift_transform(data, {}); }), ErrorCode::EmptyGrid);
  const double y_min = data.stacked_response().minCoeff();
  EXPECT_EQ(code_of([&] { log_shift_transform(data, {-y_min - 1.0}); }), ErrorCode::NonPositiveShift);
}

TEST(Skewness, MomentDefinition) {
  VectorXd r(4);
  r << 0, 0, 0, 4;
  // m2 = 3, m3 = 6 -> 6 / 3^1.5
  EXPECT_NEAR(fisher_skewness(r), 6.0 / std::pow(3.0, 1.5), 1e-14);
  EXPECT_EQ(fisher_skewness(VectorXd::Ones(3)), 0.0);
}
