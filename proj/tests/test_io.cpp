#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>

#include <gtest/gtest.h>

#include "test_util.hpp"
#include "vilds/io.hpp"

using namespace vilds;
using namespace vilds::testing;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "vilds_test_io";
  fs::create_directories(dir);
  return dir / name;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(Csv, RoundTripsBitExactly) {
  std::mt19937_64 rng(1);
  MatrixXd M = random_matrix(7, 4, rng);
  M(0, 0) = 1.0 / 3.0;
  M(1, 1) = -0.0;
  M(2, 2) = 1e-300;
  M(3, 3) = std::numeric_limits<double>::max();
  const auto path = scratch("m.csv");
  write_matrix_csv(path, M, "x");
  const auto t = read_csv(path);
  EXPECT_EQ(t.header, (std::vector<std::string>{"x1", "x2", "x3", "x4"}));
  ASSERT_EQ(t.values.rows(), 7);
  for (Index i = 0; i < M.size(); ++i)
    EXPECT_EQ(std::signbit(t.values.data()[i]), std::signbit(M.data()[i]));
  EXPECT_EQ(t.values, M);
}

TEST(Csv, IntegersPrintWithoutDecimals) {
  const auto path = scratch("counts.csv");
  write_matrix_csv(path, (MatrixXd(2, 2) << 0, 3, 12, 1).finished(), "x");
  EXPECT_EQ(slurp(path), "x1,x2\n0,3\n12,1\n");
}

TEST(Csv, MalformedInput) {
  const auto path = scratch("bad.csv");
  std::ofstream(path) << "x1,x2\n1,2\n3\n";
  EXPECT_THROW(read_csv(path), IoError);
  std::ofstream(path) << "x1,x2\n1,abc\n";
  EXPECT_THROW(read_csv(path), IoError);
  EXPECT_THROW(read_csv(scratch("does_not_exist.csv")), IoError);
}

TEST(Csv, AcceptsCrlfAndHeaderOnly) {
  const auto path = scratch("crlf.csv");
  std::ofstream(path, std::ios::binary) << "x1,x2\r\n1.5,2\r\n";
  EXPECT_EQ(read_matrix_csv(path), (MatrixXd(1, 2) << 1.5, 2).finished());
  std::ofstream(path, std::ios::binary) << "x1,x2\n";
  EXPECT_EQ(read_matrix_csv(path).rows(), 0);
}

TEST(Json, ThetaRoundTripsForEveryFamily) {
  for (Family f : {Family::lds, Family::plds, Family::nonlin1d}) {
    const auto th = default_params(f, 2, 5, 3);
    const auto path = scratch("theta.json");
    save_theta(path, th);
    const auto back = load_theta(path);
    EXPECT_EQ(back.family, th.family);
    EXPECT_EQ(back.A, th.A);
    EXPECT_EQ(back.Q, th.Q);
    EXPECT_EQ(back.C, th.C);
    EXPECT_EQ(back.z1_cov, th.z1_cov);
    EXPECT_EQ(back.d, th.d);
    EXPECT_EQ(back.obs_var, th.obs_var);
    EXPECT_EQ(back.nonlin.b, th.nonlin.b);
  }
}

TEST(Json, InvalidThetaIsRejected) {
  json j = to_json(default_params(Family::lds, 2, 3, 0));
  j["Q"] = json::array({json::array({1.0, 0.0}), json::array({0.0, -1.0})});
  EXPECT_THROW(theta_from_json(j), InvalidParams);
  j.erase("A");
  EXPECT_THROW(theta_from_json(j), IoError);
}

TEST(Json, ModelFileRoundTripsBitExactly) {
  std::mt19937_64 rng(2);
  const MatrixXd x = random_matrix(30, 4, rng);
  for (PosteriorKind k : {PosteriorKind::mf, PosteriorKind::vildsblk, PosteriorKind::vildsmult}) {
    ModelFile m;
    m.theta = default_params(Family::plds, 2, 4, 1);
    m.config.kind = k;
    m.config.init.hidden_width = 7;
    m.config.init.depth = 3;
    m.config.seed = 12345678901234ULL;
    m.phi = init_posterior(k, x, m.config.init);
    const auto path = scratch("model.json");
    save_model(path, m);
    const auto back = load_model(path);
    EXPECT_EQ(kind_of(back.phi), k);
    EXPECT_EQ(flatten_posterior(back.phi), flatten_posterior(m.phi));
    EXPECT_EQ(alpha_of(back.phi), alpha_of(m.phi));
    EXPECT_EQ(back.theta.C, m.theta.C);
    EXPECT_EQ(back.config.seed, m.config.seed);
    EXPECT_EQ(back.config.init.hidden_width, 7);
    EXPECT_EQ(back.version, kVersion);
    // same moments after reload
    EXPECT_EQ(build_posterior(back.phi, x, false).mu, build_posterior(m.phi, x, false).mu);
    // writing again gives the same bytes
    const auto path2 = scratch("model2.json");
    save_model(path2, back);
    EXPECT_EQ(slurp(path), slurp(path2));
  }
}

TEST(Json, LayoutMismatchIsRejected) {
  json j = to_json(mlp_init(NetLayout({2, 3, 1}), 0));
  j["layout"] = std::vector<Index>{2, 4, 1};
  EXPECT_THROW(mlp_from_json(j), IoError);
}

TEST(Json, FitConfigRoundTrip) {
  FitConfig c;
  c.kind = PosteriorKind::mf;
  c.epochs = 17;
  c.learn_theta = false;
  c.base_lr = 0.3;
  const FitConfig back = fit_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
}
