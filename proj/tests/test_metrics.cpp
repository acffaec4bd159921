#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "doctest.h"
#include "evosam/metrics/metrics.hpp"
#include "evosam/numkit/tensor.hpp"
#include "support.hpp"

using namespace evosam;
using metrics::MDiceMatrix;

namespace {

Mask strip(int w, int h, std::initializer_list<int> on) {
  Mask m(w, h);
  for (int i : on) m.px[static_cast<std::size_t>(i)] = 1;
  return m;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// Literal transcription of the forgetting definition, as an independent check.
double forgetting_oracle(const std::vector<std::vector<double>>& r) {
  const std::size_t T = r.size();
  double outer = 0;
  for (std::size_t t = 1; t < T; ++t) {
    double inner = 0;
    for (std::size_t i = 0; i < t; ++i) inner += r[t - 1][i] - r[t][i];
    outer += inner / double(t);
  }
  return outer / double(T - 1);
}

}  // namespace

TEST_CASE("dice and iou") {
  const Mask a = strip(4, 2, {0, 1, 2, 3});
  const Mask b = strip(4, 2, {2, 3, 4, 5});
  CHECK(metrics::dice(a, a) == 1.0);
  CHECK(metrics::dice(a, strip(4, 2, {4, 5, 6, 7})) == 0.0);
  CHECK(metrics::dice(a, b) == doctest::Approx(0.5));
  CHECK(metrics::dice(b, a) == metrics::dice(a, b));
  CHECK(metrics::iou(a, b) == doctest::Approx(2.0 / 6.0));
  CHECK(metrics::dice(Mask(4, 2), Mask(4, 2)) == 1.0);
  CHECK(metrics::iou(Mask(4, 2), Mask(4, 2)) == 1.0);
  CHECK(metrics::dice(Mask(4, 2), a) == 0.0);
  CHECK_THROWS_AS(metrics::dice(a, Mask(2, 4)), nk::ShapeError);

  std::mt19937_64 rng(1);
  for (int i = 0; i < 50; ++i) {
    const Mask p = testsupport::random_mask(8, rng), g = testsupport::random_mask(8, rng);
    CHECK(metrics::dice(p, g) == metrics::dice(g, p));
    CHECK(metrics::dice(p, g) >= 0);
    CHECK(metrics::dice(p, g) <= 1);
  }
}

TEST_CASE("mdice") {
  const Mask a = strip(4, 2, {0, 1, 2, 3}), b = strip(4, 2, {2, 3, 4, 5});
  CHECK(metrics::mdice({b}, {a}) == metrics::dice(b, a));
  // dices 1.0 and 0.5 -> 0.75, in either order
  CHECK(metrics::mdice({a, b}, {a, a}) == doctest::Approx(0.75));
  CHECK(metrics::mdice({b, a}, {a, a}) == doctest::Approx(0.75));
  CHECK(metrics::mean({0.6, 0.8}) == doctest::Approx(0.7));
  CHECK_THROWS_AS(metrics::mdice({}, {}), std::invalid_argument);
  CHECK_THROWS_AS(metrics::mdice({a}, {a, b}), std::invalid_argument);
}

TEST_CASE("avg_mdice") {
  CHECK(metrics::avg_mdice(std::vector<double>{50, 70, 90}) == doctest::Approx(70));
  CHECK(metrics::avg_mdice(std::vector<double>{90, 50, 70}) == doctest::Approx(70));
  CHECK(metrics::avg_mdice(std::vector<double>{63.5}) == 63.5);
  const auto m = MDiceMatrix::from_rows({{80}, {70, 90}});
  CHECK_THROWS(metrics::avg_mdice(m, 1));
  CHECK(metrics::avg_mdice(m, 2) == doctest::Approx(80));
}

TEST_CASE("avg_forgetting") {
  const std::vector<std::vector<double>> rows = {{80}, {70, 90}, {60, 85, 95}};
  CHECK(metrics::avg_forgetting(MDiceMatrix::from_rows(rows)) == doctest::Approx(8.75));
  CHECK(forgetting_oracle(rows) == doctest::Approx(8.75));
  CHECK(metrics::avg_forgetting(MDiceMatrix::from_rows({{70, 70, 70}, {70, 70, 70}, {70, 70, 70}})) == 0.0);
  CHECK(metrics::avg_forgetting(MDiceMatrix::from_rows({{50}, {60, 70}, {65, 75, 80}})) < 0);
  CHECK_THROWS(metrics::avg_forgetting(MDiceMatrix::from_rows({{50}})));
  CHECK_THROWS(metrics::avg_forgetting(MDiceMatrix::from_rows({{80}, {}})));

  // Random lower-triangular matrices against the oracle; copying row t-1 into
  // row t zeroes that stage's term.
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 100);
  for (int trial = 0; trial < 30; ++trial) {
    const int T = 2 + trial % 4;
    std::vector<std::vector<double>> r(T);
    for (int t = 0; t < T; ++t)
      for (int i = 0; i < T; ++i) r[t].push_back(u(rng));
    CHECK(metrics::avg_forgetting(MDiceMatrix::from_rows(r)) == doctest::Approx(forgetting_oracle(r)).epsilon(1e-12));
    auto flat = r;
    const int t = 1 + trial % (T - 1);
    flat[t] = flat[t - 1];
    double expect = forgetting_oracle(r) * (T - 1);
    double term = 0;
    for (int i = 0; i < t; ++i) term += r[t - 1][i] - r[t][i];
    expect -= term / t;
    // Only stage t's own term vanishes; stage t+1 now compares against the copy.
    if (t + 1 < T) {
      double before = 0, after = 0;
      for (int i = 0; i <= t; ++i) {
        before += r[t][i] - r[t + 1][i];
        after += flat[t][i] - flat[t + 1][i];
      }
      expect += (after - before) / (t + 1);
    }
    CHECK(metrics::avg_forgetting(MDiceMatrix::from_rows(flat)) == doctest::Approx(expect / (T - 1)).epsilon(1e-9));
  }
}

TEST_CASE("matrix bookkeeping and csv round trip") {
  MDiceMatrix m(3);
  CHECK_FALSE(m.has(1, 1));
  CHECK(std::isnan(m.at(2, 3)));
  m.set(1, 1, 80);
  CHECK(m.has(1, 1));
  CHECK_THROWS(m.set(1, 2, 101));
  CHECK_THROWS(m.set(1, 2, -1));
  CHECK_THROWS(m.set(4, 1, 50));
  CHECK_THROWS(m.at(0, 1));
  m.set(1, 2, 12.3456789);
  m.set(1, 3, 0);
  CHECK(m.row_complete(1));
  CHECK_FALSE(m.row_complete(2));

  testsupport::TempDir dir("metrics");
  m.write_csv(dir.path / "m.csv");
  const auto back = MDiceMatrix::read_csv(dir.path / "m.csv");
  CHECK(back.tasks() == 3);
  CHECK(back.at(1, 2) == doctest::Approx(12.345679).epsilon(1e-9));
  CHECK_FALSE(back.has(3, 3));
  back.write_csv(dir.path / "m2.csv");
  CHECK(slurp(dir.path / "m.csv") == slurp(dir.path / "m2.csv"));
}

TEST_CASE("aggregation across sequences") {
  const auto ms = metrics::mean_std({70, 74});
  CHECK(ms.mean == doctest::Approx(72));
  CHECK(ms.std == doctest::Approx(std::sqrt(8.0)).epsilon(1e-9));
  CHECK(ms.std == doctest::Approx(2.828).epsilon(1e-3));
  CHECK(metrics::mean_std({5, 5, 5}).std == 0);
  CHECK_THROWS_AS(metrics::mean_std({1}), std::invalid_argument);

  const auto r1 = metrics::make_report("1-2", MDiceMatrix::from_rows({{80, 40}, {70, 90}}));
  const auto r2 = metrics::make_report("2-1", MDiceMatrix::from_rows({{60, 50}, {58, 66}}));
  CHECK(r1.avg_mdice == doctest::Approx(80));
  CHECK(r1.avg_forgetting == doctest::Approx(10));
  const auto a = metrics::aggregate_sequences({r1, r2});
  const auto b = metrics::aggregate_sequences({r2, r1});
  CHECK(a.sequences == 2);
  CHECK(a.avg_mdice.mean == doctest::Approx(71));
  CHECK(a.avg_forgetting.mean == doctest::Approx(6));
  CHECK(a.avg_mdice.mean == b.avg_mdice.mean);
  CHECK(a.avg_mdice.std == b.avg_mdice.std);
  CHECK_THROWS(metrics::aggregate_sequences({r1}));
}

TEST_CASE("curve and summary files") {
  testsupport::TempDir dir("metrics_out");
  // The third stage is incomplete and left out.
  metrics::write_curve_csv(MDiceMatrix::from_rows({{80, 40, 20}, {70, 90, 20}, {50}}), dir.path / "c.csv");
  CHECK(slurp(dir.path / "c.csv") == "stage,avg_mdice\n1,46.666667\n2,60.000000\n");
  metrics::write_summary_csv({{"evosam", {{72, 2.828427}, {0.5, 0.25}, 6}}}, dir.path / "s.csv");
  CHECK(slurp(dir.path / "s.csv") ==
        "method,avg_mdice_mean,avg_mdice_std,avg_forgetting_mean,avg_forgetting_std,sequences\n"
        "evosam,72.000000,2.828427,0.500000,0.250000,6\n");
}
