#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "qlab/metrics.hpp"
#include "qlab/rng.hpp"

using namespace qlab;

TEST_SUITE("metrics") {

TEST_CASE("equal norms give zero dB") {
  const std::vector<double> w = {1.0, -2.0, 3.0};
  CHECK(snr_db(std::span<const double>(w), std::span<const double>(w)) == 0.0);
}

TEST_CASE("a tenth of the norm gives exactly 20 dB") {
  const std::vector<double> w = {10.0};
  const std::vector<double> dw = {1.0};
  CHECK(snr_db(std::span<const double>(w), std::span<const double>(dw)) == 20.0);
}

TEST_CASE("hand-checked quantization error block") {
  const std::vector<float> w = {0.3f, -0.7f, 1.1f, 2.0f};
  const std::vector<float> dw = {-0.3f, -0.3f, -0.1f, 0.0f};
  CHECK(snr_db(std::span<const float>(w), std::span<const float>(dw)) ==
        doctest::Approx(14.8394).epsilon(1e-4));
}

TEST_CASE("zero perturbation returns the infinity sentinel") {
  const std::vector<double> w = {1.0, 2.0};
  const std::vector<double> z = {0.0, 0.0};
  CHECK(std::isinf(snr_db(std::span<const double>(w), std::span<const double>(z))));
  CHECK(std::isinf(sqnr_db(std::span<const double>(w), std::span<const double>(w))));
}

TEST_CASE("errors on bad input") {
  const std::vector<double> w = {1.0, 2.0};
  const std::vector<double> short_dw = {1.0};
  const std::vector<double> zero = {0.0, 0.0};
  CHECK_THROWS_AS(snr_db(std::span<const double>(w), std::span<const double>(short_dw)),
                  std::invalid_argument);
  CHECK_THROWS_AS(snr_db(std::span<const double>(zero), std::span<const double>(w)),
                  std::invalid_argument);
}

TEST_CASE("power-of-two scaling leaves the ratio untouched bitwise") {
  Rng rng(5);
  std::vector<float> w(256), dw(256), w2(256), dw2(256);
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] = static_cast<float>(rng.gaussian());
    dw[i] = static_cast<float>(0.01 * rng.gaussian());
    w2[i] = 4.0f * w[i];
    dw2[i] = 4.0f * dw[i];
  }
  CHECK(snr_db(std::span<const float>(w), std::span<const float>(dw)) ==
        snr_db(std::span<const float>(w2), std::span<const float>(dw2)));
}

TEST_CASE("swapping arguments flips the sign") {
  Rng rng(6);
  std::vector<double> w(64), dw(64);
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] = rng.gaussian();
    dw[i] = 0.1 * rng.gaussian();
  }
  const double ab = snr_db(std::span<const double>(w), std::span<const double>(dw));
  const double ba = snr_db(std::span<const double>(dw), std::span<const double>(w));
  CHECK(ab == doctest::Approx(-ba).epsilon(1e-12));
}

TEST_CASE("halving the error norm adds 6.02 dB") {
  const std::vector<double> w = {3.0, 4.0};
  const std::vector<double> dw = {0.6, 0.8};
  const std::vector<double> half = {0.3, 0.4};
  const double a = snr_db(std::span<const double>(w), std::span<const double>(dw));
  const double b = snr_db(std::span<const double>(w), std::span<const double>(half));
  CHECK(b - a == doctest::Approx(20.0 * std::log10(2.0)).epsilon(1e-12));
}

TEST_CASE("csv rendering uses the inf sentinel") {
  CHECK(real_to_csv(std::numeric_limits<double>::infinity()) == "inf");
  CHECK(real_to_csv(-std::numeric_limits<double>::infinity()) == "-inf");
  CHECK(real_to_csv(1.5) == "1.5");
  CHECK(real_to_csv(0.0) == "0");
}

TEST_CASE("power law fit recovers exact data") {
  std::vector<std::pair<double, double>> pts;
  for (double x : {1.0, 4.0, 9.0, 25.0})
    pts.emplace_back(x, 3.0 * std::sqrt(x));
  const PowerLawFit fit = fit_power_law(pts);
  CHECK(fit.a == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(fit.c == doctest::Approx(3.0).epsilon(1e-9));
  CHECK(fit.rms_log_residual < 1e-12);
}

TEST_CASE("two points interpolate with zero residual") {
  const std::vector<std::pair<double, double>> pts = {{2.0, 5.0}, {8.0, 11.0}};
  CHECK(fit_power_law(pts).rms_log_residual < 1e-12);
}

TEST_CASE("power law fit input validation") {
  const std::vector<std::pair<double, double>> one = {{1.0, 1.0}};
  CHECK_THROWS_AS(fit_power_law(one), std::invalid_argument);
  const std::vector<std::pair<double, double>> neg = {{1.0, 1.0}, {2.0, -1.0}};
  CHECK_THROWS_AS(fit_power_law(neg), std::invalid_argument);
  const std::vector<std::pair<double, double>> same_x = {{2.0, 1.0}, {2.0, 3.0}};
  CHECK_THROWS_AS(fit_power_law(same_x), std::invalid_argument);
}

}  // TEST_SUITE
