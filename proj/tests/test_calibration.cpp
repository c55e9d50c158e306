#include <cmath>
#include <stdexcept>

#include "doctest.h"
#include "qlab/calibration.hpp"
#include "qlab/metrics.hpp"
#include "qlab/rng.hpp"

using namespace qlab;

namespace {

MatF gaussian_mat(std::size_t r, std::size_t c, std::uint64_t seed) {
  Rng rng(seed);
  MatF m(r, c);
  for (auto& v : m.a) v = static_cast<float>(rng.gaussian());
  return m;
}

double quant_mse(const MatF& w, const IntQuantizer& iq) {
  const MatF d = dequantize(quantize_int(w, iq));
  double s = 0.0;
  for (std::size_t i = 0; i < w.a.size(); ++i) {
    const double e = static_cast<double>(d.a[i]) - static_cast<double>(w.a[i]);
    s += e * e;
  }
  return s;
}

}  // namespace

TEST_SUITE("calibration") {

TEST_CASE("a tensor already on an integer grid calibrates losslessly") {
  const QuantFormat f = parse_format("int4_tens");
  MatF w(1, 15);
  for (int k = -7; k <= 7; ++k) w.a[static_cast<std::size_t>(k + 7)] = 0.5f * k;
  const IntQuantizer iq = calibrate(w, f);
  REQUIRE(iq.scales.size() == 1);
  CHECK(iq.scales[0] == 0.5f);  // t = 1.00 recovered
  CHECK(dequantize(quantize_int(w, iq)).a == w.a);
}

TEST_CASE("single-element granule picks the largest exact scale") {
  const QuantFormat f = parse_format("int4_tens");
  MatF w(1, 1);
  w.a = {5.0f};
  const IntQuantizer iq = calibrate(w, f);
  CHECK(iq.scales[0] == static_cast<float>(5.0 / 7.0));
  CHECK(dequantize(quantize_int(w, iq)).a == std::vector<float>{5.0f});
}

TEST_CASE("calibrated scale never loses to plain max-abs scaling") {
  const QuantFormat f = parse_format("int4_tens");
  const MatF w = gaussian_mat(64, 64, 31);
  const IntQuantizer cal = calibrate(w, f);

  double maxabs = 0.0;
  for (float v : w.a) maxabs = std::max(maxabs, std::abs(static_cast<double>(v)));
  IntQuantizer maxq;
  maxq.format = f;
  maxq.rows = w.rows;
  maxq.cols = w.cols;
  maxq.scales = {static_cast<float>(100.0 * maxabs / (100.0 * 7))};

  CHECK(quant_mse(w, cal) <= quant_mse(w, maxq));
}

TEST_CASE("granule counting for groups") {
  const MatF w = gaussian_mat(2, 64, 17);
  const IntQuantizer iq = calibrate(w, parse_format("int3_g32"));
  CHECK(iq.scales.size() == 4);
  const IntQuantizer chan = calibrate(w, parse_format("int3_chan"));
  CHECK(chan.scales.size() == 2);
  const IntQuantizer tens = calibrate(w, parse_format("int3_tens"));
  CHECK(tens.scales.size() == 1);
}

TEST_CASE("group size must divide the column count") {
  const MatF w = gaussian_mat(2, 60, 17);
  CHECK_THROWS_AS(calibrate(w, parse_format("int3_g32")), std::invalid_argument);
}

TEST_CASE("all-zero granules get scale one, zero codes, and a flag") {
  MatF w(2, 8);
  for (std::size_t c = 0; c < 8; ++c) w.at(0, c) = 0.25f * (c + 1);
  const IntQuantizer iq = calibrate(w, parse_format("int4_chan"));
  REQUIRE(iq.scales.size() == 2);
  CHECK(iq.scales[1] == 1.0f);
  CHECK(iq.zero_granules == std::vector<std::size_t>{1});
  const MatF d = dequantize(quantize_int(w, iq));
  for (std::size_t c = 0; c < 8; ++c) CHECK(d.at(1, c) == 0.0f);
}

TEST_CASE("negation keeps scales and negates the dequant") {
  const QuantFormat f = parse_format("int3_g16");
  const MatF w = gaussian_mat(4, 32, 77);
  MatF neg = w;
  for (auto& v : neg.a) v = -v;
  const IntQuantizer a = calibrate(w, f);
  const IntQuantizer b = calibrate(neg, f);
  CHECK(a.scales == b.scales);
  const MatF da = dequantize(quantize_int(w, a));
  const MatF db = dequantize(quantize_int(neg, b));
  for (std::size_t i = 0; i < da.a.size(); ++i) CHECK(db.a[i] == -da.a[i]);
}

TEST_CASE("codes clamp to the symmetric range") {
  const QuantFormat f = parse_format("int2_tens");  // qmax = 1
  MatF w(1, 3);
  w.a = {10.0f, -10.0f, 0.1f};
  IntQuantizer iq;
  iq.format = f;
  iq.rows = 1;
  iq.cols = 3;
  iq.scales = {1.0f};
  const MatF d = dequantize(quantize_int(w, iq));
  CHECK(d.a == std::vector<float>{1.0f, -1.0f, 0.0f});
}

TEST_CASE("quantize_int validates shapes") {
  const MatF w = gaussian_mat(2, 8, 1);
  IntQuantizer iq = calibrate(w, parse_format("int4_chan"));
  const MatF other = gaussian_mat(3, 8, 2);
  CHECK_THROWS_AS(quantize_int(other, iq), std::invalid_argument);
}

TEST_CASE("round_int_code halfway ties take the even grid index") {
  // qmax = 7: indices run 0..14, index parity matches odd values.
  CHECK(round_int_code(0.5, 7) == 1);
  CHECK(round_int_code(-0.5, 7) == -1);
  CHECK(round_int_code(1.5, 7) == 1);
  CHECK(round_int_code(2.5, 7) == 3);
  CHECK(round_int_code(7.5, 7) == 7);
  CHECK(round_int_code(-9.0, 7) == -7);
  CHECK(round_int_code(0.4999, 7) == 0);
}

}  // TEST_SUITE
