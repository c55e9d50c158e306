#pragma once

#include <cstddef>
#include <vector>

#include "qlab/formats.hpp"
#include "qlab/matrix.hpp"

namespace qlab {

// Symmetric integer quantizer with one calibrated positive scale per granule
// (whole tensor, row, or group of G columns within a row). No zero point.
struct IntQuantizer {
  QuantFormat format;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> scales;
  std::vector<std::size_t> zero_granules;  // all-zero granules, scale forced to 1
};

// Picks each granule's scale from {t * max|granule| / qmax : t = j/100,
// j = 1..100}, qmax = 2^(P-1)-1, minimizing the granule's squared
// quantization error; ties resolve toward larger t. All-zero granules get
// scale 1 and are listed in zero_granules.
IntQuantizer calibrate(const MatF& w, const QuantFormat& f);

// codes = clamp(round(w/s), -qmax, qmax) per granule; dequant = codes * s.
QuantizedTensor quantize_int(const MatF& w, const IntQuantizer& q);

// Rounds t to the integer grid [-qmax, qmax]; clamps outside, exact halfway
// cases resolve to the even grid index (index = value + qmax).
int round_int_code(double t, int qmax);

}  // namespace qlab
