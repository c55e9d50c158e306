#include "qlab/calibration.hpp"

#include <cmath>
#include <stdexcept>

namespace qlab {
namespace {

struct Granule {
  std::size_t r0, r1;  // row range [r0, r1)
  std::size_t c0, c1;  // column range [c0, c1)
};

std::vector<Granule> granules_of(const QuantFormat& f, std::size_t rows,
                                 std::size_t cols) {
  std::vector<Granule> g;
  switch (f.granularity) {
    case IntGranularity::per_tensor:
      g.push_back({0, rows, 0, cols});
      break;
    case IntGranularity::per_channel:
      for (std::size_t r = 0; r < rows; ++r) g.push_back({r, r + 1, 0, cols});
      break;
    case IntGranularity::per_group: {
      const std::size_t G = static_cast<std::size_t>(f.group_size);
      if (G == 0 || cols % G != 0)
        throw std::invalid_argument(
            "group size must divide the column count");
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; c += G)
          g.push_back({r, r + 1, c, c + G});
      break;
    }
  }
  return g;
}

double granule_maxabs(const MatF& w, const Granule& g) {
  double m = 0.0;
  for (std::size_t r = g.r0; r < g.r1; ++r)
    for (std::size_t c = g.c0; c < g.c1; ++c)
      m = std::max(m, std::abs(static_cast<double>(w.at(r, c))));
  return m;
}

double granule_mse(const MatF& w, const Granule& g, double s, int qmax) {
  double mse = 0.0;
  for (std::size_t r = g.r0; r < g.r1; ++r) {
    for (std::size_t c = g.c0; c < g.c1; ++c) {
      const double v = w.at(r, c);
      const double d = v - s * round_int_code(v / s, qmax);
      mse += d * d;
    }
  }
  return mse;
}

}  // namespace

int round_int_code(double t, int qmax) {
  if (t >= qmax) return qmax;
  if (t <= -qmax) return -qmax;
  const double fl = std::floor(t);
  const int k = static_cast<int>(fl);
  const double frac = t - fl;
  if (frac > 0.5) return k + 1;
  if (frac < 0.5) return k;
  return ((k + qmax) % 2 == 0) ? k : k + 1;
}

IntQuantizer calibrate(const MatF& w, const QuantFormat& f) {
  if (f.family != FormatFamily::plain_int)
    throw std::invalid_argument("calibrate expects a plain int format");
  if (w.rows == 0 || w.cols == 0)
    throw std::invalid_argument("calibrate on empty tensor");
  for (float v : w.a)
    if (!std::isfinite(v))
      throw std::invalid_argument("calibrate on non-finite input");

  const int qmax = (1 << (f.precision_bits - 1)) - 1;
  const std::vector<Granule> gs = granules_of(f, w.rows, w.cols);

  IntQuantizer q;
  q.format = f;
  q.rows = w.rows;
  q.cols = w.cols;
  q.scales.reserve(gs.size());
  for (std::size_t gi = 0; gi < gs.size(); ++gi) {
    const double maxabs = granule_maxabs(w, gs[gi]);
    if (maxabs == 0.0) {
      q.scales.push_back(1.0f);
      q.zero_granules.push_back(gi);
      continue;
    }
    float best_s = 0.0f;
    double best_mse = 0.0;
    bool have = false;
    for (int j = 1; j <= 100; ++j) {
      // Evaluate the candidate at its float32-stored value so the chosen
      // scale realizes exactly the error this loop measured.
      const float s = static_cast<float>((static_cast<double>(j) * maxabs) /
                                         (100.0 * qmax));
      const double mse = granule_mse(w, gs[gi], s, qmax);
      if (!have || mse <= best_mse) {
        best_s = s;
        best_mse = mse;
        have = true;
      }
    }
    q.scales.push_back(best_s);
  }
  return q;
}

QuantizedTensor quantize_int(const MatF& w, const IntQuantizer& iq) {
  if (w.rows != iq.rows || w.cols != iq.cols)
    throw std::invalid_argument("quantize_int: shape mismatch");
  const int qmax = (1 << (iq.format.precision_bits - 1)) - 1;
  const std::vector<Granule> gs = granules_of(iq.format, w.rows, w.cols);
  if (gs.size() != iq.scales.size())
    throw std::invalid_argument("quantize_int: scale count mismatch");

  QuantizedTensor q;
  q.format = iq.format;
  q.rows = w.rows;
  q.cols = w.cols;
  q.scales = iq.scales;
  q.codes.assign(w.rows * w.cols, static_cast<std::uint8_t>(qmax));
  for (std::size_t gi = 0; gi < gs.size(); ++gi) {
    const Granule& g = gs[gi];
    const double s = iq.scales[gi];
    for (std::size_t r = g.r0; r < g.r1; ++r) {
      for (std::size_t c = g.c0; c < g.c1; ++c) {
        const int code = round_int_code(w.at(r, c) / s, qmax);
        q.codes[r * w.cols + c] = static_cast<std::uint8_t>(code + qmax);
      }
    }
  }
  return q;
}

}  // namespace qlab
