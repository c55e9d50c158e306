#include "qlab/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <stdexcept>
#include <vector>

namespace qlab {
namespace {

template <typename T>
double norm_impl(std::span<const T> x) {
  double s = 0.0;
  for (T v : x) {
    const double d = static_cast<double>(v);
    s += d * d;
  }
  return std::sqrt(s);
}

template <typename T>
double snr_impl(std::span<const T> w, std::span<const T> dw) {
  if (w.size() != dw.size())
    throw std::invalid_argument("snr_db: length mismatch");
  const double nw = norm_impl(w);
  if (nw == 0.0) throw std::invalid_argument("snr_db: zero signal norm");
  const double nd = norm_impl(dw);
  if (nd == 0.0) return std::numeric_limits<double>::infinity();
  return 20.0 * std::log10(nw / nd);
}

template <typename T>
double sqnr_impl(std::span<const T> w, std::span<const T> q) {
  if (w.size() != q.size())
    throw std::invalid_argument("sqnr_db: length mismatch");
  const double nw = norm_impl(w);
  if (nw == 0.0) throw std::invalid_argument("sqnr_db: zero signal norm");
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double d = static_cast<double>(q[i]) - static_cast<double>(w[i]);
    s += d * d;
  }
  if (s == 0.0) return std::numeric_limits<double>::infinity();
  return 20.0 * std::log10(nw / std::sqrt(s));
}

}  // namespace

double l2_norm(std::span<const float> x) { return norm_impl(x); }
double l2_norm(std::span<const double> x) { return norm_impl(x); }

double snr_db(std::span<const float> w, std::span<const float> dw) {
  return snr_impl(w, dw);
}
double snr_db(std::span<const double> w, std::span<const double> dw) {
  return snr_impl(w, dw);
}

double sqnr_db(std::span<const float> w, std::span<const float> q) {
  return sqnr_impl(w, q);
}
double sqnr_db(std::span<const double> w, std::span<const double> q) {
  return sqnr_impl(w, q);
}

std::string real_to_csv(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

PowerLawFit fit_power_law(std::span<const std::pair<double, double>> points) {
  if (points.size() < 2)
    throw std::invalid_argument("fit_power_law: need at least 2 points");
  std::vector<double> lx(points.size()), ly(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (points[i].first <= 0.0 || points[i].second <= 0.0)
      throw std::invalid_argument("fit_power_law: coordinates must be > 0");
    lx[i] = std::log(points[i].first);
    ly[i] = std::log(points[i].second);
  }
  const double n = static_cast<double>(points.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    mx += lx[i];
    my += ly[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    sxx += (lx[i] - mx) * (lx[i] - mx);
    sxy += (lx[i] - mx) * (ly[i] - my);
  }
  if (sxx == 0.0)
    throw std::invalid_argument("fit_power_law: x values must be distinct");
  PowerLawFit fit;
  fit.a = sxy / sxx;
  const double intercept = my - fit.a * mx;
  fit.c = std::exp(intercept);
  double rss = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    const double r = ly[i] - (intercept + fit.a * lx[i]);
    rss += r * r;
  }
  fit.rms_log_residual = std::sqrt(rss / n);
  return fit;
}

}  // namespace qlab
