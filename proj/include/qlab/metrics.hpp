#pragma once

#include <span>
#include <string>
#include <utility>

namespace qlab {

double l2_norm(std::span<const float> x);
double l2_norm(std::span<const double> x);

// 20*log10(||w|| / ||dw||) in dB; +infinity when ||dw|| is exactly zero.
// Throws on length mismatch or zero signal norm.
double snr_db(std::span<const float> w, std::span<const float> dw);
double snr_db(std::span<const double> w, std::span<const double> dw);

// snr_db of the quantization error q_of_w - w.
double sqnr_db(std::span<const float> w, std::span<const float> q_of_w);
double sqnr_db(std::span<const double> w, std::span<const double> q_of_w);

// Canonical CSV rendering of a real value; infinities map to "inf"/"-inf".
std::string real_to_csv(double v);

struct PowerLawFit {
  double c = 0.0;  // multiplier
  double a = 0.0;  // exponent
  double rms_log_residual = 0.0;
};

// Least squares of log y = log c + a*log x. Requires >= 2 points with
// positive coordinates and at least two distinct x.
PowerLawFit fit_power_law(std::span<const std::pair<double, double>> points);

}  // namespace qlab
