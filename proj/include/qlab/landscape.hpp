#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "qlab/formats.hpp"
#include "qlab/toymodel.hpp"

namespace qlab {

enum class DirectionKind { random, rtn, gptq };

std::string direction_kind_name(DirectionKind k);

struct RadialSample {
  double snr_db = 0.0;  // +infinity on the unperturbed base point
  double lambda = 0.0;
  double nll = 0.0;
};

// NLL along w + lambda * direction, parameterized by SNR in dB with
// lambda = ||w|| * 10^(-snr/20). Samples are ordered by strictly decreasing
// snr (equivalently strictly increasing lambda) and include the lambda = 0
// base point.
struct RadialProfile {
  DirectionKind kind = DirectionKind::random;
  std::string format;  // empty for random directions
  std::uint64_t seed = 0;
  double base_nll = 0.0;
  std::vector<RadialSample> samples;
};

// I.i.d. standard normal vector normalized to unit length; deterministic
// per seed.
std::vector<double> sample_direction(std::size_t d, std::uint64_t seed);

// 60 dB down to 0 dB in 2 dB steps.
const std::vector<double>& default_snr_grid();

// Validation-split NLL at every grid point along the given unit direction.
RadialProfile radial_profile(const ToyCheckpoint& ckpt, const TokenDataset& ds,
                             std::span<const double> direction,
                             std::span<const double> snr_grid_db);

struct QuantDirection {
  std::vector<double> direction;  // unit vector toward the quantized weights
  double sqnr_db = 0.0;           // operating point of the quantization
};

// Direction from the checkpoint's weights toward a replacement of the
// quantizable set. Throws when the replacement is exact (infinite SQNR).
QuantDirection direction_to(const ToyCheckpoint& ckpt,
                            std::span<const double> w_hat);

// Direction of RTN or GPTQ quantization onto the format; calib feeds the
// GPTQ Hessians (its training split) and is unused for RTN.
QuantDirection quantization_direction(const ToyCheckpoint& ckpt,
                                      const QuantFormat& format,
                                      DirectionKind method,
                                      const TokenDataset& calib);

// Taylor approximation of the radial profile around lambda = 0: order 1 uses
// the directional derivative, order 2 adds one curvature product.
RadialProfile taylor_profile(const ToyCheckpoint& ckpt, const TokenDataset& ds,
                             std::span<const double> direction,
                             std::span<const double> snr_grid_db, int order);

// Central +/- 1 dB difference of NLL along a direction around the operating
// SNR: [nll(snr-1dB) - nll(snr+1dB)] / 2, in nats per dB. Nonnegative when
// loss grows as SNR drops.
double slope_from(const std::function<double(double)>& nll_of_lambda,
                  double w_norm, double snr_db);

// The slope feature at the RTN operating point of the format.
double slope_at_operating_point(const ToyCheckpoint& ckpt,
                                const TokenDataset& ds,
                                const QuantFormat& format);

// CSV serialization: kind,seed,format,snr_db,lambda,nll.
std::string profile_csv_header();
void append_profile_csv(std::string& out, const RadialProfile& p);
std::string profile_csv(std::span<const RadialProfile> profiles);

}  // namespace qlab
