#pragma once

#include <string>
#include <vector>

#include "qlab/formats.hpp"
#include "qlab/gptq.hpp"
#include "qlab/predictor.hpp"
#include "qlab/store.hpp"
#include "qlab/toymodel.hpp"

namespace qlab {

// Stored bits per weight across the quantizable set: P + 8/K for MX formats,
// (P*D + 32*granules)/D for calibrated-int formats (float scales cost 32).
double bits_per_weight(const ToyConfig& cfg, const QuantFormat& f);

// One (format, method) measurement on a checkpoint, ready to become an
// ExperimentRecord or a feature-table column.
struct SweepEntry {
  std::string format;
  Method method = Method::rtn;
  double sqnr_db = 0.0;
  double nll = 0.0;
  double bits_per_weight = 0.0;
  nlohmann::ordered_json layers = nlohmann::ordered_json::array();
  PhaseSeconds seconds;
};

// Round-to-nearest over every quantizable tensor; the method comes out as
// rtn for MX formats and int_rtn for calibrated-int formats.
SweepEntry measure_rtn(const ToyCheckpoint& ckpt, const TokenDataset& ds,
                       const QuantFormat& format);

SweepEntry measure_gptq(const ToyCheckpoint& ckpt, const TokenDataset& ds,
                        const QuantFormat& format, GptqSolver& solver,
                        double hessian_seconds = 0.0);

struct FeatureMeasurement {
  FeatureRecord record;
  SweepEntry rtn;
  SweepEntry gptq;
};

// Full feature-table row: RTN quantization, the landscape slope at the RTN
// operating point, and the GPTQ target. nll_fp is the caller-computed
// validation NLL of the unquantized checkpoint.
FeatureMeasurement measure_feature_row(const std::string& model_id,
                                       const ToyCheckpoint& ckpt,
                                       const TokenDataset& ds,
                                       GptqSolver& solver,
                                       const QuantFormat& format,
                                       double nll_fp,
                                       double hessian_seconds = 0.0);

ExperimentRecord to_record(const std::string& checkpoint_id,
                           const ToyCheckpoint& ckpt, double nll_fp,
                           const SweepEntry& entry);

// "lo:hi:step" -> ascending SNR values lo, lo+step, ..., <= hi.
std::vector<double> parse_grid_spec(const std::string& spec);

}  // namespace qlab
