#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "qlab/formats.hpp"
#include "qlab/matrix.hpp"
#include "qlab/toymodel.hpp"

namespace qlab {

// Second-moment matrix of a layer's calibration inputs, H = sum x x^T,
// accumulated in double precision.
struct LayerHessian {
  std::string layer_id;
  MatD h;  // cols x cols, symmetric positive semidefinite
  std::size_t n_samples = 0;
};

LayerHessian make_hessian(std::string layer_id, std::size_t cols);

// Adds x x^T for every row x of the batch.
void accumulate_hessian(LayerHessian& hess, const MatD& batch);

// Dampening multipliers searched per layer: 1e-3 through 1e4 by decades.
const std::vector<double>& default_damp_grid();

// Upper-triangular factor c with (h + lambda I)^{-1} = c^T c, where
// lambda = damp * mean(diag h).
struct DampFactor {
  double damp = 0.0;
  double lambda = 0.0;
  MatD c;
};

// Factors for every grid multiplier whose dampened matrix is positive
// definite; non-viable multipliers are skipped.
std::vector<DampFactor> factorize_damp_grid(const LayerHessian& hess,
                                            std::span<const double> grid);

struct GptqResult {
  QuantizedTensor quantized;
  double chosen_damp = 0.0;  // grid multiplier, or 0 when plain rounding won
  double rtn_mse = 0.0;      // calibration output MSE of plain rounding
  double gptq_mse = 0.0;     // calibration output MSE of the returned tensor
  double seconds = 0.0;
};

// Error-compensated column-by-column quantization of w onto the grid frozen
// by plain rounding (MX) or scale calibration (plain int). Every dampening
// factor is scored by the calibration output MSE ||(w - w_hat) X||^2 / n;
// uncompensated rounding is always scored as a fallback candidate. The
// minimum-MSE candidate wins; ties go to the larger dampening factor, and the
// fallback loses ties.
GptqResult gptq_layer(const MatF& w, const LayerHessian& hess,
                      const QuantFormat& format,
                      std::span<const double> damp_grid);
GptqResult gptq_layer(const MatF& w, const LayerHessian& hess,
                      const QuantFormat& format);

struct LayerReport {
  std::string layer;
  std::string format;
  double damp = 0.0;
  double rtn_mse = 0.0;
  double gptq_mse = 0.0;
  double sqnr_rtn_db = 0.0;
  double sqnr_gptq_db = 0.0;
  double seconds = 0.0;
};

// One-line JSON object with the fields above.
std::string report_json(const LayerReport& r);

struct GptqModelResult {
  ToyCheckpoint quantized;
  std::vector<LayerReport> reports;
};

// Per-checkpoint optimizer state: captures calibration second moments once
// and reuses the dampened factorizations across any number of formats.
class GptqSolver {
 public:
  GptqSolver(const ToyCheckpoint& ckpt, const TokenDataset& calib,
             std::size_t max_seqs = 128);
  GptqModelResult run(const QuantFormat& format);
  const std::vector<LayerHessian>& hessians() const { return hessians_; }

 private:
  const ToyCheckpoint* ckpt_;
  std::vector<LayerHessian> hessians_;        // aligned with quantizable_tensors
  std::vector<std::vector<DampFactor>> factors_;  // filled on first use
};

// Single-format convenience wrapper over GptqSolver.
GptqModelResult gptq_model(const ToyCheckpoint& ckpt, const QuantFormat& format,
                           const TokenDataset& calib);

}  // namespace qlab
