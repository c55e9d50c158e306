#include "qlab/gptq.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>
#include <utility>

#include "json.hpp"
#include "qlab/calibration.hpp"
#include "qlab/metrics.hpp"

namespace qlab {
namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                           Eigen::RowMajor>;

// Frozen quantization grid for one weight matrix: the plain-rounding result
// fixes the block scale codes (MX) or the calibrated granule scales (int);
// column passes quantize every working value back onto exactly this grid.
struct FrozenGrid {
  QuantizedTensor base;      // plain rounding of the original weights
  std::vector<double> grid;  // MX element values, ascending
  int qmax = 0;              // plain int code bound
  std::size_t group_cols = 0;  // granule width for scale lookup
};

FrozenGrid freeze_grid(const MatF& w, const QuantFormat& f) {
  FrozenGrid fg;
  if (is_mx(f)) {
    fg.base = rtn_quantize(w, f);
    fg.grid = element_grid(f);
    return fg;
  }
  const IntQuantizer iq = calibrate(w, f);
  fg.base = quantize_int(w, iq);
  fg.qmax = (1 << (f.precision_bits - 1)) - 1;
  switch (f.granularity) {
    case IntGranularity::per_tensor:
      fg.group_cols = w.cols;
      break;
    case IntGranularity::per_channel:
      fg.group_cols = w.cols;
      break;
    case IntGranularity::per_group:
      fg.group_cols = static_cast<std::size_t>(f.group_size);
      break;
  }
  return fg;
}

// Quantizes one working value at (r, j) onto the frozen grid; returns the
// dequantized value and stores the code.
double quantize_at(const FrozenGrid& fg, std::size_t r, std::size_t j,
                   double t, std::uint8_t* code) {
  const QuantizedTensor& q = fg.base;
  if (is_mx(q.format)) {
    const std::size_t K = static_cast<std::size_t>(q.format.block_size);
    const std::size_t b = j / K;
    const int e =
        static_cast<int>(q.scale_codes[r * q.blocks_per_row() + b]) - 127;
    const int idx = nearest_grid_index(fg.grid, std::ldexp(t, -e));
    *code = static_cast<std::uint8_t>(idx);
    return std::ldexp(fg.grid[static_cast<std::size_t>(idx)], e);
  }
  std::size_t granule = 0;
  if (q.format.granularity == IntGranularity::per_channel) {
    granule = r;
  } else if (q.format.granularity == IntGranularity::per_group) {
    granule = r * (q.cols / fg.group_cols) + j / fg.group_cols;
  }
  const double s = q.scales[granule];
  const int c = round_int_code(t / s, fg.qmax);
  *code = static_cast<std::uint8_t>(c + fg.qmax);
  return s * c;
}

// ||(w - w_hat) X||^2 / n computed as sum_rows v H v^T / n over the error
// rows v; used for the plain-rounding fallback.
double direct_score(const MatD& w_orig, const MatF& deq, const MatD& h,
                    std::size_t n) {
  const std::size_t c = w_orig.cols;
  std::vector<double> v(c);
  double s = 0.0;
  for (std::size_t r = 0; r < w_orig.rows; ++r) {
    const double* wr = w_orig.row(r);
    const float* dr = deq.row(r);
    for (std::size_t j = 0; j < c; ++j)
      v[j] = wr[j] - static_cast<double>(dr[j]);
    for (std::size_t i = 0; i < c; ++i)
      s += v[i] * dot_d(h.row(i), v.data(), c);
  }
  return s / static_cast<double>(n);
}

struct Candidate {
  std::vector<std::uint8_t> codes;
  double mse = 0.0;
  double damp = 0.0;
};

// One compensated pass at a fixed dampening. With c the upper factor of the
// dampened inverse, the final error satisfies w - w_hat = E c exactly, so
// ||(w - w_hat) X||^2 = sum E^2 - lambda ||w - w_hat||^2 without forming the
// residual product.
Candidate run_pass(const MatD& w_orig, const FrozenGrid& fg,
                   const DampFactor& df, std::size_t n) {
  const std::size_t rows = w_orig.rows;
  const std::size_t cols = w_orig.cols;
  MatD work = w_orig;
  Candidate cand;
  cand.damp = df.damp;
  cand.codes.resize(rows * cols);
  std::vector<double> err(rows);
  double sum_e2 = 0.0, sum_dq2 = 0.0;
  for (std::size_t j = 0; j < cols; ++j) {
    const double cjj = df.c.at(j, j);
    for (std::size_t r = 0; r < rows; ++r) {
      const double t = work.at(r, j);
      const double q = quantize_at(fg, r, j, t, &cand.codes[r * cols + j]);
      const double e = (t - q) / cjj;
      err[r] = e;
      sum_e2 += e * e;
      const double dq = w_orig.at(r, j) - q;
      sum_dq2 += dq * dq;
    }
    if (j + 1 == cols) break;
    const double* crow = df.c.row(j);
    for (std::size_t r = 0; r < rows; ++r) {
      double* wr = work.row(r);
      const double f = err[r];
      for (std::size_t k = j + 1; k < cols; ++k) wr[k] -= f * crow[k];
    }
  }
  cand.mse =
      std::max(0.0, (sum_e2 - df.lambda * sum_dq2) / static_cast<double>(n));
  return cand;
}

GptqResult gptq_core(const MatF& w, const LayerHessian& hess,
                     std::span<const DampFactor> factors,
                     const QuantFormat& format, MatF* rtn_deq_out) {
  const auto t0 = std::chrono::steady_clock::now();
  if (hess.h.rows != w.cols || hess.h.cols != w.cols)
    throw std::invalid_argument("hessian size does not match layer columns");
  if (hess.n_samples == 0)
    throw std::invalid_argument("hessian has no accumulated samples");
  if (factors.empty())
    throw std::runtime_error("calibration hessian for layer " + hess.layer_id +
                             " is not positive definite at any dampening");

  const FrozenGrid fg = freeze_grid(w, format);
  const MatD w_orig = to_double(w);
  MatF rtn_deq = dequantize(fg.base);
  const double rtn_mse = direct_score(w_orig, rtn_deq, hess.h, hess.n_samples);
  if (rtn_deq_out) *rtn_deq_out = std::move(rtn_deq);

  Candidate best;
  bool have = false;
  for (const DampFactor& df : factors) {
    Candidate cand = run_pass(w_orig, fg, df, hess.n_samples);
    if (!have || cand.mse <= best.mse) {
      best = std::move(cand);
      have = true;
    }
  }

  GptqResult res;
  res.rtn_mse = rtn_mse;
  res.quantized = fg.base;
  if (rtn_mse < best.mse) {
    res.chosen_damp = 0.0;
    res.gptq_mse = rtn_mse;
  } else {
    res.chosen_damp = best.damp;
    res.gptq_mse = best.mse;
    res.quantized.codes = std::move(best.codes);
  }
  res.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  return res;
}

LayerReport make_report(const MatF& w, const GptqResult& res,
                        const MatF& rtn_deq, const std::string& layer_name) {
  LayerReport rep;
  rep.layer = layer_name;
  rep.format = format_name(res.quantized.format);
  rep.damp = res.chosen_damp;
  rep.rtn_mse = res.rtn_mse;
  rep.gptq_mse = res.gptq_mse;
  rep.sqnr_rtn_db = sqnr_db(std::span<const float>(w.a),
                            std::span<const float>(rtn_deq.a));
  const MatF deq = dequantize(res.quantized);
  rep.sqnr_gptq_db =
      sqnr_db(std::span<const float>(w.a), std::span<const float>(deq.a));
  rep.seconds = res.seconds;
  return rep;
}

}  // namespace

LayerHessian make_hessian(std::string layer_id, std::size_t cols) {
  if (cols == 0) throw std::invalid_argument("hessian needs positive size");
  LayerHessian h;
  h.layer_id = std::move(layer_id);
  h.h = MatD(cols, cols);
  return h;
}

void accumulate_hessian(LayerHessian& hess, const MatD& batch) {
  if (batch.rows == 0) throw std::invalid_argument("empty calibration batch");
  if (batch.cols != hess.h.cols)
    throw std::invalid_argument("calibration batch width mismatch");
  addmul_tn(hess.h, batch, batch);
  hess.n_samples += batch.rows;
}

const std::vector<double>& default_damp_grid() {
  static const std::vector<double> grid = {1e-3, 1e-2, 1e-1, 1.0,
                                           1e1,  1e2,  1e3,  1e4};
  return grid;
}

std::vector<DampFactor> factorize_damp_grid(const LayerHessian& hess,
                                            std::span<const double> grid) {
  const std::size_t c = hess.h.cols;
  double mean_diag = 0.0;
  for (std::size_t i = 0; i < c; ++i) mean_diag += hess.h.at(i, i);
  mean_diag /= static_cast<double>(c);

  Eigen::Map<const EMat> h(hess.h.a.data(), static_cast<Eigen::Index>(c),
                           static_cast<Eigen::Index>(c));
  std::vector<DampFactor> out;
  for (double damp : grid) {
    const double lambda = damp * mean_diag;
    EMat ha = h;
    ha.diagonal().array() += lambda;
    Eigen::LLT<EMat> llt(ha);
    if (llt.info() != Eigen::Success) continue;
    EMat hinv = llt.solve(EMat::Identity(static_cast<Eigen::Index>(c),
                                         static_cast<Eigen::Index>(c)));
    Eigen::LLT<EMat> llt_inv(hinv);
    if (llt_inv.info() != Eigen::Success) continue;
    const EMat u = llt_inv.matrixL().transpose();
    DampFactor df;
    df.damp = damp;
    df.lambda = lambda;
    df.c = MatD(c, c);
    for (std::size_t i = 0; i < c; ++i)
      for (std::size_t j = 0; j < c; ++j)
        df.c.at(i, j) = u(static_cast<Eigen::Index>(i),
                          static_cast<Eigen::Index>(j));
    out.push_back(std::move(df));
  }
  return out;
}

GptqResult gptq_layer(const MatF& w, const LayerHessian& hess,
                      const QuantFormat& format,
                      std::span<const double> damp_grid) {
  if (damp_grid.empty()) throw std::invalid_argument("empty dampening grid");
  const std::vector<DampFactor> factors = factorize_damp_grid(hess, damp_grid);
  return gptq_core(w, hess, factors, format, nullptr);
}

GptqResult gptq_layer(const MatF& w, const LayerHessian& hess,
                      const QuantFormat& format) {
  return gptq_layer(w, hess, format, default_damp_grid());
}

std::string report_json(const LayerReport& r) {
  nlohmann::ordered_json j;
  j["layer"] = r.layer;
  j["format"] = r.format;
  j["damp"] = r.damp;
  j["rtn_mse"] = r.rtn_mse;
  j["gptq_mse"] = r.gptq_mse;
  j["sqnr_rtn_db"] = r.sqnr_rtn_db;
  j["sqnr_gptq_db"] = r.sqnr_gptq_db;
  j["seconds"] = r.seconds;
  return j.dump();
}

GptqSolver::GptqSolver(const ToyCheckpoint& ckpt, const TokenDataset& calib,
                       std::size_t max_seqs)
    : ckpt_(&ckpt) {
  CalibCapture cap = capture_second_moments(ckpt, calib, max_seqs);
  const auto tensors = quantizable_tensors(ckpt);
  hessians_.reserve(tensors.size());
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    LayerHessian h;
    h.layer_id = tensors[i].first;
    h.h = std::move(cap.second_moments[i]);
    h.n_samples = cap.n_samples;
    hessians_.push_back(std::move(h));
  }
  factors_.resize(hessians_.size());
}

GptqModelResult GptqSolver::run(const QuantFormat& format) {
  const auto tensors = quantizable_tensors(*ckpt_);
  std::vector<double> flat;
  flat.reserve(quantizable_count(ckpt_->config));
  GptqModelResult out;
  out.reports.reserve(tensors.size());
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (factors_[i].empty())
      factors_[i] = factorize_damp_grid(hessians_[i], default_damp_grid());
    const MatF& w = *tensors[i].second;
    MatF rtn_deq;
    const GptqResult res =
        gptq_core(w, hessians_[i], factors_[i], format, &rtn_deq);
    out.reports.push_back(make_report(w, res, rtn_deq, tensors[i].first));
    const MatF deq = dequantize(res.quantized);
    for (float v : deq.a) flat.push_back(static_cast<double>(v));
  }
  out.quantized = materialize(apply_weights(*ckpt_, flat));
  return out;
}

GptqModelResult gptq_model(const ToyCheckpoint& ckpt, const QuantFormat& format,
                           const TokenDataset& calib) {
  GptqSolver solver(ckpt, calib);
  return solver.run(format);
}

}  // namespace qlab
