#include "qlab/landscape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "qlab/calibration.hpp"
#include "qlab/gptq.hpp"
#include "qlab/metrics.hpp"
#include "qlab/rng.hpp"

namespace qlab {
namespace {

double lambda_of_snr(double w_norm, double snr_db) {
  return w_norm * std::pow(10.0, -snr_db / 20.0);
}

// Grid values sorted by decreasing snr with exact duplicates removed.
std::vector<double> canonical_grid(std::span<const double> grid) {
  if (grid.empty()) throw std::invalid_argument("empty snr grid");
  for (double s : grid)
    if (!std::isfinite(s))
      throw std::invalid_argument("snr grid must be finite");
  std::vector<double> g(grid.begin(), grid.end());
  std::sort(g.begin(), g.end(), std::greater<>());
  g.erase(std::unique(g.begin(), g.end()), g.end());
  return g;
}

void check_direction(const ToyCheckpoint& ckpt,
                     std::span<const double> direction) {
  if (direction.size() != quantizable_count(ckpt.config))
    throw std::invalid_argument("direction length mismatch");
  const double n = l2_norm(direction);
  if (std::abs(n - 1.0) > 1e-6)
    throw std::invalid_argument("direction must have unit norm");
}

}  // namespace

std::string direction_kind_name(DirectionKind k) {
  switch (k) {
    case DirectionKind::random:
      return "random";
    case DirectionKind::rtn:
      return "rtn";
    case DirectionKind::gptq:
      return "gptq";
  }
  throw std::invalid_argument("bad direction kind");
}

std::vector<double> sample_direction(std::size_t d, std::uint64_t seed) {
  if (d == 0) throw std::invalid_argument("direction dimension must be >= 1");
  Rng rng(seed);
  std::vector<double> v(d);
  double norm2 = 0.0;
  do {
    norm2 = 0.0;
    for (auto& x : v) {
      x = rng.gaussian();
      norm2 += x * x;
    }
  } while (norm2 == 0.0);
  const double inv = 1.0 / std::sqrt(norm2);
  for (auto& x : v) x *= inv;
  return v;
}

const std::vector<double>& default_snr_grid() {
  static const std::vector<double> grid = [] {
    std::vector<double> g;
    for (int s = 60; s >= 0; s -= 2) g.push_back(static_cast<double>(s));
    return g;
  }();
  return grid;
}

RadialProfile radial_profile(const ToyCheckpoint& ckpt, const TokenDataset& ds,
                             std::span<const double> direction,
                             std::span<const double> snr_grid_db) {
  check_direction(ckpt, direction);
  const std::vector<double> grid = canonical_grid(snr_grid_db);

  const std::vector<double> w0 = flatten_quantizable(ckpt);
  const double w_norm = l2_norm(std::span<const double>(w0));

  RadialProfile p;
  p.base_nll = eval_nll(make_view(ckpt), ds, Split::valid);
  p.samples.push_back(
      {std::numeric_limits<double>::infinity(), 0.0, p.base_nll});

  std::vector<double> w(w0.size());
  for (double s : grid) {
    const double lam = lambda_of_snr(w_norm, s);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = w0[i] + lam * direction[i];
    const double nll = eval_nll(apply_weights(ckpt, w), ds, Split::valid);
    p.samples.push_back({s, lam, nll});
  }
  return p;
}

QuantDirection direction_to(const ToyCheckpoint& ckpt,
                            std::span<const double> w_hat) {
  const std::vector<double> w0 = flatten_quantizable(ckpt);
  if (w_hat.size() != w0.size())
    throw std::invalid_argument("replacement weight length mismatch");
  QuantDirection qd;
  qd.direction.resize(w0.size());
  double norm2 = 0.0;
  for (std::size_t i = 0; i < w0.size(); ++i) {
    qd.direction[i] = w_hat[i] - w0[i];
    norm2 += qd.direction[i] * qd.direction[i];
  }
  if (norm2 == 0.0)
    throw std::runtime_error(
        "quantization is exact along this format (SQNR inf); no direction");
  qd.sqnr_db = sqnr_db(std::span<const double>(w0), w_hat);
  const double inv = 1.0 / std::sqrt(norm2);
  for (auto& x : qd.direction) x *= inv;
  return qd;
}

QuantDirection quantization_direction(const ToyCheckpoint& ckpt,
                                      const QuantFormat& format,
                                      DirectionKind method,
                                      const TokenDataset& calib) {
  std::vector<double> w_hat;
  w_hat.reserve(quantizable_count(ckpt.config));
  if (method == DirectionKind::rtn) {
    for (const auto& [name, mat] : quantizable_tensors(ckpt)) {
      const MatF deq = is_mx(format)
                           ? dequantize(rtn_quantize(*mat, format))
                           : dequantize(quantize_int(*mat, calibrate(*mat, format)));
      for (float v : deq.a) w_hat.push_back(static_cast<double>(v));
    }
  } else if (method == DirectionKind::gptq) {
    const GptqModelResult res = gptq_model(ckpt, format, calib);
    w_hat = flatten_quantizable(res.quantized);
  } else {
    throw std::invalid_argument("quantization direction needs rtn or gptq");
  }
  return direction_to(ckpt, w_hat);
}

RadialProfile taylor_profile(const ToyCheckpoint& ckpt, const TokenDataset& ds,
                             std::span<const double> direction,
                             std::span<const double> snr_grid_db, int order) {
  if (order != 1 && order != 2)
    throw std::invalid_argument("taylor order must be 1 or 2");
  check_direction(ckpt, direction);
  const std::vector<double> grid = canonical_grid(snr_grid_db);

  const std::vector<double> w0 = flatten_quantizable(ckpt);
  const double w_norm = l2_norm(std::span<const double>(w0));
  const ModelView view = make_view(ckpt);

  const std::vector<double> g = grad_nll(view, ds, Split::valid);
  double g_dot = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) g_dot += g[i] * direction[i];

  double curvature = 0.0;
  if (order == 2) {
    const std::vector<double> hv = hvp(view, direction, ds, Split::valid);
    for (std::size_t i = 0; i < hv.size(); ++i)
      curvature += direction[i] * hv[i];
  }

  RadialProfile p;
  p.base_nll = eval_nll(view, ds, Split::valid);
  p.samples.push_back(
      {std::numeric_limits<double>::infinity(), 0.0, p.base_nll});
  for (double s : grid) {
    const double lam = lambda_of_snr(w_norm, s);
    double nll = p.base_nll + lam * g_dot;
    if (order == 2) nll += 0.5 * lam * lam * curvature;
    p.samples.push_back({s, lam, nll});
  }
  return p;
}

double slope_from(const std::function<double(double)>& nll_of_lambda,
                  double w_norm, double snr_db) {
  const double lam_low_snr = lambda_of_snr(w_norm, snr_db - 1.0);
  const double lam_high_snr = lambda_of_snr(w_norm, snr_db + 1.0);
  return (nll_of_lambda(lam_low_snr) - nll_of_lambda(lam_high_snr)) / 2.0;
}

double slope_at_operating_point(const ToyCheckpoint& ckpt,
                                const TokenDataset& ds,
                                const QuantFormat& format) {
  const QuantDirection qd =
      quantization_direction(ckpt, format, DirectionKind::rtn, ds);
  const std::vector<double> w0 = flatten_quantizable(ckpt);
  const double w_norm = l2_norm(std::span<const double>(w0));
  std::vector<double> w(w0.size());
  auto nll_of_lambda = [&](double lam) {
    for (std::size_t i = 0; i < w.size(); ++i)
      w[i] = w0[i] + lam * qd.direction[i];
    return eval_nll(apply_weights(ckpt, w), ds, Split::valid);
  };
  return slope_from(nll_of_lambda, w_norm, qd.sqnr_db);
}

std::string profile_csv_header() { return "kind,seed,format,snr_db,lambda,nll"; }

void append_profile_csv(std::string& out, const RadialProfile& p) {
  const std::string prefix =
      direction_kind_name(p.kind) + "," + std::to_string(p.seed) + "," +
      p.format + ",";
  for (const RadialSample& s : p.samples) {
    out += prefix;
    out += real_to_csv(s.snr_db);
    out += ',';
    out += real_to_csv(s.lambda);
    out += ',';
    out += real_to_csv(s.nll);
    out += '\n';
  }
}

std::string profile_csv(std::span<const RadialProfile> profiles) {
  std::string out = profile_csv_header();
  out += '\n';
  for (const RadialProfile& p : profiles) append_profile_csv(out, p);
  return out;
}

}  // namespace qlab
