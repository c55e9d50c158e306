#include "qlab/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <stdexcept>

#include "qlab/calibration.hpp"
#include "qlab/landscape.hpp"
#include "qlab/metrics.hpp"

namespace qlab {

namespace {

using ordered_json = nlohmann::ordered_json;

double elapsed(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
}

std::size_t granules_in(std::size_t rows, std::size_t cols,
                        const QuantFormat& f) {
  switch (f.granularity) {
    case IntGranularity::per_tensor: return 1;
    case IntGranularity::per_channel: return rows;
    case IntGranularity::per_group:
      if (f.group_size <= 0 ||
          cols % static_cast<std::size_t>(f.group_size) != 0)
        throw std::invalid_argument("group size must divide the column count");
      return rows * (cols / static_cast<std::size_t>(f.group_size));
  }
  throw std::invalid_argument("unknown granularity");
}

}  // namespace

double bits_per_weight(const ToyConfig& cfg, const QuantFormat& f) {
  if (is_mx(f)) return effective_bits(f);
  const std::size_t d = static_cast<std::size_t>(cfg.d_model);
  const std::size_t dm = d * static_cast<std::size_t>(cfg.mlp_ratio);
  std::size_t granules = 0;
  for (int l = 0; l < cfg.n_layers; ++l) {
    granules += 4 * granules_in(d, d, f);
    granules += granules_in(dm, d, f);
    granules += granules_in(d, dm, f);
  }
  const double dcount = static_cast<double>(quantizable_count(cfg));
  return (static_cast<double>(f.precision_bits) * dcount +
          32.0 * static_cast<double>(granules)) /
         dcount;
}

SweepEntry measure_rtn(const ToyCheckpoint& ckpt, const TokenDataset& ds,
                       const QuantFormat& format) {
  SweepEntry entry;
  entry.format = format_name(format);
  entry.method = is_mx(format) ? Method::rtn : Method::int_rtn;
  entry.bits_per_weight = bits_per_weight(ckpt.config, format);

  std::vector<double> w_hat;
  w_hat.reserve(quantizable_count(ckpt.config));
  for (const auto& [name, mat] : quantizable_tensors(ckpt)) {
    const QuantizedTensor q = is_mx(format)
                                  ? rtn_quantize(*mat, format)
                                  : quantize_int(*mat, calibrate(*mat, format));
    const MatF deq = dequantize(q);
    entry.layers.push_back(ordered_json{
        {"layer", name},
        {"sqnr_db", sqnr_db(std::span<const float>(mat->a),
                            std::span<const float>(deq.a))}});
    for (float v : deq.a) w_hat.push_back(static_cast<double>(v));
  }

  const std::vector<double> w0 = flatten_quantizable(ckpt);
  entry.sqnr_db =
      sqnr_db(std::span<const double>(w0), std::span<const double>(w_hat));
  entry.nll = eval_nll(apply_weights(ckpt, w_hat), ds, Split::valid);
  return entry;
}

SweepEntry measure_gptq(const ToyCheckpoint& ckpt, const TokenDataset& ds,
                        const QuantFormat& format, GptqSolver& solver,
                        double hessian_seconds) {
  SweepEntry entry;
  entry.format = format_name(format);
  entry.method = Method::gptq;
  entry.bits_per_weight = bits_per_weight(ckpt.config, format);
  entry.seconds.hessian = hessian_seconds;

  const GptqModelResult res = solver.run(format);
  for (const LayerReport& r : res.reports) {
    entry.layers.push_back(ordered_json::parse(report_json(r)));
    entry.seconds.gptq += r.seconds;
  }
  const std::vector<double> w0 = flatten_quantizable(ckpt);
  const std::vector<double> w_hat = flatten_quantizable(res.quantized);
  entry.sqnr_db =
      sqnr_db(std::span<const double>(w0), std::span<const double>(w_hat));
  entry.nll = eval_nll(res.quantized, ds, Split::valid);
  return entry;
}

FeatureMeasurement measure_feature_row(const std::string& model_id,
                                       const ToyCheckpoint& ckpt,
                                       const TokenDataset& ds,
                                       GptqSolver& solver,
                                       const QuantFormat& format,
                                       double nll_fp,
                                       double hessian_seconds) {
  FeatureMeasurement out;
  out.rtn = measure_rtn(ckpt, ds, format);

  const auto t0 = std::chrono::steady_clock::now();
  const double slope = slope_at_operating_point(ckpt, ds, format);
  out.rtn.seconds.landscape = elapsed(t0);

  out.gptq = measure_gptq(ckpt, ds, format, solver, hessian_seconds);

  FeatureRecord& rec = out.record;
  rec.model_id = model_id;
  rec.d_params = static_cast<std::int64_t>(quantizable_count(ckpt.config));
  rec.nll_fp = nll_fp;
  rec.sqnr_rtn_db = out.rtn.sqnr_db;
  rec.nll_rtn = out.rtn.nll;
  rec.slope_db = slope;
  rec.precision = format.precision_bits;
  rec.ebits = format.family == FormatFamily::mx_fp ? format.exp_bits : 0;
  rec.block = is_mx(format) ? format.block_size
              : format.granularity == IntGranularity::per_group
                  ? format.group_size
                  : 0;
  rec.nll_gptq = out.gptq.nll;
  return out;
}

ExperimentRecord to_record(const std::string& checkpoint_id,
                           const ToyCheckpoint& ckpt, double nll_fp,
                           const SweepEntry& entry) {
  ExperimentRecord r;
  r.timestamp = utc_timestamp();
  r.checkpoint_id = checkpoint_id;
  r.config_hash = checkpoint_hash(ckpt);
  r.d_params = static_cast<std::int64_t>(quantizable_count(ckpt.config));
  r.nll_fp = nll_fp;
  r.format = entry.format;
  r.method = entry.method;
  r.sqnr_db = entry.sqnr_db;
  r.nll = entry.nll;
  r.bits_per_weight = entry.bits_per_weight;
  r.layers = entry.layers;
  r.seconds = entry.seconds;
  return r;
}

std::vector<double> parse_grid_spec(const std::string& spec) {
  const auto bad = [&] {
    return std::invalid_argument("grid spec must be lo:hi:step, got: " + spec);
  };
  const std::size_t p1 = spec.find(':');
  const std::size_t p2 = spec.find(':', p1 == std::string::npos ? 0 : p1 + 1);
  if (p1 == std::string::npos || p2 == std::string::npos) throw bad();
  double lo = 0.0, hi = 0.0, step = 0.0;
  try {
    std::size_t used = 0;
    const std::string a = spec.substr(0, p1);
    const std::string b = spec.substr(p1 + 1, p2 - p1 - 1);
    const std::string c = spec.substr(p2 + 1);
    lo = std::stod(a, &used);
    if (used != a.size()) throw bad();
    hi = std::stod(b, &used);
    if (used != b.size()) throw bad();
    step = std::stod(c, &used);
    if (used != c.size()) throw bad();
  } catch (const std::invalid_argument&) {
    throw bad();
  } catch (const std::out_of_range&) {
    throw bad();
  }
  if (!std::isfinite(lo) || !std::isfinite(hi) || !std::isfinite(step) ||
      step <= 0.0 || lo > hi)
    throw bad();
  std::vector<double> out;
  for (int i = 0;; ++i) {
    const double v = lo + step * i;
    if (v > hi + 1e-9 * std::max(1.0, std::abs(hi))) break;
    out.push_back(std::min(v, hi));
  }
  return out;
}

}  // namespace qlab
