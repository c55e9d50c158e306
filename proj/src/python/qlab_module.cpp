#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>
#include <string>
#include <vector>

#include "qlab/calibration.hpp"
#include "qlab/formats.hpp"
#include "qlab/gptq.hpp"
#include "qlab/landscape.hpp"
#include "qlab/manifest.hpp"
#include "qlab/metrics.hpp"
#include "qlab/predictor.hpp"
#include "qlab/toymodel.hpp"

namespace py = pybind11;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

qlab::MatF to_mat(const FloatArray& a) {
  if (a.ndim() != 2) throw std::invalid_argument("expected a 2-D float array");
  qlab::MatF m(static_cast<std::size_t>(a.shape(0)),
               static_cast<std::size_t>(a.shape(1)));
  std::memcpy(m.a.data(), a.data(), sizeof(float) * m.a.size());
  return m;
}

py::array_t<float> from_mat(const qlab::MatF& m) {
  py::array_t<float> out({m.rows, m.cols});
  std::memcpy(out.mutable_data(), m.a.data(), sizeof(float) * m.a.size());
  return out;
}

std::vector<std::uint8_t> to_bytes(const py::bytes& b) {
  const std::string s = b;
  return {s.begin(), s.end()};
}

py::list profile_rows(const qlab::RadialProfile& p) {
  py::list rows;
  for (const qlab::RadialSample& s : p.samples)
    rows.append(py::make_tuple(s.snr_db, s.lambda, s.nll));
  return rows;
}

py::dict report_dict(const qlab::LayerReport& r) {
  py::dict d;
  d["layer"] = r.layer;
  d["format"] = r.format;
  d["damp"] = r.damp;
  d["rtn_mse"] = r.rtn_mse;
  d["gptq_mse"] = r.gptq_mse;
  d["sqnr_rtn_db"] = r.sqnr_rtn_db;
  d["sqnr_gptq_db"] = r.sqnr_gptq_db;
  d["seconds"] = r.seconds;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Block-scaled quantization laboratory core";

  m.def("all36_formats", [] { return qlab::all36_formats(); },
        "The canonical 36-format roster");
  m.def("effective_bits", [](const std::string& name) {
    return qlab::effective_bits(qlab::parse_format(name));
  });
  m.def("element_grid", [](const std::string& name) {
    return qlab::element_grid(qlab::parse_format(name));
  });
  m.def("format_name", [](const std::string& name) {
    return qlab::format_name(qlab::parse_format(name));
  });

  m.def(
      "rtn_dequantize",
      [](const FloatArray& w, const std::string& fmt) {
        const qlab::QuantFormat f = qlab::parse_format(fmt);
        if (!qlab::is_mx(f))
          throw std::invalid_argument(
              "rtn_dequantize expects an MX format; use int_dequantize");
        return from_mat(qlab::dequantize(qlab::rtn_quantize(to_mat(w), f)));
      },
      py::arg("w"), py::arg("format"),
      "Round a weight matrix to the nearest MX grid and decode it back");

  m.def(
      "int_dequantize",
      [](const FloatArray& w, const std::string& fmt) {
        const qlab::QuantFormat f = qlab::parse_format(fmt);
        const qlab::MatF mat = to_mat(w);
        return from_mat(
            qlab::dequantize(qlab::quantize_int(mat, qlab::calibrate(mat, f))));
      },
      py::arg("w"), py::arg("format"),
      "Calibrate integer scales, quantize, and decode back");

  m.def(
      "sqnr_db",
      [](const FloatArray& w, const FloatArray& q) {
        if (w.size() != q.size())
          throw std::invalid_argument("arrays must have equal size");
        return qlab::sqnr_db(
            std::span<const float>(w.data(), static_cast<std::size_t>(w.size())),
            std::span<const float>(q.data(),
                                   static_cast<std::size_t>(q.size())));
      },
      py::arg("w"), py::arg("q"));

  py::class_<qlab::ToyCheckpoint>(m, "Checkpoint")
      .def_property_readonly("seed",
                             [](const qlab::ToyCheckpoint& c) { return c.seed; })
      .def_property_readonly(
          "steps", [](const qlab::ToyCheckpoint& c) { return c.steps; })
      .def_property_readonly(
          "train_nll", [](const qlab::ToyCheckpoint& c) { return c.train_nll; })
      .def_property_readonly(
          "valid_nll", [](const qlab::ToyCheckpoint& c) { return c.valid_nll; })
      .def_property_readonly("config",
                             [](const qlab::ToyCheckpoint& c) {
                               py::dict d;
                               d["vocab"] = c.config.vocab;
                               d["d_model"] = c.config.d_model;
                               d["n_layers"] = c.config.n_layers;
                               d["n_heads"] = c.config.n_heads;
                               d["ctx_len"] = c.config.ctx_len;
                               d["mlp_ratio"] = c.config.mlp_ratio;
                               return d;
                             })
      .def_property_readonly(
          "d_params",
          [](const qlab::ToyCheckpoint& c) {
            return qlab::quantizable_count(c.config);
          })
      .def("hash",
           [](const qlab::ToyCheckpoint& c) { return qlab::checkpoint_hash(c); })
      .def("save", [](const qlab::ToyCheckpoint& c, const std::string& dir) {
        qlab::save_checkpoint(c, dir);
      });

  m.def("load_checkpoint", &qlab::load_checkpoint, py::arg("dir"));

  m.def(
      "synthetic_corpus",
      [](std::size_t n, std::uint64_t seed) {
        const auto bytes = qlab::synthetic_corpus(n, seed);
        return py::bytes(reinterpret_cast<const char*>(bytes.data()),
                         bytes.size());
      },
      py::arg("n_bytes"), py::arg("seed"));

  m.def(
      "train",
      [](const py::bytes& corpus, const std::string& size, std::uint64_t seed,
         int steps, int batch_size, double lr) {
        qlab::TrainOptions opt;
        opt.steps = steps;
        opt.batch_size = batch_size;
        opt.lr = lr;
        return qlab::train(to_bytes(corpus), qlab::preset_config(size), opt,
                           seed);
      },
      py::arg("corpus"), py::arg("size"), py::arg("seed") = 1,
      py::arg("steps") = 2000, py::arg("batch_size") = 16,
      py::arg("lr") = 3e-3);

  m.def(
      "valid_nll",
      [](const qlab::ToyCheckpoint& ckpt, const py::bytes& corpus) {
        const auto bytes = to_bytes(corpus);
        return qlab::eval_nll(ckpt, qlab::dataset_for(ckpt, bytes),
                              qlab::Split::valid);
      },
      py::arg("checkpoint"), py::arg("corpus"));

  m.def(
      "gptq_quantize",
      [](const qlab::ToyCheckpoint& ckpt, const std::string& fmt,
         const py::bytes& corpus) {
        const auto bytes = to_bytes(corpus);
        const qlab::GptqModelResult res = qlab::gptq_model(
            ckpt, qlab::parse_format(fmt), qlab::dataset_for(ckpt, bytes));
        py::list reports;
        for (const qlab::LayerReport& r : res.reports)
          reports.append(report_dict(r));
        return py::make_tuple(res.quantized, reports);
      },
      py::arg("checkpoint"), py::arg("format"), py::arg("corpus"),
      "Run the second-order quantizer; returns (quantized, layer reports)");

  m.def(
      "random_profile",
      [](const qlab::ToyCheckpoint& ckpt, const py::bytes& corpus,
         std::uint64_t seed, const std::vector<double>& grid) {
        const auto bytes = to_bytes(corpus);
        const auto ds = qlab::dataset_for(ckpt, bytes);
        const auto dir =
            qlab::sample_direction(qlab::quantizable_count(ckpt.config), seed);
        return profile_rows(qlab::radial_profile(ckpt, ds, dir, grid));
      },
      py::arg("checkpoint"), py::arg("corpus"), py::arg("seed"),
      py::arg("grid"),
      "Validation NLL along a random unit direction; rows (snr_db, lambda, "
      "nll), base point first");

  m.def(
      "quantization_profile",
      [](const qlab::ToyCheckpoint& ckpt, const py::bytes& corpus,
         const std::string& fmt, const std::string& method,
         const std::vector<double>& grid) {
        const auto bytes = to_bytes(corpus);
        const auto ds = qlab::dataset_for(ckpt, bytes);
        qlab::DirectionKind kind;
        if (method == "rtn")
          kind = qlab::DirectionKind::rtn;
        else if (method == "gptq")
          kind = qlab::DirectionKind::gptq;
        else
          throw std::invalid_argument("method must be rtn or gptq");
        const qlab::QuantDirection qd = qlab::quantization_direction(
            ckpt, qlab::parse_format(fmt), kind, ds);
        return profile_rows(qlab::radial_profile(ckpt, ds, qd.direction, grid));
      },
      py::arg("checkpoint"), py::arg("corpus"), py::arg("format"),
      py::arg("method"), py::arg("grid"));

  m.def("features_csv_header", &qlab::features_csv_header);

  m.def(
      "fit_forest_csv",
      [](const std::string& csv, int n_estimators, int max_depth,
         bool bootstrap, std::uint64_t seed) {
        const auto records = qlab::parse_features_csv(csv);
        return qlab::forest_json(qlab::fit_forest(
            records, {n_estimators, max_depth, bootstrap}, seed));
      },
      py::arg("csv"), py::arg("n_estimators") = 120, py::arg("max_depth") = 8,
      py::arg("bootstrap") = true, py::arg("seed") = 0,
      "Fit the random forest on a feature CSV; returns the forest as JSON");

  m.def(
      "predict_csv",
      [](const std::string& forest_json_text, const std::string& csv) {
        const qlab::Forest forest = qlab::parse_forest_json(forest_json_text);
        std::vector<double> out;
        for (const qlab::FeatureRecord& r : qlab::parse_features_csv(csv))
          out.push_back(qlab::predict(forest, r));
        return out;
      },
      py::arg("forest_json"), py::arg("csv"));

  m.def(
      "importance",
      [](const std::string& forest_json_text) {
        const qlab::ImportanceReport rep =
            qlab::importance(qlab::parse_forest_json(forest_json_text));
        py::dict d;
        for (int i = 0; i < qlab::kNumFeatures; ++i)
          d[py::str(qlab::feature_names()[i])] =
              py::make_tuple(rep.mean[i], rep.stdev[i]);
        return d;
      },
      py::arg("forest_json"),
      "Per-feature (mean, across-tree std) impurity importance");
}
