#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "qlab/landscape.hpp"
#include "qlab/manifest.hpp"
#include "qlab/metrics.hpp"
#include "qlab/pipeline.hpp"
#include "qlab/predictor.hpp"
#include "qlab/store.hpp"

namespace {

using qlab::ExperimentRecord;
using qlab::FeatureRecord;
using qlab::QuantFormat;
using qlab::TokenDataset;
using qlab::ToyCheckpoint;
using ordered_json = nlohmann::ordered_json;

double elapsed(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
}

std::vector<std::uint8_t> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open corpus file: " + path);
  std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in),
                                  std::istreambuf_iterator<char>()};
  return bytes;
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write file: " + path);
  out << content;
  out.flush();
  if (!out) throw std::runtime_error("failed writing file: " + path);
}

void emit_csv(const std::string& out_path, const std::string& csv,
              const char* kind, std::size_t rows) {
  if (out_path.empty()) {
    std::cout << csv;
    return;
  }
  write_text(out_path, csv);
  ordered_json j;
  j["kind"] = kind;
  j["out"] = out_path;
  j["rows"] = rows;
  std::cout << j.dump() << "\n";
}

std::string checkpoint_id_of(const std::string& dir) {
  std::filesystem::path p(dir);
  if (p.filename().empty()) p = p.parent_path();
  const std::string id = p.filename().string();
  return id.empty() ? std::string("checkpoint") : id;
}

struct LoadedCheckpoint {
  std::string id;
  ToyCheckpoint ckpt;
  TokenDataset ds;
};

LoadedCheckpoint load_with_corpus(const std::string& dir,
                                  const std::string& corpus_override) {
  LoadedCheckpoint lc;
  lc.id = checkpoint_id_of(dir);
  lc.ckpt = qlab::load_checkpoint(dir);
  const std::string corpus_path =
      corpus_override.empty() ? (std::filesystem::path(dir) / "corpus.bin").string()
                              : corpus_override;
  const auto corpus = read_bytes(corpus_path);
  lc.ds = qlab::dataset_for(lc.ckpt, corpus);
  return lc;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const std::size_t pos = s.find(',', start);
    if (pos == std::string::npos) {
      if (start < s.size()) out.push_back(s.substr(start));
      break;
    }
    if (pos > start) out.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

std::vector<QuantFormat> resolve_formats(const std::string& formats_flag,
                                         const std::string& manifest_path) {
  std::vector<std::string> names;
  if (formats_flag.empty() || formats_flag == "all36")
    names = manifest_path.empty() ? qlab::all36_formats()
                                  : qlab::load_format_manifest(manifest_path);
  else
    names = split_list(formats_flag);
  if (names.empty()) throw std::invalid_argument("no formats selected");
  std::vector<QuantFormat> out;
  out.reserve(names.size());
  for (const std::string& n : names) out.push_back(qlab::parse_format(n));
  return out;
}

struct TrainArgs {
  std::string corpus, out_dir, size = "s1";
  std::uint64_t seed = 1;
  std::size_t synth_bytes = 0;
  qlab::TrainOptions opt;
};

void run_train(const TrainArgs& a) {
  std::vector<std::uint8_t> corpus;
  if (a.synth_bytes > 0) {
    corpus = qlab::synthetic_corpus(a.synth_bytes, a.seed);
    std::ofstream out(a.corpus, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write corpus file: " + a.corpus);
    out.write(reinterpret_cast<const char*>(corpus.data()),
              static_cast<std::streamsize>(corpus.size()));
    if (!out) throw std::runtime_error("failed writing corpus file: " + a.corpus);
  } else {
    corpus = read_bytes(a.corpus);
  }
  const qlab::ToyConfig cfg = qlab::preset_config(a.size);
  const auto t0 = std::chrono::steady_clock::now();
  const ToyCheckpoint ckpt = qlab::train(corpus, cfg, a.opt, a.seed);
  const double secs = elapsed(t0);
  std::filesystem::create_directories(a.out_dir);
  qlab::save_checkpoint(ckpt, a.out_dir);
  std::ofstream copy(std::filesystem::path(a.out_dir) / "corpus.bin",
                     std::ios::binary);
  copy.write(reinterpret_cast<const char*>(corpus.data()),
             static_cast<std::streamsize>(corpus.size()));
  if (!copy) throw std::runtime_error("failed writing corpus copy");

  ordered_json j;
  j["kind"] = "train";
  j["checkpoint"] = checkpoint_id_of(a.out_dir);
  j["config_hash"] = qlab::checkpoint_hash(ckpt);
  j["size"] = a.size;
  j["seed"] = a.seed;
  j["steps"] = a.opt.steps;
  j["train_nll"] = ckpt.train_nll;
  j["valid_nll"] = ckpt.valid_nll;
  j["seconds"] = secs;
  std::cout << j.dump() << "\n";
}

std::string sweep_csv_header() {
  return "checkpoint,format,method,precision,block,bits_per_weight,sqnr_db,"
         "nll";
}

int block_of(const QuantFormat& f) {
  if (qlab::is_mx(f)) return f.block_size;
  return f.granularity == qlab::IntGranularity::per_group ? f.group_size : 0;
}

void append_sweep_row(std::string& csv, const std::string& ckpt_id,
                      const QuantFormat& f, const qlab::SweepEntry& e) {
  csv += ckpt_id;
  csv += ',';
  csv += e.format;
  csv += ',';
  csv += qlab::method_name(e.method);
  csv += ',';
  csv += std::to_string(f.precision_bits);
  csv += ',';
  csv += std::to_string(block_of(f));
  csv += ',';
  csv += qlab::real_to_csv(e.bits_per_weight);
  csv += ',';
  csv += qlab::real_to_csv(e.sqnr_db);
  csv += ',';
  csv += qlab::real_to_csv(e.nll);
  csv += '\n';
}

struct SweepArgs {
  std::string ckpt_dir, corpus, formats = "all36", manifest;
  std::string methods = "rtn,gptq";
  std::string store, out;
};

void run_sweep(const SweepArgs& a) {
  const auto fmts = resolve_formats(a.formats, a.manifest);
  const auto methods = split_list(a.methods);
  if (methods.empty()) throw std::invalid_argument("no methods selected");
  for (const std::string& m : methods) qlab::parse_method(m);

  const LoadedCheckpoint lc = load_with_corpus(a.ckpt_dir, a.corpus);
  const double nll_fp = qlab::eval_nll(lc.ckpt, lc.ds, qlab::Split::valid);

  std::unique_ptr<qlab::GptqSolver> solver;
  double hessian_seconds = 0.0;
  const bool wants_gptq =
      std::find(methods.begin(), methods.end(), "gptq") != methods.end();
  if (wants_gptq) {
    const auto t0 = std::chrono::steady_clock::now();
    solver = std::make_unique<qlab::GptqSolver>(lc.ckpt, lc.ds);
    hessian_seconds = elapsed(t0);
  }

  std::string csv = sweep_csv_header();
  csv += '\n';
  std::vector<ExperimentRecord> records;
  bool first_gptq = true;
  for (const QuantFormat& f : fmts) {
    for (const std::string& m : methods) {
      qlab::SweepEntry entry;
      if (m == "gptq") {
        entry = qlab::measure_gptq(lc.ckpt, lc.ds, f, *solver,
                                   first_gptq ? hessian_seconds : 0.0);
        first_gptq = false;
      } else {
        entry = qlab::measure_rtn(lc.ckpt, lc.ds, f);
      }
      append_sweep_row(csv, lc.id, f, entry);
      records.push_back(qlab::to_record(lc.id, lc.ckpt, nll_fp, entry));
    }
  }
  if (!a.store.empty()) qlab::append_records(a.store, records);
  emit_csv(a.out, csv, "sweep", records.size());
}

struct LandscapeArgs {
  std::string ckpt_dir, corpus, format = "mxint4_128", grid, out;
  int n_seeds = 3;
  std::uint64_t seed = 1;
};

void run_landscape(const LandscapeArgs& a) {
  if (a.n_seeds < 0) throw std::invalid_argument("--seeds must be >= 0");
  const std::vector<double> grid =
      a.grid.empty() ? qlab::default_snr_grid() : qlab::parse_grid_spec(a.grid);
  const LoadedCheckpoint lc = load_with_corpus(a.ckpt_dir, a.corpus);
  const std::size_t d = qlab::quantizable_count(lc.ckpt.config);

  std::vector<qlab::RadialProfile> profiles;
  for (int i = 0; i < a.n_seeds; ++i) {
    const std::uint64_t s = a.seed + static_cast<std::uint64_t>(i);
    const auto dir = qlab::sample_direction(d, s);
    qlab::RadialProfile p = qlab::radial_profile(lc.ckpt, lc.ds, dir, grid);
    p.kind = qlab::DirectionKind::random;
    p.seed = s;
    profiles.push_back(std::move(p));
  }
  const QuantFormat f = qlab::parse_format(a.format);
  for (const auto kind :
       {qlab::DirectionKind::rtn, qlab::DirectionKind::gptq}) {
    const qlab::QuantDirection qd =
        qlab::quantization_direction(lc.ckpt, f, kind, lc.ds);
    qlab::RadialProfile p =
        qlab::radial_profile(lc.ckpt, lc.ds, qd.direction, grid);
    p.kind = kind;
    p.format = a.format;
    p.seed = 0;
    profiles.push_back(std::move(p));
  }
  std::size_t samples = 0;
  for (const auto& p : profiles) samples += p.samples.size();
  const std::string csv = qlab::profile_csv(profiles);
  emit_csv(a.out, csv, "landscape", samples);
}

struct FeaturesArgs {
  std::vector<std::string> ckpt_dirs;
  std::string corpus, formats = "all36", manifest, store, out;
};

void run_features(const FeaturesArgs& a) {
  const auto fmts = resolve_formats(a.formats, a.manifest);
  std::vector<FeatureRecord> rows;
  std::vector<ExperimentRecord> records;
  for (const std::string& dir : a.ckpt_dirs) {
    const LoadedCheckpoint lc = load_with_corpus(dir, a.corpus);
    const double nll_fp = qlab::eval_nll(lc.ckpt, lc.ds, qlab::Split::valid);
    const auto t0 = std::chrono::steady_clock::now();
    qlab::GptqSolver solver(lc.ckpt, lc.ds);
    double hessian_seconds = elapsed(t0);
    for (const QuantFormat& f : fmts) {
      const qlab::FeatureMeasurement m = qlab::measure_feature_row(
          lc.id, lc.ckpt, lc.ds, solver, f, nll_fp, hessian_seconds);
      hessian_seconds = 0.0;
      rows.push_back(m.record);
      if (!a.store.empty()) {
        records.push_back(qlab::to_record(lc.id, lc.ckpt, nll_fp, m.rtn));
        records.push_back(qlab::to_record(lc.id, lc.ckpt, nll_fp, m.gptq));
      }
    }
  }
  if (!a.store.empty()) qlab::append_records(a.store, records);
  emit_csv(a.out, qlab::features_csv(rows), "features", rows.size());
}

struct FitPredictArgs {
  std::string train_csv, holdout_csv, out;
  std::uint64_t seed = 1;
};

void run_fit_predict(const FitPredictArgs& a) {
  const auto train_recs = qlab::parse_features_csv(read_text(a.train_csv));
  const auto holdout_recs = qlab::parse_features_csv(read_text(a.holdout_csv));
  const qlab::Forest forest = qlab::fit_forest(train_recs, {}, a.seed);
  if (!a.out.empty()) write_text(a.out, qlab::forest_json(forest));

  double sse = 0.0, sst = 0.0, mean = 0.0;
  for (const FeatureRecord& r : holdout_recs) {
    if (!r.nll_gptq)
      throw std::invalid_argument("holdout record " + r.model_id +
                                  " has no nll_gptq target");
    mean += *r.nll_gptq / static_cast<double>(holdout_recs.size());
  }
  for (const FeatureRecord& r : holdout_recs) {
    const double err = qlab::predict(forest, r) - *r.nll_gptq;
    sse += err * err;
    sst += (*r.nll_gptq - mean) * (*r.nll_gptq - mean);
  }
  const double rmse =
      std::sqrt(sse / static_cast<double>(holdout_recs.size()));

  ordered_json j;
  j["kind"] = "metrics";
  j["n_train"] = train_recs.size();
  j["n_holdout"] = holdout_recs.size();
  j["rmse"] = rmse;
  if (sst > 0.0)
    j["r2"] = 1.0 - sse / sst;
  else
    j["r2"] = nullptr;
  std::cout << j.dump() << "\n";

  const qlab::ImportanceReport rep = qlab::importance(forest);
  for (int i = 0; i < qlab::kNumFeatures; ++i) {
    ordered_json row;
    row["kind"] = "importance";
    row["feature"] = qlab::feature_names()[i];
    row["mean"] = rep.mean[i];
    row["std"] = rep.stdev[i];
    std::cout << row.dump() << "\n";
  }
}

struct PredictArgs {
  std::string forest_path, in_csv, out;
};

void run_predict(const PredictArgs& a) {
  const qlab::Forest forest =
      qlab::parse_forest_json(read_text(a.forest_path));
  const auto recs = qlab::parse_features_csv(read_text(a.in_csv));
  std::string csv = "model_id,precision,ebits,block,nll_gptq_pred\n";
  for (const FeatureRecord& r : recs) {
    csv += r.model_id;
    csv += ',';
    csv += std::to_string(r.precision);
    csv += ',';
    csv += std::to_string(r.ebits);
    csv += ',';
    csv += std::to_string(r.block);
    csv += ',';
    csv += qlab::real_to_csv(qlab::predict(forest, r));
    csv += '\n';
  }
  emit_csv(a.out, csv, "predict", recs.size());
}

struct ParetoArgs {
  std::string store, out;
};

void run_pareto(const ParetoArgs& a) {
  const auto records = qlab::read_store(a.store);
  if (records.empty())
    throw std::runtime_error("record store is empty: " + a.store);
  const auto rows = qlab::pareto_rows(records);
  emit_csv(a.out, qlab::pareto_csv(rows), "pareto", rows.size());
}

struct CostArgs {
  std::string ckpt_dir, corpus, format = "mxint4_128";
  std::uint64_t seed = 1;
};

void run_cost(const CostArgs& a) {
  const LoadedCheckpoint lc = load_with_corpus(a.ckpt_dir, a.corpus);
  const QuantFormat f = qlab::parse_format(a.format);
  const std::size_t d = qlab::quantizable_count(lc.ckpt.config);

  const auto phase = [](const char* name, auto&& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const double secs = elapsed(t0);
    ordered_json j;
    j["kind"] = "phase";
    j["name"] = name;
    j["seconds"] = secs;
    std::cout << j.dump() << "\n";
    return secs;
  };

  double features_seconds = 0.0;
  features_seconds += phase("rtn", [&] { qlab::measure_rtn(lc.ckpt, lc.ds, f); });
  features_seconds += phase("landscape", [&] {
    for (int i = 0; i < 3; ++i) {
      const auto dir =
          qlab::sample_direction(d, a.seed + static_cast<std::uint64_t>(i));
      qlab::radial_profile(lc.ckpt, lc.ds, dir, qlab::default_snr_grid());
    }
  });
  features_seconds += phase(
      "slope", [&] { qlab::slope_at_operating_point(lc.ckpt, lc.ds, f); });

  double gptq_seconds = 0.0;
  std::unique_ptr<qlab::GptqSolver> solver;
  gptq_seconds += phase("hessian", [&] {
    solver = std::make_unique<qlab::GptqSolver>(lc.ckpt, lc.ds);
  });
  gptq_seconds += phase("gptq", [&] { solver->run(f); });

  ordered_json j;
  j["kind"] = "cost";
  j["format"] = a.format;
  j["features_seconds"] = features_seconds;
  j["gptq_seconds"] = gptq_seconds;
  j["ratio"] = gptq_seconds / features_seconds;
  std::cout << j.dump() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Block-scaled quantization laboratory"};
  app.require_subcommand(1);

  TrainArgs train_args;
  CLI::App* train = app.add_subcommand(
      "train", "Train a toy byte-level transformer checkpoint");
  train->add_option("corpus", train_args.corpus, "UTF-8/byte corpus file")
      ->required();
  train->add_option("out", train_args.out_dir, "Output checkpoint directory")
      ->required();
  train->add_option("--size", train_args.size, "Preset size (s1..s4)");
  train->add_option("--seed", train_args.seed, "Training seed");
  train->add_option("--synth", train_args.synth_bytes,
                    "Generate this many synthetic corpus bytes into the "
                    "corpus path instead of reading it");
  train->add_option("--steps", train_args.opt.steps, "Adam steps");
  train->add_option("--batch", train_args.opt.batch_size, "Batch size");
  train->add_option("--lr", train_args.opt.lr, "Learning rate");

  SweepArgs sweep_args;
  CLI::App* sweep = app.add_subcommand(
      "sweep", "Quantize a checkpoint across formats and methods");
  sweep->add_option("checkpoint", sweep_args.ckpt_dir, "Checkpoint directory")
      ->required();
  sweep->add_option("--corpus", sweep_args.corpus,
                    "Corpus override (defaults to checkpoint corpus.bin)");
  sweep->add_option("--formats", sweep_args.formats,
                    "all36 or comma-separated format names");
  sweep->add_option("--manifest", sweep_args.manifest,
                    "Format manifest file replacing the built-in all36 list");
  sweep->add_option("--methods", sweep_args.methods,
                    "Comma-separated subset of rtn,gptq,int_rtn");
  sweep->add_option("--store", sweep_args.store, "Append records to this JSONL file");
  sweep->add_option("--out", sweep_args.out, "CSV output path (default stdout)");

  LandscapeArgs land_args;
  CLI::App* land = app.add_subcommand(
      "landscape", "Radial NLL profiles along random and quantization directions");
  land->add_option("checkpoint", land_args.ckpt_dir, "Checkpoint directory")
      ->required();
  land->add_option("--corpus", land_args.corpus, "Corpus override");
  land->add_option("--format", land_args.format,
                   "Format for the RTN/GPTQ directions");
  land->add_option("--grid", land_args.grid, "SNR grid as lo:hi:step, in dB");
  land->add_option("--seeds", land_args.n_seeds, "Number of random directions");
  land->add_option("--seed", land_args.seed, "Base seed for random directions");
  land->add_option("--out", land_args.out, "CSV output path (default stdout)");

  FeaturesArgs feat_args;
  CLI::App* feat = app.add_subcommand(
      "features", "Measure the predictor feature table for checkpoints");
  feat->add_option("checkpoints", feat_args.ckpt_dirs,
                   "Checkpoint directories")
      ->required();
  feat->add_option("--corpus", feat_args.corpus, "Corpus override");
  feat->add_option("--formats", feat_args.formats,
                   "all36 or comma-separated format names");
  feat->add_option("--manifest", feat_args.manifest,
                   "Format manifest file replacing the built-in all36 list");
  feat->add_option("--store", feat_args.store, "Append records to this JSONL file");
  feat->add_option("--out", feat_args.out, "CSV output path (default stdout)");

  FitPredictArgs fit_args;
  CLI::App* fit = app.add_subcommand(
      "fit-predict", "Fit the forest on one CSV and score another");
  fit->add_option("train", fit_args.train_csv, "Training feature CSV")
      ->required();
  fit->add_option("holdout", fit_args.holdout_csv, "Holdout feature CSV")
      ->required();
  fit->add_option("--seed", fit_args.seed, "Forest seed");
  fit->add_option("--out", fit_args.out, "Forest JSON output path");

  PredictArgs pred_args;
  CLI::App* pred = app.add_subcommand(
      "predict", "Apply a fitted forest to a feature CSV");
  pred->add_option("input", pred_args.in_csv, "Feature CSV")->required();
  pred->add_option("--forest", pred_args.forest_path, "Forest JSON file")
      ->required();
  pred->add_option("--out", pred_args.out, "CSV output path (default stdout)");

  ParetoArgs pareto_args;
  CLI::App* pareto = app.add_subcommand(
      "pareto", "Weight-bits vs NLL frontier from the record store");
  pareto->add_option("--store", pareto_args.store, "Record store JSONL file")
      ->required();
  pareto->add_option("--out", pareto_args.out, "CSV output path (default stdout)");

  CostArgs cost_args;
  CLI::App* cost = app.add_subcommand(
      "cost", "Time feature extraction against a full GPTQ pass");
  cost->add_option("checkpoint", cost_args.ckpt_dir, "Checkpoint directory")
      ->required();
  cost->add_option("--corpus", cost_args.corpus, "Corpus override");
  cost->add_option("--format", cost_args.format, "Format to time");
  cost->add_option("--seed", cost_args.seed, "Seed for the random directions");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*train) run_train(train_args);
    if (*sweep) run_sweep(sweep_args);
    if (*land) run_landscape(land_args);
    if (*feat) run_features(feat_args);
    if (*fit) run_fit_predict(fit_args);
    if (*pred) run_predict(pred_args);
    if (*pareto) run_pareto(pareto_args);
    if (*cost) run_cost(cost_args);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
