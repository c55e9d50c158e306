#include "qlab/store.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <fstream>
#include <set>
#include <stdexcept>
#include <tuple>

#include "qlab/metrics.hpp"

namespace qlab {

namespace {

using ordered_json = nlohmann::ordered_json;

double finite_or_throw(const ordered_json& j, const char* key) {
  const auto& v = j.at(key);
  if (!v.is_number())
    throw std::invalid_argument(std::string("record field ") + key +
                                " is not a number");
  return v.get<double>();
}

}  // namespace

std::string method_name(Method m) {
  switch (m) {
    case Method::rtn: return "rtn";
    case Method::gptq: return "gptq";
    case Method::int_rtn: return "int_rtn";
  }
  throw std::invalid_argument("unknown method enum value");
}

Method parse_method(const std::string& name) {
  if (name == "rtn") return Method::rtn;
  if (name == "gptq") return Method::gptq;
  if (name == "int_rtn") return Method::int_rtn;
  throw std::invalid_argument("unknown method: " + name);
}

std::string utc_timestamp() {
  const std::time_t now =
      std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string record_json(const ExperimentRecord& r) {
  ordered_json j;
  j["timestamp"] = r.timestamp;
  j["checkpoint"] = r.checkpoint_id;
  j["config_hash"] = r.config_hash;
  j["d_params"] = r.d_params;
  j["nll_fp"] = r.nll_fp;
  j["format"] = r.format;
  j["method"] = method_name(r.method);
  j["sqnr_db"] = r.sqnr_db;
  j["nll"] = r.nll;
  j["bits_per_weight"] = r.bits_per_weight;
  j["layers"] = r.layers;
  j["seconds"] = ordered_json{{"hessian", r.seconds.hessian},
                              {"gptq", r.seconds.gptq},
                              {"landscape", r.seconds.landscape}};
  return j.dump();
}

ExperimentRecord parse_record_json(const std::string& line) {
  try {
    const ordered_json j = ordered_json::parse(line);
    ExperimentRecord r;
    r.timestamp = j.at("timestamp").get<std::string>();
    r.checkpoint_id = j.at("checkpoint").get<std::string>();
    r.config_hash = j.at("config_hash").get<std::string>();
    r.d_params = j.at("d_params").get<std::int64_t>();
    r.nll_fp = finite_or_throw(j, "nll_fp");
    r.format = j.at("format").get<std::string>();
    r.method = parse_method(j.at("method").get<std::string>());
    r.sqnr_db = finite_or_throw(j, "sqnr_db");
    r.nll = finite_or_throw(j, "nll");
    r.bits_per_weight = finite_or_throw(j, "bits_per_weight");
    r.layers = j.at("layers");
    const ordered_json& s = j.at("seconds");
    r.seconds.hessian = finite_or_throw(s, "hessian");
    r.seconds.gptq = finite_or_throw(s, "gptq");
    r.seconds.landscape = finite_or_throw(s, "landscape");
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("malformed experiment record: ") +
                                e.what());
  }
}

void append_records(const std::string& path,
                    std::span<const ExperimentRecord> records) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw std::runtime_error("cannot open record store: " + path);
  for (const ExperimentRecord& r : records) out << record_json(r) << '\n';
  out.flush();
  if (!out) throw std::runtime_error("failed writing record store: " + path);
}

std::vector<ExperimentRecord> read_store(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open record store: " + path);
  std::vector<ExperimentRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(parse_record_json(line));
  }
  return out;
}

std::vector<ParetoRow> pareto_rows(std::span<const ExperimentRecord> records) {
  std::vector<ParetoRow> rows;
  std::set<std::pair<std::string, std::string>> seen;
  for (const ExperimentRecord& r : records) {
    ParetoRow row;
    row.checkpoint_id = r.checkpoint_id;
    row.method = method_name(r.method);
    row.format = r.format;
    row.bits_per_weight = r.bits_per_weight;
    row.total_bits = r.bits_per_weight * static_cast<double>(r.d_params);
    row.nll = r.nll;
    rows.push_back(std::move(row));
    if (seen.insert({r.checkpoint_id, r.config_hash}).second) {
      ParetoRow base;
      base.checkpoint_id = r.checkpoint_id;
      base.method = "fp32";
      base.format = "";
      base.bits_per_weight = 32.0;
      base.total_bits = 32.0 * static_cast<double>(r.d_params);
      base.nll = r.nll_fp;
      rows.push_back(std::move(base));
    }
  }

  for (ParetoRow& a : rows) {
    a.optimal = true;
    for (const ParetoRow& b : rows) {
      if (&a == &b) continue;
      if (b.total_bits <= a.total_bits && b.nll <= a.nll &&
          (b.total_bits < a.total_bits || b.nll < a.nll)) {
        a.optimal = false;
        break;
      }
    }
  }

  std::sort(rows.begin(), rows.end(), [](const ParetoRow& a,
                                         const ParetoRow& b) {
    return std::tie(a.total_bits, a.nll, a.checkpoint_id, a.method, a.format) <
           std::tie(b.total_bits, b.nll, b.checkpoint_id, b.method, b.format);
  });
  return rows;
}

std::string pareto_csv_header() {
  return "checkpoint,method,format,bits_per_weight,total_bits,nll,pareto";
}

std::string pareto_csv(std::span<const ParetoRow> rows) {
  std::string out = pareto_csv_header();
  out += '\n';
  for (const ParetoRow& r : rows) {
    out += r.checkpoint_id;
    out += ',';
    out += r.method;
    out += ',';
    out += r.format;
    out += ',';
    out += real_to_csv(r.bits_per_weight);
    out += ',';
    out += real_to_csv(r.total_bits);
    out += ',';
    out += real_to_csv(r.nll);
    out += ',';
    out += r.optimal ? '1' : '0';
    out += '\n';
  }
  return out;
}

}  // namespace qlab
