#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace qlab {

enum class Method { rtn, gptq, int_rtn };

std::string method_name(Method m);
Method parse_method(const std::string& name);

struct PhaseSeconds {
  double hessian = 0.0;
  double gptq = 0.0;
  double landscape = 0.0;
};

// One line of the append-only experiment store. Records are self-describing:
// they embed the checkpoint identity, its config hash, and enough per-format
// data (bits_per_weight, nll_fp) to rebuild downstream reports from the store
// alone. timestamp and seconds are wall-clock fields, excluded from
// determinism comparisons.
struct ExperimentRecord {
  std::string timestamp;
  std::string checkpoint_id;
  std::string config_hash;
  std::int64_t d_params = 0;
  double nll_fp = 0.0;
  std::string format;
  Method method = Method::rtn;
  double sqnr_db = 0.0;
  double nll = 0.0;
  double bits_per_weight = 0.0;
  nlohmann::ordered_json layers = nlohmann::ordered_json::array();
  PhaseSeconds seconds;
};

std::string utc_timestamp();

std::string record_json(const ExperimentRecord& r);
ExperimentRecord parse_record_json(const std::string& line);

void append_records(const std::string& path,
                    std::span<const ExperimentRecord> records);
std::vector<ExperimentRecord> read_store(const std::string& path);

struct ParetoRow {
  std::string checkpoint_id;
  std::string method;
  std::string format;
  double bits_per_weight = 0.0;
  double total_bits = 0.0;
  double nll = 0.0;
  bool optimal = false;
};

// Rows sorted by total weight bits, one fp32 baseline row per distinct
// checkpoint, optimal = not dominated on (total_bits, nll) by any other row.
std::vector<ParetoRow> pareto_rows(std::span<const ExperimentRecord> records);

std::string pareto_csv_header();
std::string pareto_csv(std::span<const ParetoRow> rows);

}  // namespace qlab
