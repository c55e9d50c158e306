#include "qlab/predictor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numeric>
#include <stdexcept>
#include <tuple>

#include "json.hpp"
#include "qlab/metrics.hpp"
#include "qlab/rng.hpp"

namespace qlab {

namespace {

using ordered_json = nlohmann::ordered_json;

double checked_target(const FeatureRecord& rec) {
  if (!rec.nll_gptq)
    throw std::invalid_argument("record " + rec.model_id +
                                " has no nll_gptq target");
  if (!std::isfinite(*rec.nll_gptq))
    throw std::invalid_argument("record " + rec.model_id +
                                " has a non-finite nll_gptq target");
  return *rec.nll_gptq;
}

auto canonical_key(const FeatureRecord& r) {
  return std::make_tuple(r.model_id, r.d_params, r.precision, r.ebits, r.block,
                         r.nll_fp, r.sqnr_rtn_db, r.nll_rtn, r.slope_db,
                         r.nll_gptq.value_or(0.0));
}

struct SplitChoice {
  int feature = -1;
  double threshold = 0.0;
  double gain = -1.0;
};

class TreeBuilder {
 public:
  TreeBuilder(const std::vector<std::array<double, kNumFeatures>>& xs,
              const std::vector<double>& ys, int max_depth)
      : xs_(xs), ys_(ys), max_depth_(max_depth) {}

  RegressionTree build(std::vector<int> idx) {
    tree_ = RegressionTree{};
    grow(std::move(idx), 0);
    return std::move(tree_);
  }

 private:
  int grow(std::vector<int> idx, int depth) {
    const int id = static_cast<int>(tree_.nodes.size());
    tree_.nodes.emplace_back();

    const std::size_t n = idx.size();
    double sum = 0.0, sum2 = 0.0;
    for (int i : idx) {
      sum += ys_[i];
      sum2 += ys_[i] * ys_[i];
    }
    const double mean = sum / static_cast<double>(n);
    const double sse =
        std::max(0.0, sum2 - sum * sum / static_cast<double>(n));

    const bool depth_ok = max_depth_ <= 0 || depth < max_depth_;
    SplitChoice best;
    if (depth_ok && n >= 2 && sse > 0.0) best = best_split(idx, sse);

    if (best.feature < 0) {
      tree_.nodes[id].leaf = mean;
      return id;
    }

    std::vector<int> left, right;
    left.reserve(n);
    right.reserve(n);
    for (int i : idx)
      (xs_[i][best.feature] <= best.threshold ? left : right).push_back(i);
    idx.clear();
    idx.shrink_to_fit();

    tree_.split_credit[best.feature] += std::max(0.0, best.gain);
    const int li = grow(std::move(left), depth + 1);
    const int ri = grow(std::move(right), depth + 1);
    TreeNode& node = tree_.nodes[id];
    node.feature = best.feature;
    node.threshold = best.threshold;
    node.left = li;
    node.right = ri;
    return id;
  }

  // Candidate thresholds are midpoints between consecutive distinct sorted
  // values; ties in gain keep the lowest feature index, then lowest threshold.
  SplitChoice best_split(const std::vector<int>& idx, double parent_sse) {
    SplitChoice best;
    const std::size_t n = idx.size();
    std::vector<std::pair<double, double>> vy(n);
    for (int f = 0; f < kNumFeatures; ++f) {
      for (std::size_t i = 0; i < n; ++i)
        vy[i] = {xs_[idx[i]][f], ys_[idx[i]]};
      std::sort(vy.begin(), vy.end(),
                [](const auto& a, const auto& b) { return a.first < b.first; });

      double lsum = 0.0, lsum2 = 0.0;
      double tsum = 0.0, tsum2 = 0.0;
      for (const auto& [v, y] : vy) {
        tsum += y;
        tsum2 += y * y;
      }
      for (std::size_t i = 0; i + 1 < n; ++i) {
        lsum += vy[i].second;
        lsum2 += vy[i].second * vy[i].second;
        if (vy[i].first == vy[i + 1].first) continue;
        const double t = vy[i].first + (vy[i + 1].first - vy[i].first) / 2.0;
        if (!(t >= vy[i].first && t < vy[i + 1].first)) continue;
        const double nl = static_cast<double>(i + 1);
        const double nr = static_cast<double>(n - i - 1);
        const double lsse = std::max(0.0, lsum2 - lsum * lsum / nl);
        const double rsum = tsum - lsum;
        const double rsum2 = tsum2 - lsum2;
        const double rsse = std::max(0.0, rsum2 - rsum * rsum / nr);
        const double gain = parent_sse - lsse - rsse;
        if (gain > best.gain) best = {f, t, gain};
      }
    }
    return best;
  }

  const std::vector<std::array<double, kNumFeatures>>& xs_;
  const std::vector<double>& ys_;
  int max_depth_;
  RegressionTree tree_;
};

ordered_json node_json(const RegressionTree& tree, int id) {
  const TreeNode& nd = tree.nodes[id];
  if (nd.feature < 0) return ordered_json{{"leaf", nd.leaf}};
  ordered_json j;
  j["feature"] = nd.feature;
  j["threshold"] = nd.threshold;
  j["left"] = node_json(tree, nd.left);
  j["right"] = node_json(tree, nd.right);
  return j;
}

int parse_node(const ordered_json& j, RegressionTree& tree) {
  const int id = static_cast<int>(tree.nodes.size());
  tree.nodes.emplace_back();
  if (j.contains("leaf")) {
    tree.nodes[id].leaf = j.at("leaf").get<double>();
    return id;
  }
  const int f = j.at("feature").get<int>();
  if (f < 0 || f >= kNumFeatures)
    throw std::invalid_argument("forest JSON has an out-of-range feature");
  const double t = j.at("threshold").get<double>();
  const int li = parse_node(j.at("left"), tree);
  const int ri = parse_node(j.at("right"), tree);
  TreeNode& nd = tree.nodes[id];
  nd.feature = f;
  nd.threshold = t;
  nd.left = li;
  nd.right = ri;
  return id;
}

std::vector<std::string_view> split_line(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

double parse_real_field(std::string_view field, const char* name) {
  const std::string s(field);
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw std::invalid_argument(std::string("bad ") + name + " value: " + s);
  }
  if (used != s.size())
    throw std::invalid_argument(std::string("bad ") + name + " value: " + s);
  return v;
}

std::int64_t parse_int_field(std::string_view field, const char* name) {
  const std::string s(field);
  std::size_t used = 0;
  long long v = 0;
  try {
    v = std::stoll(s, &used);
  } catch (const std::exception&) {
    throw std::invalid_argument(std::string("bad ") + name + " value: " + s);
  }
  if (used != s.size())
    throw std::invalid_argument(std::string("bad ") + name + " value: " + s);
  return v;
}

}  // namespace

const std::array<std::string, kNumFeatures>& feature_names() {
  static const std::array<std::string, kNumFeatures> names = {
      "D",         "nll_fp", "sqnr_rtn_db", "nll_rtn",
      "slope_db",  "precision", "ebits",    "block"};
  return names;
}

std::array<double, kNumFeatures> feature_vector(const FeatureRecord& rec) {
  if (rec.d_params <= 0)
    throw std::invalid_argument("record " + rec.model_id +
                                " has a non-positive parameter count");
  if (rec.precision < 2)
    throw std::invalid_argument("record " + rec.model_id +
                                " has element precision below 2");
  const std::array<double, kNumFeatures> x = {
      static_cast<double>(rec.d_params),
      rec.nll_fp,
      rec.sqnr_rtn_db,
      rec.nll_rtn,
      rec.slope_db,
      static_cast<double>(rec.precision),
      static_cast<double>(rec.ebits),
      static_cast<double>(rec.block)};
  for (double v : x)
    if (!std::isfinite(v))
      throw std::invalid_argument("record " + rec.model_id +
                                  " has a non-finite feature");
  return x;
}

std::string features_csv_header() {
  return "model_id,D,nll_fp,sqnr_rtn_db,nll_rtn,slope_db,precision,ebits,"
         "block,nll_gptq";
}

std::string features_csv(std::span<const FeatureRecord> records) {
  std::string out = features_csv_header();
  out += '\n';
  for (const FeatureRecord& r : records) {
    if (r.model_id.find_first_of(",\r\n") != std::string::npos)
      throw std::invalid_argument("model_id must not contain commas/newlines");
    out += r.model_id;
    out += ',';
    out += std::to_string(r.d_params);
    out += ',';
    out += real_to_csv(r.nll_fp);
    out += ',';
    out += real_to_csv(r.sqnr_rtn_db);
    out += ',';
    out += real_to_csv(r.nll_rtn);
    out += ',';
    out += real_to_csv(r.slope_db);
    out += ',';
    out += std::to_string(r.precision);
    out += ',';
    out += std::to_string(r.ebits);
    out += ',';
    out += std::to_string(r.block);
    out += ',';
    if (r.nll_gptq) out += real_to_csv(*r.nll_gptq);
    out += '\n';
  }
  return out;
}

std::vector<FeatureRecord> parse_features_csv(std::string_view text) {
  std::vector<FeatureRecord> out;
  std::size_t pos = 0;
  bool saw_header = false;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (!saw_header) {
      if (line != features_csv_header())
        throw std::invalid_argument("unexpected feature CSV header: " +
                                    std::string(line));
      saw_header = true;
      continue;
    }
    if (line.empty()) continue;
    const auto fields = split_line(line);
    if (fields.size() != 10)
      throw std::invalid_argument("feature CSV row needs 10 fields, got " +
                                  std::to_string(fields.size()));
    FeatureRecord r;
    r.model_id = std::string(fields[0]);
    r.d_params = parse_int_field(fields[1], "D");
    r.nll_fp = parse_real_field(fields[2], "nll_fp");
    r.sqnr_rtn_db = parse_real_field(fields[3], "sqnr_rtn_db");
    r.nll_rtn = parse_real_field(fields[4], "nll_rtn");
    r.slope_db = parse_real_field(fields[5], "slope_db");
    r.precision = static_cast<int>(parse_int_field(fields[6], "precision"));
    r.ebits = static_cast<int>(parse_int_field(fields[7], "ebits"));
    r.block = static_cast<int>(parse_int_field(fields[8], "block"));
    if (!fields[9].empty())
      r.nll_gptq = parse_real_field(fields[9], "nll_gptq");
    out.push_back(std::move(r));
  }
  if (!saw_header) throw std::invalid_argument("feature CSV is empty");
  return out;
}

double RegressionTree::predict(
    const std::array<double, kNumFeatures>& x) const {
  int id = 0;
  while (nodes[id].feature >= 0)
    id = x[nodes[id].feature] <= nodes[id].threshold ? nodes[id].left
                                                     : nodes[id].right;
  return nodes[id].leaf;
}

Forest fit_forest(std::span<const FeatureRecord> records,
                  const ForestOptions& options, std::uint64_t seed) {
  if (records.empty())
    throw std::invalid_argument("cannot fit a forest on an empty dataset");
  if (options.n_estimators < 1)
    throw std::invalid_argument("n_estimators must be at least 1");

  std::vector<const FeatureRecord*> order(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) order[i] = &records[i];
  std::sort(order.begin(), order.end(),
            [](const FeatureRecord* a, const FeatureRecord* b) {
              return canonical_key(*a) < canonical_key(*b);
            });

  const std::size_t n = records.size();
  std::vector<std::array<double, kNumFeatures>> xs(n);
  std::vector<double> ys(n);
  for (std::size_t i = 0; i < n; ++i) {
    xs[i] = feature_vector(*order[i]);
    ys[i] = checked_target(*order[i]);
  }

  Forest forest;
  forest.options = options;
  forest.seed = seed;
  forest.trees.reserve(static_cast<std::size_t>(options.n_estimators));
  TreeBuilder builder(xs, ys, options.max_depth);
  for (int t = 0; t < options.n_estimators; ++t) {
    std::vector<int> idx(n);
    if (options.bootstrap) {
      Rng rng(mix_seed(seed, static_cast<std::uint64_t>(t)));
      for (std::size_t i = 0; i < n; ++i)
        idx[i] = static_cast<int>(rng.uniform_index(n));
    } else {
      std::iota(idx.begin(), idx.end(), 0);
    }
    forest.trees.push_back(builder.build(std::move(idx)));
  }
  return forest;
}

double predict(const Forest& forest,
               const std::array<double, kNumFeatures>& x) {
  if (forest.trees.empty())
    throw std::invalid_argument("forest is not fitted");
  double sum = 0.0;
  for (const RegressionTree& tree : forest.trees) sum += tree.predict(x);
  return sum / static_cast<double>(forest.trees.size());
}

double predict(const Forest& forest, const FeatureRecord& record) {
  return predict(forest, feature_vector(record));
}

ImportanceReport importance(const Forest& forest) {
  if (forest.trees.empty())
    throw std::invalid_argument("forest is not fitted");
  std::vector<std::array<double, kNumFeatures>> per_tree;
  for (const RegressionTree& tree : forest.trees) {
    double total = 0.0;
    for (double c : tree.split_credit) total += c;
    if (total <= 0.0) continue;
    std::array<double, kNumFeatures> v{};
    for (int f = 0; f < kNumFeatures; ++f)
      v[f] = tree.split_credit[f] / total;
    per_tree.push_back(v);
  }
  if (per_tree.empty())
    throw std::runtime_error("forest has no internal splits");

  ImportanceReport rep;
  const double nt = static_cast<double>(per_tree.size());
  for (const auto& v : per_tree)
    for (int f = 0; f < kNumFeatures; ++f) rep.mean[f] += v[f] / nt;
  for (const auto& v : per_tree)
    for (int f = 0; f < kNumFeatures; ++f) {
      const double d = v[f] - rep.mean[f];
      rep.stdev[f] += d * d / nt;
    }
  for (int f = 0; f < kNumFeatures; ++f) rep.stdev[f] = std::sqrt(rep.stdev[f]);

  double total = 0.0;
  for (double m : rep.mean) total += m;
  for (int f = 0; f < kNumFeatures; ++f) rep.mean[f] /= total;
  return rep;
}

std::vector<std::pair<double, double>> partial_dependence(
    const Forest& forest, std::span<const FeatureRecord> records,
    int feature_index, std::span<const double> grid) {
  if (forest.trees.empty())
    throw std::invalid_argument("forest is not fitted");
  if (records.empty())
    throw std::invalid_argument("partial dependence needs records");
  if (grid.empty())
    throw std::invalid_argument("partial dependence needs a grid");
  if (feature_index < 0 || feature_index >= kNumFeatures)
    throw std::invalid_argument("feature index out of range");

  std::vector<std::array<double, kNumFeatures>> xs;
  xs.reserve(records.size());
  for (const FeatureRecord& r : records) xs.push_back(feature_vector(r));

  std::vector<std::pair<double, double>> out;
  out.reserve(grid.size());
  for (double v : grid) {
    if (!std::isfinite(v))
      throw std::invalid_argument("partial dependence grid must be finite");
    double sum = 0.0;
    for (auto x : xs) {
      x[feature_index] = v;
      sum += predict(forest, x);
    }
    out.emplace_back(v, sum / static_cast<double>(xs.size()));
  }
  return out;
}

std::string forest_json(const Forest& forest) {
  ordered_json j;
  j["n_estimators"] = forest.options.n_estimators;
  j["max_depth"] = forest.options.max_depth;
  j["bootstrap"] = forest.options.bootstrap;
  j["seed"] = forest.seed;
  j["feature_names"] = feature_names();
  ordered_json trees = ordered_json::array();
  ordered_json credits = ordered_json::array();
  for (const RegressionTree& tree : forest.trees) {
    trees.push_back(node_json(tree, 0));
    credits.push_back(tree.split_credit);
  }
  j["trees"] = std::move(trees);
  j["split_credit"] = std::move(credits);
  return j.dump();
}

Forest parse_forest_json(std::string_view text) {
  try {
    const ordered_json j = ordered_json::parse(text);
    Forest forest;
    forest.options.n_estimators = j.at("n_estimators").get<int>();
    forest.options.max_depth = j.at("max_depth").get<int>();
    forest.options.bootstrap = j.at("bootstrap").get<bool>();
    forest.seed = j.at("seed").get<std::uint64_t>();
    const auto names = j.at("feature_names").get<std::vector<std::string>>();
    if (names.size() != kNumFeatures ||
        !std::equal(names.begin(), names.end(), feature_names().begin()))
      throw std::invalid_argument("forest JSON has unexpected feature names");
    const ordered_json& trees = j.at("trees");
    const ordered_json& credits = j.at("split_credit");
    if (credits.size() != trees.size())
      throw std::invalid_argument("forest JSON credit/tree count mismatch");
    for (std::size_t t = 0; t < trees.size(); ++t) {
      RegressionTree tree;
      parse_node(trees[t], tree);
      const auto c = credits[t].get<std::vector<double>>();
      if (c.size() != kNumFeatures)
        throw std::invalid_argument("forest JSON has a malformed credit row");
      std::copy(c.begin(), c.end(), tree.split_credit.begin());
      forest.trees.push_back(std::move(tree));
    }
    return forest;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("malformed forest JSON: ") +
                                e.what());
  }
}

}  // namespace qlab
