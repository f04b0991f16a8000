#include "badcrnn/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "badcrnn/errors.hpp"
#include "badcrnn/io.hpp"
#include "badcrnn/parallel.hpp"

namespace badcrnn {

LabelMap labels_from(const Manifest& manifest) {
  LabelMap labels;
  for (const auto& e : manifest.entries) labels[e.clip_id] = e.label;
  return labels;
}

EvalReport auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ShapeError("scores and labels differ in length");
  EvalReport report;
  for (double s : scores) {
    if (!std::isfinite(s)) throw MetricError("AUC scores must be finite");
  }
  for (int y : labels) (y == 1 ? report.n_pos : report.n_neg)++;
  if (report.n_pos == 0 || report.n_neg == 0) {
    throw MetricError("AUC needs at least one positive and one negative clip");
  }

  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Ranks are 1-based; tied scores share the mean of their ranks.
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) {
      if (labels[order[k]] == 1) rank_sum += midrank;
    }
    i = j + 1;
  }
  const double p = static_cast<double>(report.n_pos), q = static_cast<double>(report.n_neg);
  report.auc = (rank_sum - p * (p + 1.0) / 2.0) / (p * q);

  // Walk thresholds from the highest score down.
  report.roc.emplace_back(0.0, 0.0);
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = n; i > 0;) {
    std::size_t j = i;
    while (j > 0 && scores[order[j - 1]] == scores[order[i - 1]]) {
      --j;
      (labels[order[j]] == 1 ? tp : fp)++;
    }
    report.roc.emplace_back(static_cast<double>(fp) / q, static_cast<double>(tp) / p);
    i = j;
  }
  return report;
}

EvalReport auc(const std::vector<Prediction>& predictions, const LabelMap& labels) {
  std::vector<double> scores;
  std::vector<int> ys;
  scores.reserve(predictions.size());
  ys.reserve(predictions.size());
  for (const auto& pred : predictions) {
    const auto it = labels.find(pred.clip_id);
    if (it == labels.end()) throw JoinError("no label for clip '" + pred.clip_id + "'");
    scores.push_back(pred.probability);
    ys.push_back(it->second);
  }
  return auc(scores, ys);
}

std::vector<Prediction> ensemble_average(const std::vector<std::vector<Prediction>>& sets) {
  if (sets.empty()) throw JoinError("ensemble needs at least one prediction set");
  std::map<std::string, double> mean;
  for (const auto& p : sets.front()) {
    if (!mean.emplace(p.clip_id, p.probability).second) {
      throw JoinError("duplicate clip '" + p.clip_id + "' in prediction set");
    }
  }
  for (std::size_t s = 1; s < sets.size(); ++s) {
    if (sets[s].size() != mean.size()) throw JoinError("prediction sets cover different clips");
    std::map<std::string, double> seen;
    for (const auto& p : sets[s]) {
      const auto it = mean.find(p.clip_id);
      if (it == mean.end() || !seen.emplace(p.clip_id, 0.0).second) {
        throw JoinError("prediction sets cover different clips (at '" + p.clip_id + "')");
      }
      // Running mean: identical inputs reproduce the input exactly.
      it->second += (p.probability - it->second) / static_cast<double>(s + 1);
    }
  }
  std::vector<Prediction> out;
  out.reserve(mean.size());
  for (const auto& [id, prob] : mean) out.push_back({id, prob});
  return out;
}

std::vector<Prediction> predict_all(const CrnnModel& model, const std::vector<FeatureMatrix>& features,
                                    int jobs) {
  std::vector<Prediction> out(features.size());
  parallel_for(features.size(), jobs, [&](std::size_t i) {
    out[i] = {features[i].clip_id, predict(model, features[i])};
  });
  return out;
}

std::string predictions_to_csv(std::vector<Prediction> predictions) {
  std::sort(predictions.begin(), predictions.end(),
            [](const auto& a, const auto& b) { return a.clip_id < b.clip_id; });
  std::string out = "itemid,probability\n";
  for (const auto& p : predictions) out += p.clip_id + "," + io::format_g9(p.probability) + "\n";
  return out;
}

std::vector<Prediction> predictions_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 1;
  if (!std::getline(in, line)) throw ParseError("missing header row", 1);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "itemid,probability") throw ParseError("expected header 'itemid,probability'", 1);
  std::vector<Prediction> out;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw ParseError("expected 2 columns", line_no);
    Prediction p;
    p.clip_id = line.substr(0, comma);
    try {
      std::size_t used = 0;
      const auto value = line.substr(comma + 1);
      p.probability = std::stod(value, &used);
      if (used != value.size()) throw std::invalid_argument("trailing text");
    } catch (const std::exception&) {
      throw ParseError("invalid probability", line_no);
    }
    if (!(p.probability >= 0.0 && p.probability <= 1.0)) {
      throw ParseError("probability outside [0, 1]", line_no);
    }
    out.push_back(std::move(p));
  }
  return out;
}

std::string report_to_json(const EvalReport& report) {
  nlohmann::ordered_json j;
  j["auc"] = report.auc;
  j["n_pos"] = report.n_pos;
  j["n_neg"] = report.n_neg;
  j["roc"] = nlohmann::ordered_json::array();
  for (const auto& [fpr, tpr] : report.roc) j["roc"].push_back({fpr, tpr});
  return j.dump() + "\n";
}

EvalReport evaluate_files(const std::vector<std::filesystem::path>& model_paths,
                          const std::vector<std::filesystem::path>& feature_paths,
                          const LabelMap& labels, const std::filesystem::path& out_dir, int jobs) {
  if (model_paths.empty()) throw ConfigError("at least one model is required");
  std::vector<FeatureMatrix> features;
  features.reserve(feature_paths.size());
  for (const auto& path : feature_paths) features.push_back(load_features(path));

  std::vector<std::vector<Prediction>> sets;
  for (const auto& path : model_paths) sets.push_back(predict_all(load_model(path), features, jobs));
  const auto merged = ensemble_average(sets);

  const auto report = auc(merged, labels);
  io::write_atomic(out_dir / "predictions.csv", predictions_to_csv(merged));
  io::write_atomic(out_dir / "report.json", report_to_json(report));
  return report;
}

}  // namespace badcrnn
