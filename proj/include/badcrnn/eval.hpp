#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "badcrnn/dataset.hpp"
#include "badcrnn/features.hpp"
#include "badcrnn/net.hpp"

namespace badcrnn {

struct Prediction {
  std::string clip_id;
  double probability = 0.0;

  bool operator==(const Prediction&) const = default;
};

struct EvalReport {
  double auc = 0.0;
  std::vector<std::pair<double, double>> roc;  // (false-positive rate, true-positive rate)
  std::size_t n_pos = 0;
  std::size_t n_neg = 0;
};

using LabelMap = std::map<std::string, int>;

LabelMap labels_from(const Manifest& manifest);

// Midrank (Mann-Whitney) AUC with the ROC curve over unique thresholds.
EvalReport auc(std::span<const double> scores, std::span<const int> labels);
EvalReport auc(const std::vector<Prediction>& predictions, const LabelMap& labels);

// Per-clip arithmetic mean across prediction sets; output sorted by clip id.
std::vector<Prediction> ensemble_average(const std::vector<std::vector<Prediction>>& sets);

std::vector<Prediction> predict_all(const CrnnModel& model, const std::vector<FeatureMatrix>& features,
                                    int jobs = 1);

std::string predictions_to_csv(std::vector<Prediction> predictions);
std::vector<Prediction> predictions_from_csv(const std::string& text);
std::string report_to_json(const EvalReport& report);

// Runs every model over the features, averages when several models are
// given, and writes predictions.csv and report.json into `out_dir`.
EvalReport evaluate_files(const std::vector<std::filesystem::path>& model_paths,
                          const std::vector<std::filesystem::path>& feature_paths,
                          const LabelMap& labels, const std::filesystem::path& out_dir, int jobs = 1);

}  // namespace badcrnn
