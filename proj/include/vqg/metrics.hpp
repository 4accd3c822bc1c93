#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "vqg/timeline.hpp"

namespace vqg {

struct EvalRecord {
  std::string id;
  std::size_t predicted_answer = 0;
  std::size_t gt_answer = 0;
  Span predicted_span;
  Span gt_span;
};

struct EvalReport {
  double acc = 0.0;
  double t_miou = 0.0;
  std::map<double, double> r_at_1;  // IoU threshold -> recall
  double asa = 0.0;
  std::size_t n = 0;
};

inline const std::vector<double> kDefaultIouThresholds{0.3, 0.5, 0.7};

/// Accuracy, mean temporal IoU, R@1 at each IoU threshold (closed: IoU >= m)
/// and answer-span joint accuracy (answer correct and IoU >= 0.5).
/// Throws ValidationError("no-records") on empty input.
EvalReport evaluate(std::span<const EvalRecord> records,
                    const std::vector<double>& thresholds = kDefaultIouThresholds);

nlohmann::json to_json(const EvalReport& report);
/// Parses and validates a report produced by to_json.
EvalReport report_from_json(const nlohmann::json& j);

/// Aligned text table: R@1 at each threshold, T.mIoU, Acc, ASA (percent).
std::string format_table(const EvalReport& report);

}  // namespace vqg
