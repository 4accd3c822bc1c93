#include "vqg/metrics.hpp"

#include <algorithm>
#include <iomanip>
#include <sstream>

#include "vqg/errors.hpp"

namespace vqg {

namespace {

constexpr double kAsaIou = 0.5;

std::string threshold_key(double m) {
  std::ostringstream out;
  out << m;
  return out.str();
}

}  // namespace

EvalReport evaluate(std::span<const EvalRecord> records,
                    const std::vector<double>& thresholds) {
  if (records.empty()) throw ValidationError("no-records");
  std::size_t correct = 0;
  std::size_t joint = 0;
  double iou_sum = 0.0;
  std::vector<std::size_t> hits(thresholds.size(), 0);
  for (const auto& r : records) {
    const double iou = temporal_iou(r.predicted_span, r.gt_span);
    const bool answer_ok = r.predicted_answer == r.gt_answer;
    iou_sum += iou;
    if (answer_ok) ++correct;
    if (answer_ok && iou >= kAsaIou) ++joint;
    for (std::size_t k = 0; k < thresholds.size(); ++k) {
      if (iou >= thresholds[k]) ++hits[k];
    }
  }
  const auto n = static_cast<double>(records.size());
  EvalReport report;
  report.n = records.size();
  report.acc = static_cast<double>(correct) / n;
  report.asa = static_cast<double>(joint) / n;
  report.t_miou = iou_sum / n;
  for (std::size_t k = 0; k < thresholds.size(); ++k) {
    report.r_at_1[thresholds[k]] = static_cast<double>(hits[k]) / n;
  }
  return report;
}

nlohmann::json to_json(const EvalReport& report) {
  nlohmann::json recall = nlohmann::json::object();
  for (const auto& [m, v] : report.r_at_1) recall[threshold_key(m)] = v;
  return {{"n", report.n},
          {"acc", report.acc},
          {"t_miou", report.t_miou},
          {"asa", report.asa},
          {"r_at_1", recall}};
}

EvalReport report_from_json(const nlohmann::json& j) {
  auto ratio = [&](const nlohmann::json& v, const std::string& name) {
    if (!v.is_number()) throw ValidationError("report: '" + name + "' is not a number");
    const double x = v.get<double>();
    if (!(x >= 0.0 && x <= 1.0)) {
      throw ValidationError("report: '" + name + "' outside [0, 1]");
    }
    return x;
  };
  if (!j.is_object()) throw ValidationError("report: expected a JSON object");
  for (const char* key : {"n", "acc", "t_miou", "asa", "r_at_1"}) {
    if (!j.contains(key)) throw ValidationError(std::string("report: missing '") + key + "'");
  }
  EvalReport r;
  if (!j["n"].is_number_unsigned() || j["n"].get<std::size_t>() == 0) {
    throw ValidationError("report: 'n' must be a positive integer");
  }
  r.n = j["n"].get<std::size_t>();
  r.acc = ratio(j["acc"], "acc");
  r.t_miou = ratio(j["t_miou"], "t_miou");
  r.asa = ratio(j["asa"], "asa");
  if (!j["r_at_1"].is_object()) throw ValidationError("report: 'r_at_1' must be an object");
  for (const auto& [key, v] : j["r_at_1"].items()) {
    double m = 0.0;
    try {
      m = std::stod(key);
    } catch (const std::exception&) {
      throw ValidationError("report: bad IoU threshold '" + key + "'");
    }
    r.r_at_1[m] = ratio(v, "r_at_1[" + key + "]");
  }
  if (r.asa > r.acc) throw ValidationError("report: asa exceeds acc");
  if (auto it = r.r_at_1.find(kAsaIou); it != r.r_at_1.end() && r.asa > it->second) {
    throw ValidationError("report: asa exceeds R@1 at IoU 0.5");
  }
  return r;
}

std::string format_table(const EvalReport& report) {
  std::vector<std::string> headers;
  std::vector<double> values;
  for (const auto& [m, v] : report.r_at_1) {
    headers.push_back("R@1 IoU=" + threshold_key(m));
    values.push_back(v);
  }
  headers.insert(headers.end(), {"T.mIoU", "Acc", "ASA"});
  values.insert(values.end(), {report.t_miou, report.acc, report.asa});

  std::ostringstream out;
  std::vector<std::size_t> widths;
  for (const auto& h : headers) widths.push_back(std::max<std::size_t>(h.size(), 6));
  for (std::size_t i = 0; i < headers.size(); ++i) {
    out << (i ? " | " : "") << std::setw(static_cast<int>(widths[i])) << headers[i];
  }
  out << '\n';
  for (std::size_t i = 0; i < headers.size(); ++i) {
    out << (i ? "-+-" : "") << std::string(widths[i], '-');
  }
  out << '\n' << std::fixed << std::setprecision(2);
  for (std::size_t i = 0; i < values.size(); ++i) {
    out << (i ? " | " : "") << std::setw(static_cast<int>(widths[i]))
        << 100.0 * values[i];
  }
  out << "\n(n = " << report.n << ", values in percent)\n";
  return out.str();
}

}  // namespace vqg
