#include "vqg/wsqg.hpp"

#include <cmath>

#include "vqg/errors.hpp"

namespace vqg {

ProposalScoring parse_scoring(const std::string& text) {
  if (text == "mean") return ProposalScoring::kMean;
  if (text == "sum") return ProposalScoring::kSum;
  throw ValidationError("unknown scoring '" + text + "' (expected mean or sum)");
}

std::string to_string(ProposalScoring scoring) {
  return scoring == ProposalScoring::kMean ? "mean" : "sum";
}

void WsqgConfig::validate() const {
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) {
    throw ValidationError("alpha must be a finite value >= 0");
  }
}

std::vector<Span> extract_proposals(std::span<const double> trace) {
  if (trace.empty()) throw ValidationError("extract_proposals: empty trace");
  double threshold = 0.0;
  for (double a : trace) threshold += a;
  threshold /= static_cast<double>(trace.size());

  std::vector<Span> runs;
  bool open = false;
  std::size_t start = 0;
  for (std::size_t i = 0; i < trace.size(); ++i) {
    const bool above = trace[i] > threshold;
    if (above && !open) {
      open = true;
      start = i;
    } else if (!above && open) {
      open = false;
      runs.push_back({start, i - 1});
    }
  }
  if (open) runs.push_back({start, trace.size() - 1});
  if (runs.empty()) runs.push_back({0, trace.size() - 1});
  return runs;
}

double score_proposal(std::span<const double> trace, const Span& span,
                      const WsqgConfig& cfg) {
  if (span.st > span.ed || span.ed >= trace.size()) {
    throw ValidationError("score_proposal: span " + to_string(span) +
                          " outside trace");
  }
  double total = 0.0;
  for (std::size_t k = span.st; k <= span.ed; ++k) total += trace[k];
  if (cfg.scoring == ProposalScoring::kSum) return total;
  return total / static_cast<double>(span.length());
}

double refine_score(double raw, const Span& span, const WsqgConfig& cfg) {
  return raw * std::pow(static_cast<double>(span.length()), cfg.alpha);
}

std::vector<Proposal> scored_proposals(std::span<const double> trace,
                                       const WsqgConfig& cfg) {
  std::vector<Proposal> out;
  for (const Span& s : extract_proposals(trace)) {
    const double raw = score_proposal(trace, s, cfg);
    out.push_back({s, raw, refine_score(raw, s, cfg)});
  }
  return out;
}

Span ground(std::span<const double> trace, const WsqgConfig& cfg) {
  const auto proposals = scored_proposals(trace, cfg);
  const Proposal* best = &proposals.front();
  for (const auto& p : proposals) {
    const bool better =
        p.refined_score > best->refined_score ||
        (p.refined_score == best->refined_score &&
         (p.span.st < best->span.st ||
          (p.span.st == best->span.st && p.span.length() > best->span.length())));
    if (better) best = &p;
  }
  return best->span;
}

}  // namespace vqg
