#pragma once

// Weakly-supervised grounding: turn a per-frame attention trace into one
// span. Frames strictly above the trace mean form candidate runs; each run is
// scored by its attention, rescaled by length^alpha, and the best one wins.

#include <span>
#include <string>
#include <vector>

#include "vqg/timeline.hpp"

namespace vqg {

enum class ProposalScoring { kMean, kSum };

ProposalScoring parse_scoring(const std::string& text);
std::string to_string(ProposalScoring scoring);

struct WsqgConfig {
  double alpha = 0.5;
  ProposalScoring scoring = ProposalScoring::kMean;

  void validate() const;
};

struct Proposal {
  Span span;
  double raw_score = 0.0;
  double refined_score = 0.0;
};

/// Maximal runs of frames with score > mean(trace), in order. A trace with
/// no frame above its mean yields the full span. Throws ValidationError on an
/// empty trace.
std::vector<Span> extract_proposals(std::span<const double> trace);

double score_proposal(std::span<const double> trace, const Span& span,
                      const WsqgConfig& cfg);

/// raw * length^alpha, length = ed - st + 1.
double refine_score(double raw, const Span& span, const WsqgConfig& cfg);

/// Every candidate with both scores filled in.
std::vector<Proposal> scored_proposals(std::span<const double> trace,
                                       const WsqgConfig& cfg);

/// Highest refined score; ties go to the earliest start, then the longer span.
Span ground(std::span<const double> trace, const WsqgConfig& cfg);

}  // namespace vqg
