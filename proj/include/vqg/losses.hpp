#pragma once

#include <string>
#include <vector>

#include "vqg/autograd.hpp"
#include "vqg/timeline.hpp"

namespace vqg {

struct LossWeights {
  double lambda1 = 0.5;   // span loss weight
  double lambda2 = 0.25;  // self-supervision weight
  double epsilon = 1e-7;  // probability clamp inside logs

  /// Throws ValidationError on negative weights or epsilon outside (0, 1e-3).
  void validate() const;
};

enum class SupervisionSetting { kQaOnly, kQaSelf, kFull, kFullSelf };

/// Which losses a setting switches on. The QA loss is always active.
struct SupervisionPattern {
  bool span = false;
  bool self = false;
};

SupervisionPattern pattern_of(SupervisionSetting setting);
/// Accepts qa, qa+self, full, full+self.
SupervisionSetting parse_setting(const std::string& text);
std::string to_string(SupervisionSetting setting);

/// -log softmax(scores)[gt_index] over the five answer scores.
Value loss_qa(const Value& scores, std::size_t gt_index, double epsilon = 1e-7);

/// -(log p_st[gt.st] + log p_ed[gt.ed]) / 2 with probabilities clamped to
/// at least epsilon.
Value loss_span(const Value& p_st, const Value& p_ed, const Span& gt,
                double epsilon = 1e-7);

/// A masked attention loss. `degenerate` is set when the mask has no inside
/// or no outside frame.
struct MaskedLoss {
  Value value;
  bool degenerate = false;
};

/// 1 + avg(A_out) - avg(A_in). Degenerate masks contribute 0.
MaskedLoss loss_rank(const Value& attention, const Mask& mask);

/// -mean(log A_in) - mean(log(1 - A_out)) with A clamped to
/// [epsilon, 1 - epsilon]. On a degenerate mask the undefined term is
/// dropped.
MaskedLoss loss_bce(const Value& attention, const Mask& mask,
                    double epsilon = 1e-7);

/// Mean over proposals of loss_rank + loss_bce. `traces` is [P, T] with one
/// mask per row; an undefined or empty trace set gives 0.
Value loss_self(const Value& traces, const std::vector<Mask>& masks,
                double epsilon = 1e-7);

/// qa + lambda1 * span + lambda2 * self, with inactive terms left out.
/// Components that the setting does not use may be undefined Values.
Value total_loss(const Value& qa, const Value& span, const Value& self,
                 const LossWeights& weights, SupervisionSetting setting);

}  // namespace vqg
