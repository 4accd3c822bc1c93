#include "vqg/losses.hpp"

#include "vqg/errors.hpp"

namespace vqg {

void LossWeights::validate() const {
  if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0)) {
    throw ValidationError("loss weights must be non-negative");
  }
  if (!(epsilon > 0.0 && epsilon < 1e-3)) {
    throw ValidationError("epsilon must lie in (0, 1e-3)");
  }
}

SupervisionPattern pattern_of(SupervisionSetting setting) {
  switch (setting) {
    case SupervisionSetting::kQaOnly: return {false, false};
    case SupervisionSetting::kQaSelf: return {false, true};
    case SupervisionSetting::kFull: return {true, false};
    case SupervisionSetting::kFullSelf: return {true, true};
  }
  return {};
}

SupervisionSetting parse_setting(const std::string& text) {
  if (text == "qa") return SupervisionSetting::kQaOnly;
  if (text == "qa+self") return SupervisionSetting::kQaSelf;
  if (text == "full") return SupervisionSetting::kFull;
  if (text == "full+self") return SupervisionSetting::kFullSelf;
  throw ValidationError("unknown supervision setting '" + text +
                        "' (expected qa, qa+self, full, full+self)");
}

std::string to_string(SupervisionSetting setting) {
  switch (setting) {
    case SupervisionSetting::kQaOnly: return "qa";
    case SupervisionSetting::kQaSelf: return "qa+self";
    case SupervisionSetting::kFull: return "full";
    case SupervisionSetting::kFullSelf: return "full+self";
  }
  return "?";
}

Value loss_qa(const Value& scores, std::size_t gt_index, double epsilon) {
  if (scores.shape().size() != 1) {
    throw ShapeError("loss_qa: scores must be rank 1, got " +
                     shape_str(scores.shape()));
  }
  if (gt_index >= scores.shape()[0]) {
    throw ValidationError("loss_qa: gt_index " + std::to_string(gt_index) +
                          " out of range");
  }
  Value logp = log(clamp(softmax(scores, 0), epsilon, 1.0));
  return scale(select(logp, gt_index), -1.0);
}

Value loss_span(const Value& p_st, const Value& p_ed, const Span& gt,
                double epsilon) {
  if (p_st.shape().size() != 1 || p_st.shape() != p_ed.shape()) {
    throw ShapeError("loss_span: expected two rank-1 distributions, got " +
                     shape_str(p_st.shape()) + " and " + shape_str(p_ed.shape()));
  }
  const std::size_t frames = p_st.shape()[0];
  if (gt.st > gt.ed || gt.ed >= frames) {
    throw ValidationError("loss_span: gt span " + to_string(gt) +
                          " outside grid of " + std::to_string(frames));
  }
  Value log_st = select(log(clamp(p_st, epsilon, 1.0)), gt.st);
  Value log_ed = select(log(clamp(p_ed, epsilon, 1.0)), gt.ed);
  return scale(add(log_st, log_ed), -0.5);
}

namespace {

struct Partition {
  Tensor inside;   // mask / T_in
  Tensor outside;  // (1 - mask) / T_out
  std::size_t n_in = 0;
  std::size_t n_out = 0;
};

Partition partition(const char* op, const Value& attention, const Mask& mask) {
  if (attention.shape().size() != 1 || attention.shape()[0] != mask.size()) {
    throw ShapeError(std::string(op) + ": trace " +
                     shape_str(attention.shape()) + " vs mask of length " +
                     std::to_string(mask.size()));
  }
  Partition p;
  for (auto m : mask) (m ? p.n_in : p.n_out) += 1;
  p.inside = Tensor({mask.size()});
  p.outside = Tensor({mask.size()});
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) {
      p.inside[i] = 1.0 / static_cast<double>(p.n_in);
    } else {
      p.outside[i] = 1.0 / static_cast<double>(p.n_out);
    }
  }
  return p;
}

Value weighted_sum(const Value& x, const Tensor& w) {
  return sum_all(mul(x, Value::constant(w)));
}

}  // namespace

MaskedLoss loss_rank(const Value& attention, const Mask& mask) {
  const Partition p = partition("loss_rank", attention, mask);
  if (p.n_in == 0 || p.n_out == 0) {
    return {Value::constant(Tensor::scalar(0.0)), true};
  }
  Value out_avg = weighted_sum(attention, p.outside);
  Value in_avg = weighted_sum(attention, p.inside);
  Value one = Value::constant(Tensor::scalar(1.0));
  return {sub(add(one, out_avg), in_avg), false};
}

MaskedLoss loss_bce(const Value& attention, const Mask& mask, double epsilon) {
  const Partition p = partition("loss_bce", attention, mask);
  Value a = clamp(attention, epsilon, 1.0 - epsilon);
  Value total = Value::constant(Tensor::scalar(0.0));
  if (p.n_in > 0) {
    total = sub(total, weighted_sum(log(a), p.inside));
  }
  if (p.n_out > 0) {
    Value ones = Value::constant(Tensor::full(attention.shape(), 1.0));
    total = sub(total, weighted_sum(log(sub(ones, a)), p.outside));
  }
  return {total, p.n_in == 0 || p.n_out == 0};
}

Value loss_self(const Value& traces, const std::vector<Mask>& masks,
                double epsilon) {
  if (!traces.defined() || masks.empty()) {
    return Value::constant(Tensor::scalar(0.0));
  }
  if (traces.shape().size() != 2 || traces.shape()[0] != masks.size()) {
    throw ShapeError("loss_self: traces " + shape_str(traces.shape()) +
                     " vs " + std::to_string(masks.size()) + " masks");
  }
  Value total = Value::constant(Tensor::scalar(0.0));
  for (std::size_t j = 0; j < masks.size(); ++j) {
    Value row = select(traces, j);
    total = add(total, add(loss_rank(row, masks[j]).value,
                           loss_bce(row, masks[j], epsilon).value));
  }
  return scale(total, 1.0 / static_cast<double>(masks.size()));
}

Value total_loss(const Value& qa, const Value& span, const Value& self,
                 const LossWeights& weights, SupervisionSetting setting) {
  const SupervisionPattern active = pattern_of(setting);
  Value loss = qa;
  if (active.span) {
    if (!span.defined()) throw std::invalid_argument("total_loss: span loss missing");
    loss = add(loss, scale(span, weights.lambda1));
  }
  if (active.self) {
    if (!self.defined()) throw std::invalid_argument("total_loss: self loss missing");
    loss = add(loss, scale(self, weights.lambda2));
  }
  return loss;
}

}  // namespace vqg
