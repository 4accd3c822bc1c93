#include "vqg/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace vqg {

Value LeafFactory::leaf(const Shape& shape) { return leaf(shape, -1.0, 1.0); }

Value LeafFactory::leaf(const Shape& shape, double lo, double hi) {
  if (cursor_ < leaves_.size()) {
    const Value& v = leaves_[cursor_++];
    if (v.shape() != shape) {
      throw ShapeError("LeafFactory: replay requested " + shape_str(shape) +
                       " but leaf " + std::to_string(cursor_ - 1) + " is " +
                       shape_str(v.shape()));
    }
    return v;
  }
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(shape);
  for (double& x : t.data()) x = dist(rng_);
  leaves_.push_back(Value::parameter(std::move(t)));
  ++cursor_;
  return leaves_.back();
}

GradcheckReport gradcheck(const std::function<Value()>& loss,
                          std::vector<Value> leaves, double step) {
  for (auto& leaf : leaves) leaf.zero_grad();
  Value root = loss();
  backward(root);

  GradcheckReport report;
  for (auto& leaf : leaves) {
    const Tensor analytic = leaf.grad();
    Tensor& data = leaf.leaf_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + step;
      const double up = loss().item();
      data[i] = saved - step;
      const double down = loss().item();
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[i];
      const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
      report.max_rel_error =
          std::max(report.max_rel_error, std::abs(a - numeric) / denom);
      ++report.entries_checked;
    }
  }
  return report;
}

GradcheckReport gradcheck(const GraphBuilder& builder, std::uint64_t seed,
                          double step) {
  LeafFactory factory(seed);
  builder(factory);
  auto loss = [&] {
    factory.rewind();
    return builder(factory);
  };
  return gradcheck(loss, factory.leaves(), step);
}

}  // namespace vqg
