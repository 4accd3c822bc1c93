#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "vqg/autograd.hpp"

namespace vqg {

/// Hands out leaves to a graph builder. On the first build the leaves are
/// created with uniform(-1, 1) entries drawn from the seeded engine; later
/// builds replay the same leaves in request order so finite differences can
/// perturb them in place.
class LeafFactory {
 public:
  explicit LeafFactory(std::uint64_t seed) : rng_(seed) {}

  Value leaf(const Shape& shape);
  /// Leaf with entries drawn uniformly from [lo, hi).
  Value leaf(const Shape& shape, double lo, double hi);

  const std::vector<Value>& leaves() const { return leaves_; }
  void rewind() { cursor_ = 0; }

 private:
  std::mt19937_64 rng_;
  std::vector<Value> leaves_;
  std::size_t cursor_ = 0;
};

using GraphBuilder = std::function<Value(LeafFactory&)>;

struct GradcheckReport {
  double max_rel_error = 0.0;
  std::size_t entries_checked = 0;
};

inline constexpr double kGradcheckStep = 1e-5;

/// Compares backward() against central differences over every entry of
/// `leaves`. Error per entry is |analytic - numeric| / max(1, |analytic|,
/// |numeric|).
GradcheckReport gradcheck(const std::function<Value()>& loss,
                          std::vector<Value> leaves,
                          double step = kGradcheckStep);

/// Seeded form: the builder draws its leaves from a LeafFactory.
GradcheckReport gradcheck(const GraphBuilder& builder, std::uint64_t seed,
                          double step = kGradcheckStep);

}  // namespace vqg
