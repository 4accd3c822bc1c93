#pragma once

// Gradient checks shared by the CLI, the unit tests and the acceptance run.

#include <cstdint>
#include <string>
#include <vector>

#include "vqg/gradcheck.hpp"
#include "vqg/losses.hpp"
#include "vqg/model.hpp"

namespace vqg {

struct NamedCheck {
  std::string name;
  GraphBuilder build;  // returns a scalar
};

/// One builder per differentiable op (and per axis/variant where the
/// backward rule differs).
const std::vector<NamedCheck>& op_checks();

/// Micro instance: T=4, N_o=2, L=3, d=8, raw width 4, two subtitle proposals.
struct MicroInstance {
  RawFeatures raw;
  std::vector<Mask> proposal_masks;
  std::size_t gt_answer = 0;
  Span gt_span;
};

MicroInstance make_micro_instance(std::uint64_t seed);

/// Checks every model parameter through the total loss of `setting` on a
/// micro instance.
GradcheckReport model_gradcheck(std::uint64_t seed,
                                SupervisionSetting setting = SupervisionSetting::kFullSelf,
                                const ModelOptions& opts = {});

struct SuiteEntry {
  std::string name;
  GradcheckReport report;
};

/// All op checks plus the model check for one seed.
std::vector<SuiteEntry> run_gradcheck_suite(std::uint64_t seed);

}  // namespace vqg
