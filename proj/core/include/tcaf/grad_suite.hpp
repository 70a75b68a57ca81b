#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "tcaf/arch_config.hpp"
#include "tcaf/grad_check.hpp"

// Finite-difference checks of every differentiable primitive and of a small
// end-to-end model with all three losses, in double precision.
namespace tcaf {

using NamedReport = std::pair<std::string, GradCheckReport>;

std::vector<NamedReport> primitive_grad_checks(std::uint64_t seed, const GradCheckOptions& options = {});

/// One-layer model (d_dim=8, H=2, d_head=4 unless overridden), three clips of
/// T_a=T_v=3 tokens, train mode with fixed dropout masks, all losses on.
ArchConfig grad_check_arch();
GradCheckReport model_grad_check(std::uint64_t seed, const ArchConfig& arch = grad_check_arch(),
                                 const GradCheckOptions& options = {});

}  // namespace tcaf
