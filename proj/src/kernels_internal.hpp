#pragma once

#include "kvatlas/sae.hpp"

namespace kvatlas::kernels {

/// Gate used during training: top-k_train for TopK, every positive unit for L1.
LatentCode training_gate(const SaeModel& model, std::span<const double> z_pre);

}  // namespace kvatlas::kernels
