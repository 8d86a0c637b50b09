#pragma once

#include <cstdint>

#include "fedsim/packet.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

// Gaussian mechanism settings. Noise defaults to the client side; the
// server-side site exists but is off so gradients are not noised twice.
struct DPConfig {
  bool enabled = false;
  double clip_norm = 1.0;        // C
  double noise_multiplier = 0.5; // sigma
  bool server_side = false;

  void validate() const;
};

// Scales the whole packet so its global L2 norm is at most C. Returns true
// when scaling happened.
bool clip_packet(GradientPacket& packet, double clip_norm);

// Adds iid Normal(0, (sigma * C)^2) to every entry, including the zero blocks
// of unused heads, so head usage is not observable from the packet.
void gaussianize(GradientPacket& packet, double noise_multiplier, double clip_norm, Rng& rng);

}  // namespace fedsim
