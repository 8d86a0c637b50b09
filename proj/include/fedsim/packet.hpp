#pragma once

#include <cstdint>
#include <vector>

#include "fedsim/tensor.hpp"

namespace fedsim {

// One client's gradients for every transmitted parameter block. Deliberately
// carries no user id, sub-population id, or embedding: the server must not be
// able to tell whose packet this is or which head the client used.
struct GradientPacket {
  std::vector<Tensor> encoder;
  std::vector<std::vector<Tensor>> heads;  // all sub-population heads, zeros when unused
  std::vector<Tensor> global_head;         // empty when the method has none
  std::vector<Tensor> kway_head;
  std::uint64_t round = 0;
  std::uint64_t packet_id = 0;  // anonymous per-round tag
};

template <typename Packet, typename Fn>
void for_each_tensor(Packet&& p, Fn&& fn) {
  for (auto& t : p.encoder) fn(t);
  for (auto& h : p.heads)
    for (auto& t : h) fn(t);
  for (auto& t : p.global_head) fn(t);
  for (auto& t : p.kway_head) fn(t);
}

std::size_t packet_entry_count(const GradientPacket& p);
double packet_l2_norm(const GradientPacket& p);

// Flattens every block into one vector (gradient-space clustering).
Tensor packet_flatten(const GradientPacket& p);

// Wire form of a packet; this is everything a server ever receives from a
// client, so its key set doubles as the privacy audit surface.
std::string packet_to_json(const GradientPacket& p);

}  // namespace fedsim
