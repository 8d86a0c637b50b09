#include "fedsim/privacy.hpp"

#include <cmath>

#include "json.hpp"

#include "fedsim/errors.hpp"

namespace fedsim {

void DPConfig::validate() const {
  if (!enabled) return;
  if (!(clip_norm > 0.0)) throw ConfigError("dp.clip_norm must be positive when dp is enabled");
  if (noise_multiplier < 0.0) throw ConfigError("dp.noise_multiplier must be non-negative");
}

std::size_t packet_entry_count(const GradientPacket& p) {
  std::size_t n = 0;
  for_each_tensor(p, [&](const Tensor& t) { n += t.numel(); });
  return n;
}

double packet_l2_norm(const GradientPacket& p) {
  double acc = 0.0;
  for_each_tensor(p, [&](const Tensor& t) {
    for (double v : t.data) acc += v * v;
  });
  return std::sqrt(acc);
}

Tensor packet_flatten(const GradientPacket& p) {
  Tensor out({packet_entry_count(p)});
  std::size_t i = 0;
  for_each_tensor(p, [&](const Tensor& t) {
    for (double v : t.data) out.data[i++] = v;
  });
  return out;
}

std::string packet_to_json(const GradientPacket& p) {
  nlohmann::json j;
  j["round"] = p.round;
  j["packet_id"] = p.packet_id;
  auto block = [](const std::vector<Tensor>& ts) {
    nlohmann::json arr = nlohmann::json::array();
    for (const Tensor& t : ts) arr.push_back({{"shape", t.shape}, {"data", t.data}});
    return arr;
  };
  j["encoder"] = block(p.encoder);
  nlohmann::json heads = nlohmann::json::array();
  for (const auto& h : p.heads) heads.push_back(block(h));
  j["heads"] = heads;
  j["global_head"] = block(p.global_head);
  j["kway_head"] = block(p.kway_head);
  return j.dump();
}

bool clip_packet(GradientPacket& packet, double clip_norm) {
  if (!(clip_norm > 0.0)) throw UsageError("clip_packet: clip norm must be positive");
  const double norm = packet_l2_norm(packet);
  if (norm <= clip_norm) return false;
  const double s = clip_norm / norm;
  for_each_tensor(packet, [&](Tensor& t) { scale_inplace(t, s); });
  return true;
}

void gaussianize(GradientPacket& packet, double noise_multiplier, double clip_norm, Rng& rng) {
  if (noise_multiplier == 0.0) return;
  const double stddev = noise_multiplier * clip_norm;
  for_each_tensor(packet, [&](Tensor& t) {
    for (double& v : t.data) v += stddev * rng.normal();
  });
}

}  // namespace fedsim
