#include <fstream>

#include "json.hpp"

#include "fedsim/errors.hpp"
#include "fedsim/federation.hpp"

namespace fedsim {

namespace {

using nlohmann::json;

json tensor_json(const Tensor& t) { return json{{"shape", t.shape}, {"data", t.data}}; }

void tensor_load(const json& j, Tensor& into, const std::string& what) {
  const auto shape = j.at("shape").get<std::vector<std::size_t>>();
  if (shape != into.shape)
    throw DataError("checkpoint: " + what + " shape " + shape_str(shape) +
                    " does not match the configured model " + shape_str(into.shape));
  into.data = j.at("data").get<std::vector<double>>();
  if (into.data.size() != Tensor::numel_of(shape))
    throw DataError("checkpoint: " + what + " data length mismatch");
}

json tensors_json(const std::vector<Tensor>& ts) {
  json arr = json::array();
  for (const Tensor& t : ts) arr.push_back(tensor_json(t));
  return arr;
}

void tensors_load(const json& j, std::vector<Tensor>& into, const std::string& what) {
  if (j.size() != into.size())
    throw DataError("checkpoint: " + what + " tensor count mismatch");
  for (std::size_t i = 0; i < into.size(); ++i)
    tensor_load(j.at(i), into[i], what + "[" + std::to_string(i) + "]");
}

json adam_json(const AdamState& a) {
  return json{{"step", a.step}, {"m", tensors_json(a.m)}, {"v", tensors_json(a.v)}};
}

void adam_load(const json& j, AdamState& a, const std::string& what) {
  a.step = j.at("step").get<std::uint64_t>();
  tensors_load(j.at("m"), a.m, what + ".m");
  tensors_load(j.at("v"), a.v, what + ".v");
}

constexpr const char* kMagic = "fedsim-checkpoint";

}  // namespace

void save_checkpoint(const std::string& path, const std::string& format,
                     const ServerState& server, const std::vector<UserState>& users) {
  json j;
  j["magic"] = kMagic;
  j["version"] = 1;
  j["round"] = server.round;

  json model;
  model["encoder"] = tensors_json(server.params.encoder.params);
  json heads = json::array();
  for (const Network& h : server.params.subpop_heads) heads.push_back(tensors_json(h.params));
  model["heads"] = heads;
  model["global_head"] = server.params.global_pref_head
                             ? tensors_json(server.params.global_pref_head->params)
                             : json();
  model["kway_head"] =
      server.params.kway_head ? tensors_json(server.params.kway_head->params) : json();
  j["model"] = model;
  j["central_opt"] = adam_json(server.central_opt);

  if (server.som) {
    j["som"] = {{"rows", server.som->rows},       {"cols", server.som->cols},
                {"lr0", server.som->lr0},         {"radius0", server.som->radius0},
                {"tau", server.som->tau},         {"iteration", server.som->iteration},
                {"nodes", tensors_json(server.som->nodes)}};
  } else {
    j["som"] = json();
  }
  if (server.prototypes) {
    j["prototypes"] = {{"margin", server.prototypes->margin},
                       {"vectors", tensors_json(server.prototypes->prototypes)}};
  } else {
    j["prototypes"] = json();
  }
  j["pfedme_reference"] =
      server.pfedme_reference ? tensors_json(server.pfedme_reference->params) : json();
  j["members_at_last_remap"] = server.members_at_last_remap;

  json us = json::array();
  for (const UserState& u : users) {
    json ju;
    ju["user_id"] = u.user_id;
    ju["true_subpop"] = u.true_subpop;
    ju["assigned_head"] = u.assigned_head;
    ju["embedding"] = tensor_json(u.embedding.vector);
    ju["embed_opt"] = adam_json(u.embed_opt);
    ju["local_head"] = u.local_head ? tensors_json(u.local_head->params) : json();
    ju["local_head_opt"] = u.local_head ? adam_json(u.local_head_opt) : json();
    us.push_back(std::move(ju));
  }
  j["users"] = us;

  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write checkpoint: " + path);
  if (format == "json") {
    f << j.dump();
  } else if (format == "binary") {
    const auto bytes = json::to_cbor(j);
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  } else {
    throw ConfigError("unknown checkpoint format: " + format);
  }
  if (!f.good()) throw DataError("checkpoint write failed: " + path);
}

void load_checkpoint(const std::string& path, ServerState& server,
                     std::vector<UserState>& users) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint: " + path);
  json j;
  const int first = f.peek();
  try {
    if (first == '{') {
      f >> j;
    } else {
      std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                      std::istreambuf_iterator<char>());
      j = json::from_cbor(bytes);
    }
  } catch (const json::exception& e) {
    throw DataError("checkpoint " + path + " is unreadable: " + e.what());
  }
  if (!j.contains("magic") || j.at("magic") != kMagic)
    throw DataError("checkpoint " + path + " has the wrong magic");
  if (j.at("version").get<int>() != 1)
    throw DataError("checkpoint " + path + " has unsupported version");

  server.round = j.at("round").get<std::uint64_t>();
  const json& model = j.at("model");
  tensors_load(model.at("encoder"), server.params.encoder.params, "encoder");
  const json& heads = model.at("heads");
  if (heads.size() != server.params.subpop_heads.size())
    throw DataError("checkpoint: head count mismatch");
  for (std::size_t h = 0; h < heads.size(); ++h)
    tensors_load(heads.at(h), server.params.subpop_heads[h].params,
                 "head " + std::to_string(h));
  if (!model.at("global_head").is_null())
    tensors_load(model.at("global_head"), server.params.global_pref_head->params, "global head");
  if (!model.at("kway_head").is_null())
    tensors_load(model.at("kway_head"), server.params.kway_head->params, "kway head");
  adam_load(j.at("central_opt"), server.central_opt, "central_opt");

  if (!j.at("som").is_null() != server.som.has_value())
    throw DataError("checkpoint clustering state does not match the configured method (SOM)");
  if (!j.at("prototypes").is_null() != server.prototypes.has_value())
    throw DataError("checkpoint clustering state does not match the configured method (prototypes)");
  if (!j.at("pfedme_reference").is_null() != server.pfedme_reference.has_value())
    throw DataError("checkpoint reference head does not match the configured method");

  if (!j.at("som").is_null()) {
    const json& s = j.at("som");
    server.som->rows = s.at("rows").get<std::size_t>();
    server.som->cols = s.at("cols").get<std::size_t>();
    server.som->lr0 = s.at("lr0").get<double>();
    server.som->radius0 = s.at("radius0").get<double>();
    server.som->tau = s.at("tau").get<double>();
    server.som->iteration = s.at("iteration").get<std::uint64_t>();
    tensors_load(s.at("nodes"), server.som->nodes, "som nodes");
  }
  if (!j.at("prototypes").is_null()) {
    server.prototypes->margin = j.at("prototypes").at("margin").get<double>();
    tensors_load(j.at("prototypes").at("vectors"), server.prototypes->prototypes, "prototypes");
  }
  if (!j.at("pfedme_reference").is_null())
    tensors_load(j.at("pfedme_reference"), server.pfedme_reference->params, "pfedme reference");
  server.members_at_last_remap =
      j.at("members_at_last_remap").get<std::vector<std::size_t>>();

  const json& us = j.at("users");
  if (us.size() != users.size())
    throw DataError("checkpoint user count " + std::to_string(us.size()) +
                    " does not match the configured population " + std::to_string(users.size()));
  for (std::size_t i = 0; i < users.size(); ++i) {
    const json& ju = us.at(i);
    if (ju.at("user_id").get<std::uint64_t>() != users[i].user_id)
      throw DataError("checkpoint: user order mismatch at index " + std::to_string(i));
    users[i].assigned_head = ju.at("assigned_head").get<std::size_t>();
    tensor_load(ju.at("embedding"), users[i].embedding.vector, "embedding");
    adam_load(ju.at("embed_opt"), users[i].embed_opt, "embed_opt");
    if (!ju.at("local_head").is_null()) {
      tensors_load(ju.at("local_head"), users[i].local_head->params, "local head");
      adam_load(ju.at("local_head_opt"), users[i].local_head_opt, "local_head_opt");
    }
  }
}

}  // namespace fedsim
