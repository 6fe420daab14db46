#pragma once

// JSON model files.
//
//   {"format_version": 1, "arch": "EncDecAttention", "vocab_size": 10,
//    "layers": [{"id": 0, "kind": "Bias", "size": 1, "name": "bias"}, ...],
//    "connections": [{"from": 1, "to": 2, "tag": "plain", "weights": [[...], ...]}]}
//
// Doubles are written in shortest round-trip form, so save/load is bit-exact.
// Unfolded networks additionally carry "member_sizes" and "member_parameters".

#include "foldnet/forward.hpp"
#include "foldnet/network.hpp"

#include <json.hpp>

#include <fstream>
#include <sstream>
#include <string>

namespace foldnet {

using json = nlohmann::json;

class ModelFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kFormatVersion = 1;

inline json matrix_to_json(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline json to_json(const Network& net) {
  json j;
  j["format_version"] = kFormatVersion;
  j["arch"] = to_string(net.arch);
  j["vocab_size"] = net.vocab_size;
  json layers = json::array();
  for (const auto& l : net.layers) {
    json jl = {{"id", l.id}, {"kind", to_string(l.kind)}, {"size", l.size}};
    if (l.kind == LayerKind::Dense || l.kind == LayerKind::Output) jl["activation"] = to_string(l.activation);
    if (!l.name.empty()) jl["name"] = l.name;
    layers.push_back(std::move(jl));
  }
  j["layers"] = std::move(layers);
  json conns = json::array();
  for (const auto& c : net.connections) {
    conns.push_back({{"from", c.from}, {"to", c.to}, {"tag", to_string(c.tag)}, {"weights", matrix_to_json(c.weights)}});
  }
  j["connections"] = std::move(conns);
  if (!net.member_sizes.empty()) {
    j["member_sizes"] = net.member_sizes;
    j["member_parameters"] = net.member_parameters;
  }
  return j;
}

namespace detail {

inline const json& field(const json& obj, const char* key, const std::string& where) {
  if (!obj.is_object() || !obj.contains(key)) throw ModelFormatError(where + ": missing field \"" + key + "\"");
  return obj.at(key);
}

inline int int_field(const json& obj, const char* key, const std::string& where) {
  const json& v = field(obj, key, where);
  if (!v.is_number_integer()) throw ModelFormatError(where + ": field \"" + key + "\" must be an integer");
  return v.get<int>();
}

inline std::string string_field(const json& obj, const char* key, const std::string& where) {
  const json& v = field(obj, key, where);
  if (!v.is_string()) throw ModelFormatError(where + ": field \"" + key + "\" must be a string");
  return v.get<std::string>();
}

}  // namespace detail

inline Network from_json(const json& j) {
  using detail::field;
  using detail::int_field;
  using detail::string_field;
  if (!j.is_object()) throw ModelFormatError("model: top level must be an object");
  const int version = int_field(j, "format_version", "model");
  if (version != kFormatVersion) throw ModelFormatError("model: unsupported format_version " + std::to_string(version));

  Network net;
  const std::string arch = string_field(j, "arch", "model");
  auto parsed_arch = parse_arch(arch);
  if (!parsed_arch) throw ModelFormatError("model: unknown arch \"" + arch + "\"");
  net.arch = *parsed_arch;
  net.vocab_size = int_field(j, "vocab_size", "model");

  const json& layers = field(j, "layers", "model");
  if (!layers.is_array()) throw ModelFormatError("model: field \"layers\" must be an array");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string where = "layer " + std::to_string(i);
    const json& jl = layers[i];
    LayerSpec l;
    l.id = int_field(jl, "id", where);
    const std::string kind = string_field(jl, "kind", where);
    auto k = parse_layer_kind(kind);
    if (!k) throw ModelFormatError(where + ": unknown kind \"" + kind + "\"");
    l.kind = *k;
    l.size = int_field(jl, "size", where);
    if (jl.contains("activation")) {
      const std::string act = string_field(jl, "activation", where);
      auto a = parse_activation(act);
      if (!a) throw ModelFormatError(where + ": unknown activation \"" + act + "\"");
      l.activation = *a;
    } else if (l.kind == LayerKind::AttentionScore) {
      l.activation = Activation::Tanh;
    }
    if (jl.contains("name")) l.name = string_field(jl, "name", where);
    net.layers.push_back(std::move(l));
  }

  const json& conns = field(j, "connections", "model");
  if (!conns.is_array()) throw ModelFormatError("model: field \"connections\" must be an array");
  for (std::size_t i = 0; i < conns.size(); ++i) {
    const json& jc = conns[i];
    Connection c;
    c.from = int_field(jc, "from", "connection " + std::to_string(i));
    c.to = int_field(jc, "to", "connection " + std::to_string(i));
    const std::string where = connection_label(c.from, c.to);
    const std::string tag = jc.contains("tag") ? string_field(jc, "tag", where) : "plain";
    auto t = parse_tag(tag);
    if (!t) throw ModelFormatError(where + ": unknown tag \"" + tag + "\"");
    c.tag = *t;
    const json& w = field(jc, "weights", where);
    if (!w.is_array() || w.empty()) throw ModelFormatError(where + ": field \"weights\" must be a non-empty array of rows");
    const auto rows = static_cast<Eigen::Index>(w.size());
    const auto cols = static_cast<Eigen::Index>(w[0].is_array() ? w[0].size() : 0);
    c.weights.resize(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
      const json& row = w[static_cast<std::size_t>(r)];
      if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols) {
        throw ModelFormatError(where + ": weights row " + std::to_string(r) + " has inconsistent length");
      }
      for (Eigen::Index col = 0; col < cols; ++col) {
        const json& v = row[static_cast<std::size_t>(col)];
        if (!v.is_number()) throw ModelFormatError(where + ": non-numeric weight at [" + std::to_string(r) + "][" + std::to_string(col) + "]");
        c.weights(r, col) = v.get<double>();
      }
    }
    net.connections.push_back(std::move(c));
  }
  if (j.contains("member_sizes")) {
    net.member_sizes = j.at("member_sizes").get<std::vector<int>>();
    net.member_parameters = j.value("member_parameters", std::size_t{0});
  }

  try {
    validate(net);
    if (net.arch != Arch::Feedforward) SeqLayout::of(net);
  } catch (const NetworkError& e) {
    throw ModelFormatError(e.what());
  }
  return net;
}

inline std::string serialize(const Network& net) { return to_json(net).dump(); }

inline Network parse_model(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ModelFormatError(std::string("model: invalid JSON (") + e.what() + ")");
  }
  return from_json(j);
}

inline void save_model(const Network& net, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << serialize(net) << '\n';
  if (!out) throw std::runtime_error("failed writing " + path);
}

inline Network load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_model(ss.str());
}

}  // namespace foldnet
