// SPDX-License-Identifier: Apache-2.0
//
// Training checkpoints as JSON: a schema header, the configs that built the
// network, every trainable array, the Adam moments, the data RNG state and
// the metrics history. Doubles are written with round-trip precision.

#pragma once

#include <fstream>
#include <sstream>
#include <string>

#include "spikediff/config.hpp"
#include "spikediff/training.hpp"

namespace spikediff::checkpoint {

using config::json;

inline constexpr std::string_view kSchema = "spikediff.checkpoint";
inline constexpr int kSchemaVersion = 1;

inline json metrics_to_json(const training::EpochMetrics& m) {
  auto num = [](double x) { return std::isfinite(x) ? json(x) : json(nullptr); };
  return {{"epoch", m.epoch},
          {"updates", m.updates},
          {"loss", num(m.loss)},
          {"accuracy", num(m.accuracy)},
          {"eval_loss", num(m.eval_loss)},
          {"eval_accuracy", num(m.eval_accuracy)},
          {"wall_time_s", m.wall_time_s},
          {"grad_norm", num(m.grad_norm)},
          {"skipped", m.skipped},
          {"rate_hz", m.rate_hz},
          {"v_min", m.v_min},
          {"v_max", m.v_max},
          {"v_violations", m.v_violations},
          {"lr", m.lr},
          {"memory_bytes", m.memory_bytes}};
}

inline training::EpochMetrics metrics_from_json(const json& j) {
  auto num = [&](const char* k) {
    return j.at(k).is_null() ? std::numeric_limits<double>::quiet_NaN() : j.at(k).get<double>();
  };
  training::EpochMetrics m;
  m.epoch = j.at("epoch").get<std::size_t>();
  m.updates = j.at("updates").get<std::size_t>();
  m.loss = num("loss");
  m.accuracy = num("accuracy");
  m.eval_loss = num("eval_loss");
  m.eval_accuracy = num("eval_accuracy");
  m.wall_time_s = j.at("wall_time_s").get<double>();
  m.grad_norm = num("grad_norm");
  m.skipped = j.at("skipped").get<std::size_t>();
  m.rate_hz = j.at("rate_hz").get<double>();
  m.v_min = j.at("v_min").get<double>();
  m.v_max = j.at("v_max").get<double>();
  m.v_violations = j.at("v_violations").get<std::size_t>();
  m.lr = j.at("lr").get<double>();
  m.memory_bytes = j.at("memory_bytes").get<std::size_t>();
  return m;
}

inline json to_json(const training::TrainState& s, std::uint64_t seed) {
  std::ostringstream rng;
  rng << s.rng;
  const auto& net = s.net;
  json j;
  j["schema"] = kSchema;
  j["schema_version"] = kSchemaVersion;
  j["artifact_version"] = kVersion;
  j["seed"] = seed;
  j["precision"] = net.config.precision == network::Precision::f32 ? "f32" : "f64";
  j["network"] = config::to_json(net.config);
  j["epoch"] = s.epoch;
  j["updates"] = s.updates;
  j["wall_time_s"] = s.wall_time_s;
  j["weights"] = {
      {"W_in", std::vector<double>(net.W_in.values().begin(), net.W_in.values().end())},
      {"W_rec", std::vector<double>(net.W_rec.values().begin(), net.W_rec.values().end())},
      {"W_rec_col_indices",
       std::vector<sparse::Index>(net.W_rec.col_indices().begin(), net.W_rec.col_indices().end())},
      {"W_rec_row_offsets",
       std::vector<sparse::Index>(net.W_rec.row_offsets().begin(), net.W_rec.row_offsets().end())},
      {"W_out", net.W_out.data},
      {"b_out", net.b_out}};
  j["adam"] = {{"m", s.adam.m},
               {"v", s.adam.v},
               {"step", s.adam.step},
               {"lr", s.adam.config.lr},
               {"beta1", s.adam.config.beta1},
               {"beta2", s.adam.config.beta2},
               {"eps", s.adam.config.eps},
               {"clip_norm", s.adam.config.clip_norm}};
  j["rng"] = rng.str();
  json hist = json::array();
  for (const auto& m : s.history) hist.push_back(metrics_to_json(m));
  j["history"] = hist;
  return j;
}

/// Rebuilds the network from the stored config (which fixes the sparsity
/// pattern), checks the pattern, then restores every array.
inline training::TrainState from_json(const json& j) {
  try {
    if (j.at("schema").get<std::string>() != kSchema) throw DataError("checkpoint: wrong schema");
    if (j.at("schema_version").get<int>() != kSchemaVersion)
      throw DataError("checkpoint: unsupported schema version");
    auto cfg = config::parse_network(j.at("network"));
    cfg.seed = j.at("seed").get<std::uint64_t>();
    cfg.precision = j.at("precision").get<std::string>() == "f32" ? network::Precision::f32
                                                                 : network::Precision::f64;
    training::TrainState s;
    s.net = network::build_network(cfg);
    const auto& w = j.at("weights");
    auto cols = w.at("W_rec_col_indices").get<std::vector<sparse::Index>>();
    auto offs = w.at("W_rec_row_offsets").get<std::vector<sparse::Index>>();
    if (!std::equal(cols.begin(), cols.end(), s.net.W_rec.col_indices().begin(),
                    s.net.W_rec.col_indices().end()) ||
        !std::equal(offs.begin(), offs.end(), s.net.W_rec.row_offsets().begin(),
                    s.net.W_rec.row_offsets().end()))
      throw DataError("checkpoint: recurrent pattern does not match the stored config");
    std::vector<double> flat;
    for (const char* k : {"W_in", "W_rec", "W_out", "b_out"}) {
      auto v = w.at(k).get<std::vector<double>>();
      flat.insert(flat.end(), v.begin(), v.end());
    }
    if (flat.size() != training::layout_of(s.net).size())
      throw DataError("checkpoint: weight array sizes do not match the network");
    training::unflatten(s.net, flat);
    if (!network::dale_holds(s.net)) throw DataError("checkpoint: negative stored weight");
    const auto& a = j.at("adam");
    s.adam.m = a.at("m").get<std::vector<double>>();
    s.adam.v = a.at("v").get<std::vector<double>>();
    if (s.adam.m.size() != flat.size() || s.adam.v.size() != flat.size())
      throw DataError("checkpoint: Adam moments do not match the parameter count");
    s.adam.step = a.at("step").get<std::size_t>();
    s.adam.config = {a.at("lr").get<double>(), a.at("beta1").get<double>(),
                     a.at("beta2").get<double>(), a.at("eps").get<double>(),
                     a.at("clip_norm").get<double>()};
    std::istringstream rng(j.at("rng").get<std::string>());
    rng >> s.rng;
    if (!rng) throw DataError("checkpoint: bad RNG state");
    s.epoch = j.at("epoch").get<std::size_t>();
    s.updates = j.at("updates").get<std::size_t>();
    s.wall_time_s = j.at("wall_time_s").get<double>();
    for (const auto& m : j.at("history")) s.history.push_back(metrics_from_json(m));
    return s;
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint: ") + e.what());
  } catch (const ConfigError& e) {
    throw DataError(std::string("checkpoint: ") + e.what());
  }
}

inline void save(const std::string& path, const training::TrainState& s, std::uint64_t seed) {
  std::ofstream out(path);
  if (!out) throw DataError("checkpoint: cannot write " + path);
  out << to_json(s, seed).dump() << '\n';
}

inline json read(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("checkpoint: cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError(std::string("checkpoint: ") + e.what());
  }
}

inline training::TrainState load(const std::string& path) { return from_json(read(path)); }

inline std::uint64_t load_seed(const std::string& path) {
  const json j = read(path);
  if (!j.contains("seed") || !j.at("seed").is_number_unsigned())
    throw DataError("checkpoint: missing seed");
  return j.at("seed").get<std::uint64_t>();
}

}  // namespace spikediff::checkpoint
