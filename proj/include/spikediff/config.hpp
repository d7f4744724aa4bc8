// SPDX-License-Identifier: Apache-2.0
//
// JSON configuration: parsing with unknown-key rejection, and serialization
// of the same structures for checkpoints and output sidecars.

#pragma once

#include <cstdint>
#include <fstream>
#include <initializer_list>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "spikediff/common.hpp"
#include "spikediff/fitting/multistart.hpp"
#include "spikediff/network.hpp"
#include "spikediff/training.hpp"

namespace spikediff::config {

using json = nlohmann::json;

namespace detail {

/// Reads fields from one JSON object and rejects keys nobody asked for.
class Obj {
 public:
  Obj(const json& j, std::string ctx) : j_(j), ctx_(std::move(ctx)) {
    if (!j_.is_object()) throw ConfigError(ctx_ + ": expected an object");
  }

  bool has(const std::string& k) {
    seen_.insert(k);
    return j_.contains(k);
  }

  template <class T>
  T get(const std::string& k, T fallback) {
    if (!has(k)) return fallback;
    try {
      return j_.at(k).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(ctx_ + "." + k + ": " + e.what());
    }
  }

  template <class T>
  T require(const std::string& k) {
    if (!has(k)) throw ConfigError(ctx_ + ": missing key '" + k + "'");
    return get<T>(k, T{});
  }

  const json& at(const std::string& k) {
    seen_.insert(k);
    return j_.at(k);
  }

  std::string path(const std::string& k) const { return ctx_ + "." + k; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError(ctx_ + ": unknown key '" + it.key() + "'");
  }

 private:
  const json& j_;
  std::string ctx_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline json load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Shared pieces

inline surrogate::SurrogateSpec parse_surrogate(const json& j, surrogate::SurrogateSpec s = {}) {
  detail::Obj o(j, "surrogate");
  if (o.has("kind")) s.kind = surrogate::kind_from_name(o.get<std::string>("kind", ""));
  s.alpha = o.get("alpha", s.alpha);
  s.width = o.get("width", s.width);
  o.finish();
  surrogate::validate(s);
  return s;
}

inline json to_json(const surrogate::SurrogateSpec& s) {
  return {{"kind", surrogate::kind_name(s.kind)}, {"alpha", s.alpha}, {"width", s.width}};
}

inline dynamics::GifParams parse_gif(const json& j, dynamics::GifParams p) {
  detail::Obj o(j, "gif");
  p.tau_I1 = o.get("tau_I1", p.tau_I1);
  p.tau_I2 = o.get("tau_I2", p.tau_I2);
  p.tau_V = o.get("tau_V", p.tau_V);
  p.R = o.get("R", p.R);
  p.V_rest = o.get("V_rest", p.V_rest);
  p.V_th = o.get("V_th", p.V_th);
  p.A1 = o.get("A1", p.A1);
  p.A2 = o.get("A2", p.A2);
  o.finish();
  dynamics::validate(p);
  return p;
}

inline json to_json(const dynamics::GifParams& p) {
  return {{"tau_I1", p.tau_I1}, {"tau_I2", p.tau_I2}, {"tau_V", p.tau_V}, {"R", p.R},
          {"V_rest", p.V_rest}, {"V_th", p.V_th},     {"A1", p.A1},       {"A2", p.A2}};
}

inline dynamics::HhParams parse_hh(const json& j, dynamics::HhParams p) {
  detail::Obj o(j, "hh");
  p.gNa = o.get("gNa", p.gNa);
  p.gK = o.get("gK", p.gK);
  p.gL = o.get("gL", p.gL);
  p.ENa = o.get("ENa", p.ENa);
  p.EK = o.get("EK", p.EK);
  p.EL = o.get("EL", p.EL);
  p.C = o.get("C", p.C);
  o.finish();
  dynamics::validate(p);
  return p;
}

inline json to_json(const dynamics::HhParams& p) {
  return {{"gNa", p.gNa}, {"gK", p.gK}, {"gL", p.gL}, {"ENa", p.ENa},
          {"EK", p.EK},   {"EL", p.EL}, {"C", p.C}};
}

// ---------------------------------------------------------------------------
// Network and task

inline network::EiNetworkConfig parse_network(const json& j, network::EiNetworkConfig c = {}) {
  detail::Obj o(j, "network");
  c.n_rec = o.get("n_rec", c.n_rec);
  c.n_in = o.get("n_in", c.n_in);
  if (o.has("ei_ratio")) {
    auto r = o.get<std::vector<long long>>("ei_ratio", {});
    if (r.size() != 2 || r[0] <= 0 || r[1] <= 0)
      throw ConfigError("network.ei_ratio: expected two positive integers [E, I]");
    c.ei_exc = static_cast<std::size_t>(r[0]);
    c.ei_inh = static_cast<std::size_t>(r[1]);
  }
  c.conn_prob = o.get("conn_prob", c.conn_prob);
  c.tau_out = o.get("tau_out", c.tau_out);
  c.dt = o.get("dt", c.dt);
  if (o.has("neuron")) c.neuron = parse_gif(o.at("neuron"), c.neuron);
  if (o.has("synapse")) {
    detail::Obj s(o.at("synapse"), "network.synapse");
    c.synapse.tau_syn = s.get("tau_syn", c.synapse.tau_syn);
    c.synapse.E_exc = s.get("E_exc", c.synapse.E_exc);
    c.synapse.E_inh = s.get("E_inh", c.synapse.E_inh);
    s.finish();
  }
  if (o.has("init")) {
    detail::Obj s(o.at("init"), "network.init");
    c.init.s_exc = s.get("s_exc", c.init.s_exc);
    c.init.s_inh = s.get("s_inh", c.init.s_inh);
    c.init.readout_scale = s.get("readout_scale", c.init.readout_scale);
    s.finish();
  }
  if (o.has("surrogate")) c.surrogate = parse_surrogate(o.at("surrogate"), c.surrogate);
  o.finish();
  network::validate(c);
  return c;
}

inline json to_json(const network::EiNetworkConfig& c) {
  return {{"n_rec", c.n_rec},
          {"n_in", c.n_in},
          {"ei_ratio", {c.ei_exc, c.ei_inh}},
          {"conn_prob", c.conn_prob},
          {"tau_out", c.tau_out},
          {"dt", c.dt},
          {"neuron", to_json(c.neuron)},
          {"synapse",
           {{"tau_syn", c.synapse.tau_syn}, {"E_exc", c.synapse.E_exc}, {"E_inh", c.synapse.E_inh}}},
          {"init",
           {{"s_exc", c.init.s_exc},
            {"s_inh", c.init.s_inh},
            {"readout_scale", c.init.readout_scale}}},
          {"surrogate", to_json(c.surrogate)}};
}

inline network::TaskConfig parse_task(const json& j) {
  detail::Obj o(j, "task");
  network::TaskConfig t;
  const auto preset = o.get<std::string>("preset", "full");
  if (preset == "desk") t = network::desk_task();
  else if (preset != "full") throw ConfigError("task.preset: expected 'full' or 'desk'");
  t.n_cues = o.get("n_cues", t.n_cues);
  t.cue_ms = o.get("cue_ms", t.cue_ms);
  t.gap_ms = o.get("gap_ms", t.gap_ms);
  t.accumulation_ms = o.get("accumulation_ms", t.accumulation_ms);
  t.recall_ms = o.get("recall_ms", t.recall_ms);
  t.cue_rate_hz = o.get("cue_rate_hz", t.cue_rate_hz);
  t.recall_rate_hz = o.get("recall_rate_hz", t.recall_rate_hz);
  t.noise_rate_hz = o.get("noise_rate_hz", t.noise_rate_hz);
  t.dt = o.get("dt", t.dt);
  o.finish();
  network::validate(t);
  return t;
}

inline json to_json(const network::TaskConfig& t) {
  return {{"n_cues", t.n_cues},
          {"cue_ms", t.cue_ms},
          {"gap_ms", t.gap_ms},
          {"accumulation_ms", t.accumulation_ms},
          {"recall_ms", t.recall_ms},
          {"cue_rate_hz", t.cue_rate_hz},
          {"recall_rate_hz", t.recall_rate_hz},
          {"noise_rate_hz", t.noise_rate_hz},
          {"dt", t.dt}};
}

inline training::TrainConfig parse_train(const json& j) {
  detail::Obj o(j, "train");
  training::TrainConfig c;
  c.learner = training::learner_from_name(o.get<std::string>("learner", "bptt"));
  c.epochs = o.get("epochs", c.epochs);
  c.batches_per_epoch = o.get("batches_per_epoch", c.batches_per_epoch);
  c.batch_size = o.get("batch_size", c.batch_size);
  c.adam.lr = o.get("lr", c.adam.lr);
  c.adam.beta1 = o.get("beta1", c.adam.beta1);
  c.adam.beta2 = o.get("beta2", c.adam.beta2);
  c.adam.eps = o.get("adam_eps", c.adam.eps);
  c.adam.clip_norm = o.get("clip_norm", c.adam.clip_norm);
  c.lr_decay = o.get("lr_decay", c.lr_decay);
  c.eval_trials = o.get("eval_trials", c.eval_trials);
  c.eval_every = o.get("eval_every", c.eval_every);
  o.finish();
  training::validate(c);
  return c;
}

inline json to_json(const training::TrainConfig& c) {
  return {{"learner", training::learner_name(c.learner)},
          {"epochs", c.epochs},
          {"batches_per_epoch", c.batches_per_epoch},
          {"batch_size", c.batch_size},
          {"lr", c.adam.lr},
          {"beta1", c.adam.beta1},
          {"beta2", c.adam.beta2},
          {"adam_eps", c.adam.eps},
          {"clip_norm", c.adam.clip_norm},
          {"lr_decay", c.lr_decay},
          {"eval_trials", c.eval_trials},
          {"eval_every", c.eval_every}};
}

// ---------------------------------------------------------------------------
// Fitting

struct FitConfig {
  fitting::FitProblem problem;
  std::vector<fitting::Method> methods{fitting::Method::lbfgsb};
  std::size_t n_starts = 16;       // gradient method
  std::size_t meta_starts = 1;     // population methods
  bool match_budget = false;       // population budget = L-BFGS-B evaluations
  fitting::LbfgsbConfig lbfgsb;
  fitting::MetaConfig meta;
  std::string recording_path;      // empty: synthetic target
};

inline FitConfig parse_fit(const json& j) {
  detail::Obj o(j, "fit");
  FitConfig c;
  const auto model = o.get<std::string>("model", "gif");
  if (model == "gif") c.problem = fitting::default_gif_problem();
  else if (model == "hh") c.problem = fitting::default_hh_problem();
  else throw ConfigError("fit.model: expected 'gif' or 'hh'");
  if (o.has("methods")) {
    c.methods.clear();
    for (const auto& m : o.get<std::vector<std::string>>("methods", {}))
      c.methods.push_back(fitting::method_from_name(m));
    if (c.methods.empty()) throw ConfigError("fit.methods: empty list");
  }
  c.problem.loss = fitting::loss_from_name(o.get<std::string>("loss", "mse"));
  c.n_starts = o.get("n_starts", c.n_starts);
  c.meta_starts = o.get("meta_starts", c.meta_starts);
  c.problem.gamma_delta = o.get("gamma_delta", c.problem.gamma_delta);
  if (o.has("gif")) c.problem.gif = parse_gif(o.at("gif"), c.problem.gif);
  if (o.has("hh")) c.problem.hh = parse_hh(o.at("hh"), c.problem.hh);
  if (o.has("surrogate")) c.problem.surrogate = parse_surrogate(o.at("surrogate"));
  if (o.has("scaling")) {
    detail::Obj s(o.at("scaling"), "fit.scaling");
    c.problem.scaling.V_scale = s.get("V_scale", c.problem.scaling.V_scale);
    c.problem.scaling.V_offset = s.get("V_offset", c.problem.scaling.V_offset);
    s.finish();
  }
  if (o.has("params")) {
    c.problem.params.clear();
    const json& ps = o.at("params");
    if (!ps.is_array()) throw ConfigError("fit.params: expected an array");
    for (const auto& p : ps) {
      detail::Obj b(p, "fit.params[]");
      c.problem.params.push_back({b.require<std::string>("name"), b.require<double>("lower"),
                                  b.require<double>("upper")});
      b.finish();
    }
  }
  if (o.has("lbfgsb")) {
    detail::Obj s(o.at("lbfgsb"), "fit.lbfgsb");
    c.lbfgsb.memory = s.get("memory", c.lbfgsb.memory);
    c.lbfgsb.max_iterations = s.get("max_iterations", c.lbfgsb.max_iterations);
    c.lbfgsb.max_evaluations = s.get("max_evaluations", c.lbfgsb.max_evaluations);
    c.lbfgsb.pgtol = s.get("pgtol", c.lbfgsb.pgtol);
    c.lbfgsb.ftol = s.get("ftol", c.lbfgsb.ftol);
    s.finish();
  }
  if (o.has("meta")) {
    detail::Obj s(o.at("meta"), "fit.meta");
    c.meta.population = s.get("population", c.meta.population);
    if (s.has("max_evaluations")) {
      const json& v = s.at("max_evaluations");
      if (v.is_string() && v.get<std::string>() == "match_lbfgsb") c.match_budget = true;
      else if (v.is_number_unsigned()) c.meta.max_evaluations = v.get<std::size_t>();
      else throw ConfigError("fit.meta.max_evaluations: expected a count or \"match_lbfgsb\"");
    }
    c.meta.F = s.get("F", c.meta.F);
    c.meta.CR = s.get("CR", c.meta.CR);
    c.meta.inertia = s.get("inertia", c.meta.inertia);
    c.meta.c_personal = s.get("c_personal", c.meta.c_personal);
    c.meta.c_social = s.get("c_social", c.meta.c_social);
    s.finish();
  }
  if (o.has("target")) {
    detail::Obj t(o.at("target"), "fit.target");
    c.recording_path = t.get<std::string>("recording", "");
    if (t.has("true_params")) {
      // Synthetic target from explicit parameters.
      if (c.problem.model == dynamics::ModelKind::gif) {
        auto p = parse_gif(t.at("true_params"), c.problem.gif);
        c.problem.recording = fitting::synthetic_gif_recording(p);
      } else {
        auto p = parse_hh(t.at("true_params"), c.problem.hh);
        c.problem.recording = fitting::synthetic_hh_recording(p);
      }
    }
    t.finish();
  }
  o.finish();
  if (c.n_starts == 0 || c.meta_starts == 0) throw ConfigError("fit: starts must be >= 1");
  if (c.match_budget &&
      std::find(c.methods.begin(), c.methods.end(), fitting::Method::lbfgsb) == c.methods.end())
    throw ConfigError("fit.meta.max_evaluations: match_lbfgsb needs lbfgsb in methods");
  return c;
}

}  // namespace spikediff::config
