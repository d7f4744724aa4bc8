// SPDX-License-Identifier: Apache-2.0
//
// spikediff command line: fit, train, bench, gen-data, dump-surrogates.
// Exit codes: 0 ok, 1 other failure, 2 config error, 3 data error,
// 4 numerical failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "spikediff/spikediff.hpp"

namespace fs = std::filesystem;
using spikediff::config::json;
namespace sd = spikediff;

namespace {

struct RunConfig {
  std::string command;
  std::string config_path;
  std::string out_dir = "out";
  std::optional<std::uint64_t> seed;
  std::string precision = "f64";
  std::size_t threads = 1;
  std::string resume;  // train only
};

/// Writes files into the output directory and a sidecar next to each one.
class Output {
 public:
  Output(const RunConfig& rc, const json& cfg, std::uint64_t seed) : dir_(rc.out_dir) {
    std::error_code ec;
    fs::create_directories(dir_, ec);
    const auto probe = dir_ / ".spikediff_write_probe";
    {
      std::ofstream f(probe);
      if (ec || !f) throw sd::ConfigError("output directory not writable: " + rc.out_dir);
    }
    fs::remove(probe, ec);
    json eff = {{"command", rc.command}, {"config", cfg}, {"seed", seed},
                {"precision", rc.precision}};
    std::ostringstream hex;
    hex << std::hex << std::setw(16) << std::setfill('0') << sd::fnv1a(eff.dump());
    meta_ = {{"artifact_version", sd::kVersion}, {"command", rc.command},
             {"config_hash", "fnv1a64:" + hex.str()}, {"seed", seed},
             {"precision", rc.precision}};
  }

  fs::path path(const std::string& name) const { return dir_ / name; }

  std::ofstream open(const std::string& name) {
    std::ofstream f(path(name));
    if (!f) throw sd::DataError("cannot write " + path(name).string());
    f << std::setprecision(17);
    sidecar(name);
    return f;
  }

  void write_json(const std::string& name, const json& j) { open(name) << j.dump(2) << '\n'; }

  void sidecar(const std::string& name) {
    json m = meta_;
    m["file"] = name;
    std::ofstream f(path(name + ".meta.json"));
    if (!f) throw sd::DataError("cannot write sidecar for " + name);
    f << m.dump(2) << '\n';
  }

 private:
  fs::path dir_;
  json meta_;
};

/// Top-level reader: every command accepts an optional "seed".
std::uint64_t resolve_seed(sd::config::detail::Obj& o, const RunConfig& rc) {
  const auto s = o.get<std::uint64_t>("seed", 0);
  return rc.seed.value_or(s);
}

sd::network::Precision parse_precision(const std::string& p) {
  if (p == "f64") return sd::network::Precision::f64;
  if (p == "f32") return sd::network::Precision::f32;
  throw sd::ConfigError("--precision: expected f32 or f64");
}

json load_config(const RunConfig& rc) {
  if (rc.config_path.empty()) return json::object();
  return sd::config::load_json(rc.config_path);
}

std::string join_values(const std::vector<double>& v) {
  std::ostringstream s;
  s << std::setprecision(17);
  for (std::size_t i = 0; i < v.size(); ++i) s << (i ? ";" : "") << v[i];
  return s.str();
}

// ---------------------------------------------------------------------------
// fit

json fit_result_json(const sd::fitting::FitResult& r, const sd::config::FitConfig& fc) {
  json params = json::object();
  for (std::size_t i = 0; i < r.param_names.size(); ++i) params[r.param_names[i]] = r.best_params[i];
  json starts = json::array();
  for (const auto& s : r.starts)
    starts.push_back(
        {{"x0", s.x0}, {"x", s.x}, {"loss", std::isfinite(s.loss) ? json(s.loss) : json(nullptr)},
         {"evaluations", s.evaluations}, {"status", s.status}});
  return {{"method", r.method},
          {"model", fc.problem.model == sd::dynamics::ModelKind::gif ? "gif" : "hh"},
          {"loss_kind", sd::fitting::loss_name(fc.problem.loss)},
          {"best_loss", r.best_loss},
          {"best_params", params},
          {"n_evaluations", r.n_evaluations},
          {"history", r.loss_history},
          {"starts", starts}};
}

int cmd_fit(const RunConfig& rc) {
  if (rc.precision != "f64") throw sd::ConfigError("fit: only --precision f64 is supported");
  const json raw = load_config(rc);
  sd::config::detail::Obj top(raw, "config");
  const auto seed = resolve_seed(top, rc);
  if (!top.has("fit")) throw sd::ConfigError("config: missing key 'fit'");
  auto fc = sd::config::parse_fit(top.at("fit"));
  top.finish();
  if (!fc.recording_path.empty()) {
    fs::path p = fc.recording_path;
    if (p.is_relative() && !rc.config_path.empty()) p = fs::path(rc.config_path).parent_path() / p;
    fc.problem.recording = sd::fitting::load_recording(p.string(), sd::fitting::spike_threshold(fc.problem));
  }
  Output out(rc, raw, seed);

  // Gradient method first so population methods can match its budget.
  std::vector<sd::fitting::Method> order;
  for (auto m : fc.methods)
    if (m == sd::fitting::Method::lbfgsb) order.push_back(m);
  for (auto m : fc.methods)
    if (m != sd::fitting::Method::lbfgsb) order.push_back(m);

  std::size_t lbfgsb_evals = 0;
  std::vector<std::pair<sd::fitting::FitResult, std::size_t>> results;
  for (auto m : order) {
    sd::fitting::OptimizerConfig opt{m, fc.lbfgsb, fc.meta, seed};
    std::size_t starts = fc.n_starts;
    if (m != sd::fitting::Method::lbfgsb) {
      starts = fc.meta_starts;
      if (fc.match_budget) opt.meta.max_evaluations = std::max<std::size_t>(1, lbfgsb_evals / starts);
    }
    auto r = sd::fitting::multistart_fit(fc.problem, starts, opt, rc.threads);
    if (m == sd::fitting::Method::lbfgsb) lbfgsb_evals = r.n_evaluations;
    std::cerr << r.method << ": best loss " << r.best_loss << " after " << r.n_evaluations
              << " evaluations, " << r.wall_time_s << " s\n";
    out.write_json("fit_" + r.method + ".json", fit_result_json(r, fc));
    results.emplace_back(std::move(r), starts);
  }

  auto table = out.open("fit_table.csv");
  table << "method,best_loss,mean_loss,std_loss,n_starts,n_evaluations,wall_time_s,ms_per_evaluation,"
           "best_params\n";
  for (const auto& [r, starts] : results) {
    double mean = 0.0, sq = 0.0;
    std::size_t ok = 0;
    for (const auto& s : r.starts)
      if (std::isfinite(s.loss)) {
        mean += s.loss;
        ++ok;
      }
    mean /= static_cast<double>(ok);
    for (const auto& s : r.starts)
      if (std::isfinite(s.loss)) sq += (s.loss - mean) * (s.loss - mean);
    const double sdev = ok > 1 ? std::sqrt(sq / static_cast<double>(ok - 1)) : 0.0;
    table << r.method << ',' << r.best_loss << ',' << mean << ',' << sdev << ',' << starts << ','
          << r.n_evaluations << ',' << r.wall_time_s << ','
          << 1000.0 * r.wall_time_s / static_cast<double>(std::max<std::size_t>(1, r.n_evaluations))
          << ',' << join_values(r.best_params) << '\n';
  }
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct DiagConfig {
  std::size_t trials = 2;
  std::size_t membrane_neurons = 10;
  std::size_t hist_bins = 40;
};

DiagConfig parse_diag(sd::config::detail::Obj& top) {
  DiagConfig d;
  if (!top.has("diagnostics")) return d;
  sd::config::detail::Obj o(top.at("diagnostics"), "diagnostics");
  d.trials = o.get("trials", d.trials);
  d.membrane_neurons = o.get("membrane_neurons", d.membrane_neurons);
  d.hist_bins = o.get("hist_bins", d.hist_bins);
  o.finish();
  if (d.trials == 0) throw sd::ConfigError("diagnostics.trials must be >= 1");
  if (d.hist_bins < 2) throw sd::ConfigError("diagnostics.hist_bins must be >= 2");
  return d;
}

/// Half excitatory, half inhibitory; E neurons come first in the layout.
std::vector<std::size_t> traced_neurons(const sd::network::EiNetwork& net, std::size_t k) {
  std::vector<std::size_t> e, i;
  for (std::size_t n = 0; n < net.n_rec(); ++n)
    (net.neuron_types[n] == sd::network::NeuronType::exc ? e : i).push_back(n);
  std::vector<std::size_t> out;
  const std::size_t ke = std::min(e.size(), k - k / 2), ki = std::min(i.size(), k / 2);
  out.insert(out.end(), e.begin(), e.begin() + static_cast<std::ptrdiff_t>(ke));
  out.insert(out.end(), i.begin(), i.begin() + static_cast<std::ptrdiff_t>(ki));
  return out;
}

void write_activity(std::ofstream& raster, std::ofstream& membrane, const std::string& stage,
                    const sd::network::EiNetwork& net, const sd::network::TrialBatch& batch,
                    const DiagConfig& d) {
  const auto traced = traced_neurons(net, d.membrane_neurons);
  const double dt = net.config.dt;
  for (std::size_t b = 0; b < batch.batch; ++b) {
    sd::network::TrialRecord rec;
    auto res = sd::network::run_trial(net, batch, b, nullptr, &rec);
    for (const auto& [t, n] : rec.spikes)
      raster << stage << ',' << b << ',' << static_cast<double>(t) * dt << ',' << n << ','
             << (net.neuron_types[n] == sd::network::NeuronType::exc ? "E" : "I") << ','
             << batch.labels[b] << ',' << res.prediction << '\n';
    for (std::size_t t = 0; t < rec.V.size(); ++t)
      for (std::size_t n : traced)
        membrane << stage << ',' << b << ',' << static_cast<double>(t) * dt << ',' << n << ','
                 << (net.neuron_types[n] == sd::network::NeuronType::exc ? "E" : "I") << ','
                 << rec.V[t][n] << '\n';
  }
}

void write_histograms(std::ofstream& f, const std::string& stage, const sd::network::EiNetwork& net,
                      std::size_t bins) {
  for (auto which : {sd::network::WeightClass::exc, sd::network::WeightClass::inh}) {
    auto h = sd::network::weight_histogram(net, which, bins);
    for (std::size_t k = 0; k < h.counts.size(); ++k)
      f << stage << ',' << (which == sd::network::WeightClass::exc ? "exc" : "inh") << ','
        << (h.log_spaced ? "log" : "linear") << ',' << h.edges[k] << ',' << h.edges[k + 1] << ','
        << h.counts[k] << '\n';
  }
}

void write_metrics_csv(Output& out, const std::vector<sd::training::EpochMetrics>& hist) {
  auto f = out.open("metrics.csv");
  f << "epoch,loss,accuracy,wall_time,eval_loss,eval_accuracy,updates,grad_norm,skipped,rate_hz,"
       "v_min,v_max,v_violations,lr,memory_bytes\n";
  for (const auto& m : hist)
    f << m.epoch << ',' << m.loss << ',' << m.accuracy << ',' << m.wall_time_s << ',' << m.eval_loss
      << ',' << m.eval_accuracy << ',' << m.updates << ',' << m.grad_norm << ',' << m.skipped << ','
      << m.rate_hz << ',' << m.v_min << ',' << m.v_max << ',' << m.v_violations << ',' << m.lr << ','
      << m.memory_bytes << '\n';
}

int cmd_train(const RunConfig& rc) {
  const json raw = load_config(rc);
  sd::config::detail::Obj top(raw, "config");
  auto seed = resolve_seed(top, rc);
  auto net_cfg = sd::config::parse_network(top.has("network") ? top.at("network") : json::object());
  const auto task = sd::config::parse_task(top.has("task") ? top.at("task") : json::object());
  auto tc = sd::config::parse_train(top.has("train") ? top.at("train") : json::object());
  const auto diag = parse_diag(top);
  top.finish();
  tc.threads = rc.threads;

  sd::training::TrainState state;
  if (!rc.resume.empty()) {
    state = sd::checkpoint::load(rc.resume);
    const auto stored = sd::checkpoint::load_seed(rc.resume);
    if (rc.seed && *rc.seed != stored) throw sd::ConfigError("--seed differs from the checkpoint");
    seed = stored;
    if (parse_precision(rc.precision) != state.net.config.precision)
      throw sd::ConfigError("--precision differs from the checkpoint");
    if (state.epoch > tc.epochs) throw sd::ConfigError("train.epochs is below the checkpoint epoch");
    std::cerr << "resuming at epoch " << state.epoch << '\n';
  } else {
    net_cfg.seed = seed;
    net_cfg.precision = parse_precision(rc.precision);
    tc.seed = seed;
    state = sd::training::initial_train_state(sd::network::build_network(net_cfg), tc);
  }
  tc.seed = seed;
  Output out(rc, raw, seed);

  auto drng = sd::training::derived_rng(seed, 3);
  const auto diag_batch = sd::network::generate_batch(task, state.net.n_in(), diag.trials, drng);
  auto raster = out.open("raster.csv");
  raster << "stage,trial,t_ms,neuron_id,type,label,prediction\n";
  auto membrane = out.open("membrane.csv");
  membrane << "stage,trial,t_ms,neuron_id,type,v_scaled\n";
  auto hist = out.open("weight_hist.csv");
  hist << "stage,class,binning,lower,upper,count\n";
  write_activity(raster, membrane, "before", state.net, diag_batch, diag);
  write_histograms(hist, "before", state.net, diag.hist_bins);

  std::ofstream nd(out.path("metrics.ndjson"));
  out.sidecar("metrics.ndjson");
  for (const auto& m : state.history) nd << sd::checkpoint::metrics_to_json(m).dump() << '\n';
  const auto ckpt = out.path("checkpoint.json").string();
  int rc_code = 0;
  try {
    sd::training::train(state, task, tc, [&](const auto& s, const auto& m) {
      nd << sd::checkpoint::metrics_to_json(m).dump() << '\n' << std::flush;
      std::fprintf(stderr, "epoch %zu loss %.4f acc %.3f eval %.3f rate %.1f Hz v[%.2f, %.2f] %.1f s\n",
                   m.epoch, m.loss, m.accuracy, m.eval_accuracy, m.rate_hz, m.v_min, m.v_max,
                   m.wall_time_s);
      sd::checkpoint::save(ckpt, s, seed);
    });
  } catch (const sd::NumericalError& e) {
    std::cerr << "error: " << e.what() << " (partial outputs kept)\n";
    rc_code = 4;
  }
  out.sidecar("checkpoint.json");
  write_metrics_csv(out, state.history);
  write_activity(raster, membrane, "after", state.net, diag_batch, diag);
  write_histograms(hist, "after", state.net, diag.hist_bins);
  return rc_code;
}

// ---------------------------------------------------------------------------
// bench

int cmd_bench(const RunConfig& rc) {
  const json raw = load_config(rc);
  sd::config::detail::Obj top(raw, "config");
  const auto seed = resolve_seed(top, rc);
  auto net_cfg = sd::config::parse_network(top.has("network") ? top.at("network") : json::object());
  const auto Ts = top.get<std::vector<std::size_t>>("T", {100, 200, 400, 800});
  const auto batch = top.get<std::size_t>("batch_size", 4);
  const auto repeats = top.get<std::size_t>("repeats", 3);
  sd::bench::MatvecBenchConfig mv;
  if (top.has("matvec")) {
    sd::config::detail::Obj o(top.at("matvec"), "matvec");
    mv.n = o.get("n", mv.n);
    mv.density = o.get("density", mv.density);
    mv.spike_rate = o.get("spike_rate", mv.spike_rate);
    mv.n_vectors = o.get("n_vectors", mv.n_vectors);
    mv.repeats = o.get("repeats", mv.repeats);
    o.finish();
  }
  top.finish();
  if (Ts.empty()) throw sd::ConfigError("bench.T: empty list");
  net_cfg.seed = seed;
  net_cfg.precision = parse_precision(rc.precision);
  mv.seed = seed;
  Output out(rc, raw, seed);

  const auto net = sd::network::build_network(net_cfg);
  const auto rows = sd::training::bench_scaling(net, Ts, batch, repeats, seed, rc.threads);
  auto f = out.open("scaling.csv");
  f << "T,learner,memory_bytes,wall_time_s\n";
  json summary;
  for (auto l : {sd::training::Learner::bptt, sd::training::Learner::online}) {
    std::vector<double> x, mem, time;
    for (const auto& r : rows) {
      if (r.learner != l) continue;
      f << r.T << ',' << sd::training::learner_name(r.learner) << ',' << r.memory_bytes << ','
        << r.wall_time_s << '\n';
      x.push_back(static_cast<double>(r.T));
      mem.push_back(static_cast<double>(r.memory_bytes));
      time.push_back(r.wall_time_s);
    }
    const auto [lo, hi] = std::minmax_element(mem.begin(), mem.end());
    summary[std::string(sd::training::learner_name(l))] = {
        {"memory_r2", sd::training::linear_r2(x, mem)},
        {"memory_max_over_min", *hi / *lo},
        {"time_r2", sd::training::linear_r2(x, time)}};
  }

  const auto m = sd::bench::matvec_bench(mv);
  auto g = out.open("matvec.csv");
  g << "n,density,spike_rate,nnz,mean_active,event_s,dense_s,speedup,max_abs_diff\n";
  g << mv.n << ',' << mv.density << ',' << mv.spike_rate << ',' << m.nnz << ',' << m.mean_active
    << ',' << m.event_s << ',' << m.dense_s << ',' << m.speedup << ',' << m.max_abs_diff << '\n';
  summary["matvec_speedup"] = m.speedup;
  out.write_json("bench_summary.json", summary);
  std::cerr << summary.dump(2) << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// gen-data

int cmd_gen_data(const RunConfig& rc) {
  const json raw = load_config(rc);
  sd::config::detail::Obj top(raw, "config");
  const auto seed = resolve_seed(top, rc);
  const auto task = sd::config::parse_task(top.has("task") ? top.at("task") : json::object());
  const auto n_in = top.get<std::size_t>("n_in", 100);
  const auto n_trials = top.get<std::size_t>("n_trials", 1000);
  std::vector<std::string> models{"gif", "hh"};
  sd::dynamics::GifParams gif;
  sd::dynamics::HhParams hh;
  if (top.has("recordings")) {
    sd::config::detail::Obj o(top.at("recordings"), "recordings");
    models.clear();
    if (o.has("gif")) {
      gif = sd::config::parse_gif(o.at("gif"), gif);
      models.push_back("gif");
    }
    if (o.has("hh")) {
      hh = sd::config::parse_hh(o.at("hh"), hh);
      models.push_back("hh");
    }
    o.finish();
  }
  top.finish();
  if (n_trials == 0) throw sd::ConfigError("n_trials must be >= 1");
  Output out(rc, raw, seed);

  auto rng = sd::training::derived_rng(seed, 4);
  const auto batch = sd::network::generate_batch(task, n_in, n_trials, rng);
  auto f = out.open("trials.ndjson");
  std::size_t left = 0;
  for (std::size_t b = 0; b < batch.batch; ++b) {
    json cues = json::array();
    for (auto c : batch.cues[b]) cues.push_back(c == sd::network::Side::left ? "left" : "right");
    json spikes = json::array();
    for (std::size_t t = 0; t < batch.n_steps; ++t) {
      auto row = batch.input(b, t);
      for (std::size_t i = 0; i < n_in; ++i)
        if (row[i]) spikes.push_back({t, i});
    }
    left += batch.labels[b] == 0;
    f << json{{"trial", b},      {"label", batch.labels[b]}, {"cues", cues},
              {"n_steps", batch.n_steps}, {"n_in", n_in}, {"dt", task.dt},
              {"recall_start", task.recall_start()}, {"spikes", spikes}}
             .dump()
      << '\n';
  }
  std::cerr << "trials: " << n_trials << ", left-majority fraction "
            << static_cast<double>(left) / static_cast<double>(n_trials) << '\n';

  for (const auto& m : models) {
    const auto rec = m == "gif" ? sd::fitting::synthetic_gif_recording(gif)
                                : sd::fitting::synthetic_hh_recording(hh);
    auto g = out.open("recording_" + m + ".csv");
    sd::fitting::write_recording(g, rec);
  }
  return 0;
}

// ---------------------------------------------------------------------------
// dump-surrogates

int cmd_dump_surrogates(const RunConfig& rc) {
  const json raw = load_config(rc);
  sd::config::detail::Obj top(raw, "config");
  const auto seed = resolve_seed(top, rc);
  const double x_min = top.get("x_min", -3.0), x_max = top.get("x_max", 3.0);
  const auto n = top.get<std::size_t>("n", 601);
  const double alpha = top.get("alpha", 0.3), width = top.get("width", 1.0);
  top.finish();
  if (n < 2 || !(x_min < x_max)) throw sd::ConfigError("dump-surrogates: need n >= 2, x_min < x_max");
  Output out(rc, raw, seed);

  auto f = out.open("surrogates.csv");
  f << "x,spike";
  for (auto k : sd::surrogate::kAllKinds) f << ',' << sd::surrogate::kind_name(k);
  f << '\n';
  for (std::size_t i = 0; i < n; ++i) {
    const double x = x_min + (x_max - x_min) * static_cast<double>(i) / static_cast<double>(n - 1);
    f << x << ',' << sd::surrogate::spike(x);
    for (auto k : sd::surrogate::kAllKinds) {
      sd::surrogate::SurrogateSpec s{k, alpha, width};
      sd::surrogate::validate(s);
      f << ',' << sd::surrogate::grad(x, s);
    }
    f << '\n';
  }
  return 0;
}

int dispatch(const RunConfig& rc) {
  if (rc.command == "fit") return cmd_fit(rc);
  if (rc.command == "train") return cmd_train(rc);
  if (rc.command == "bench") return cmd_bench(rc);
  if (rc.command == "gen-data") return cmd_gen_data(rc);
  return cmd_dump_surrogates(rc);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"spikediff: surrogate-gradient spiking network toolkit"};
  app.set_version_flag("--version", std::string(sd::kVersion));
  app.require_subcommand(1);
  RunConfig rc;
  const std::pair<const char*, const char*> commands[] = {
      {"fit", "fit neuron parameters to a recording"},
      {"train", "train the EI network on the evidence-accumulation task"},
      {"bench", "memory/time scaling and event vs dense matvec"},
      {"gen-data", "write task trials and synthetic recordings"},
      {"dump-surrogates", "tabulate every surrogate derivative"},
  };
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    auto* c = sub->add_option("--config", rc.config_path, "JSON config")->check(CLI::ExistingFile);
    if (std::string(name) != "dump-surrogates") c->required();
    sub->add_option("--out", rc.out_dir, "output directory")->capture_default_str();
    sub->add_option("--seed", rc.seed, "overrides the config seed");
    sub->add_option("--threads", rc.threads, "worker threads")->check(CLI::PositiveNumber)->capture_default_str();
    sub->add_option("--precision", rc.precision, "f32 or f64")
        ->check(CLI::IsMember({"f32", "f64"}))
        ->capture_default_str();
    if (std::string(name) == "train")
      sub->add_option("--resume", rc.resume, "checkpoint to continue from")->check(CLI::ExistingFile);
    sub->callback([&rc, name] { rc.command = name; });
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    return dispatch(rc);
  } catch (const sd::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const sd::DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const sd::NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
