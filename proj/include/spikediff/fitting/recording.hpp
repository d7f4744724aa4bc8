// SPDX-License-Identifier: Apache-2.0
//
// Current-clamp recordings on a uniform time grid. CSV schema:
//   t_ms,i_inj,v_mv
// with one header line; extra columns are ignored.

#pragma once

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "spikediff/common.hpp"
#include "spikediff/dynamics.hpp"

namespace spikediff::fitting {

struct Recording {
  std::vector<double> t;      // ms
  std::vector<double> I_inj;  // model current units
  std::vector<double> V;      // mV
  std::vector<double> spike_times;

  std::size_t size() const { return t.size(); }
  double dt() const { return t.size() > 1 ? t[1] - t[0] : 0.0; }
  double duration() const { return static_cast<double>(t.size()) * dt(); }
};

/// Checks equal lengths and a strictly increasing, uniform grid.
inline void validate(const Recording& r) {
  if (r.t.size() < 2) throw DataError("recording: need at least 2 samples");
  if (r.I_inj.size() != r.t.size() || r.V.size() != r.t.size())
    throw DataError("recording: column lengths differ");
  const double dt = r.dt();
  if (!(dt > 0.0)) throw DataError("recording: time must be strictly increasing");
  for (std::size_t k = 1; k < r.t.size(); ++k) {
    const double step = r.t[k] - r.t[k - 1];
    if (!(step > 0.0)) throw DataError("recording: time must be strictly increasing");
    if (std::abs(step - dt) > 1e-6 * dt)
      throw DataError("recording: nonuniform time grid at row " + std::to_string(k + 1));
  }
  for (std::size_t k = 0; k < r.t.size(); ++k)
    if (!std::isfinite(r.I_inj[k]) || !std::isfinite(r.V[k]) || !std::isfinite(r.t[k]))
      throw DataError("recording: non-finite value at row " + std::to_string(k + 1));
}

namespace detail {

inline std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    std::string_view cell = line.substr(start, comma == std::string_view::npos
                                                   ? std::string_view::npos
                                                   : comma - start);
    while (!cell.empty() && (cell.front() == ' ' || cell.front() == '\t')) cell.remove_prefix(1);
    while (!cell.empty() && (cell.back() == ' ' || cell.back() == '\t' || cell.back() == '\r'))
      cell.remove_suffix(1);
    out.push_back(cell);
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

inline double parse_double(std::string_view s, std::size_t row) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw DataError("recording: bad number '" + std::string(s) + "' at row " +
                    std::to_string(row));
  return v;
}

}  // namespace detail

inline Recording parse_recording(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw DataError("recording: empty file");
  const auto header = detail::split_csv(line);
  int ct = -1, ci = -1, cv = -1;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (header[c] == "t_ms") ct = static_cast<int>(c);
    if (header[c] == "i_inj") ci = static_cast<int>(c);
    if (header[c] == "v_mv") cv = static_cast<int>(c);
  }
  if (ct < 0 || ci < 0 || cv < 0)
    throw DataError("recording: header must contain t_ms, i_inj and v_mv");
  const std::size_t need = static_cast<std::size_t>(std::max({ct, ci, cv})) + 1;
  Recording r;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    const auto cells = detail::split_csv(line);
    if (cells.size() < need) throw DataError("recording: short row " + std::to_string(row));
    r.t.push_back(detail::parse_double(cells[ct], row));
    r.I_inj.push_back(detail::parse_double(cells[ci], row));
    r.V.push_back(detail::parse_double(cells[cv], row));
  }
  validate(r);
  return r;
}

/// Reads a recording and derives spike times as upward crossings of
/// `spike_threshold` (mV).
inline Recording load_recording(const std::string& path, double spike_threshold = 0.0) {
  std::ifstream in(path);
  if (!in) throw DataError("recording: cannot open " + path);
  Recording r = parse_recording(in);
  r.spike_times = dynamics::threshold_crossings(r.t, r.V, spike_threshold);
  return r;
}

inline void write_recording(std::ostream& out, const Recording& r) {
  out << "t_ms,i_inj,v_mv\n";
  char buf[96];
  for (std::size_t k = 0; k < r.size(); ++k) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g\n", r.t[k], r.I_inj[k], r.V[k]);
    out << buf;
  }
}

inline void save_recording(const std::string& path, const Recording& r) {
  validate(r);
  std::ofstream out(path);
  if (!out) throw DataError("recording: cannot write " + path);
  write_recording(out, r);
}

}  // namespace spikediff::fitting
