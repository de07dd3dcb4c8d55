#pragma once

// Panel and profile files (delimited text) and provenance hashing.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <openssl/evp.h>

#include "revpf/errors.hpp"
#include "revpf/identlab.hpp"
#include "revpf/simulator.hpp"

#ifndef REVPF_VERSION
#define REVPF_VERSION "0.1.0"
#endif

namespace revpf {

inline constexpr const char* version() { return REVPF_VERSION; }

namespace detail {

// Shortest text that reads back to the same double.
inline std::string format_double(double x) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string_view> split_fields(std::string_view line, char sep = ',') {
  std::vector<std::string_view> out;
  std::size_t pos = 0;
  while (true) {
    const auto next = line.find(sep, pos);
    out.push_back(trim(line.substr(pos, next == std::string_view::npos ? std::string_view::npos : next - pos)));
    if (next == std::string_view::npos) break;
    pos = next + 1;
  }
  return out;
}

template <class T>
bool parse_number(std::string_view s, T& out) {
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  const auto* end = s.data() + s.size();
  const auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc{} && ptr == end && !s.empty();
}

inline std::ofstream open_output(const std::filesystem::path& path) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create directory " + path.parent_path().string() + ": " + ec.message());
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  return out;
}

inline std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return in;
}

inline void finish_output(std::ofstream& out, const std::filesystem::path& path) {
  out.flush();
  if (!out) throw IoError("write to " + path.string() + " failed");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Panel CSV
//
// Header-bearing comma-separated text, one row per firm-period:
//   firm_id,t,K,L,M,pL,pM,pK,omega,eps,Q,P,R,sL_star,sM_star
// omega, eps, Q and P may be absent (revenue-only data). Columns are matched by
// name, so their order is free. Q* is not stored; it is rebuilt as Q e^-eps.

inline const std::vector<std::string>& panel_columns() {
  static const std::vector<std::string> cols{"firm_id", "t", "K",   "L", "M", "pL",      "pM",     "pK",
                                             "omega",   "eps", "Q", "P", "R", "sL_star", "sM_star"};
  return cols;
}

inline void write_panel_csv(std::ostream& out, const Panel& panel) {
  std::vector<std::string> cols;
  for (const auto& c : panel_columns()) {
    if ((c == "omega" && !panel.has_omega) || (c == "eps" && !panel.has_eps) || (c == "Q" && !panel.has_Q) ||
        (c == "P" && !panel.has_P))
      continue;
    cols.push_back(c);
  }
  for (std::size_t j = 0; j < cols.size(); ++j) out << (j ? "," : "") << cols[j];
  out << '\n';
  using detail::format_double;
  for (const auto& r : panel.rows) {
    out << r.firm_id << ',' << r.t << ',' << format_double(r.K) << ',' << format_double(r.L) << ','
        << format_double(r.M) << ',' << format_double(r.pL) << ',' << format_double(r.pM) << ','
        << format_double(r.pK);
    if (panel.has_omega) out << ',' << format_double(r.omega);
    if (panel.has_eps) out << ',' << format_double(r.eps);
    if (panel.has_Q) out << ',' << format_double(r.Q);
    if (panel.has_P) out << ',' << format_double(r.P);
    out << ',' << format_double(r.R) << ',' << format_double(r.sL_star) << ',' << format_double(r.sM_star) << '\n';
  }
}

inline void write_panel_csv(const std::filesystem::path& path, const Panel& panel) {
  auto out = detail::open_output(path);
  write_panel_csv(out, panel);
  detail::finish_output(out, path);
}

// Rows come back sorted by (firm_id, t). Errors name the source and line.
inline Panel read_panel_csv(std::istream& in, const std::string& source = "<panel>") {
  auto fail = [&](std::size_t line, const std::string& what) -> FormatError {
    return FormatError(source + ":" + std::to_string(line) + ": " + what);
  };

  std::string text;
  std::size_t line_no = 0;
  bool have_header = false;
  while (std::getline(in, text)) {
    ++line_no;
    if (!detail::trim(text).empty()) {
      have_header = true;
      break;
    }
  }
  if (!have_header) throw FormatError(source + ": missing header line");
  if (text.rfind("\xEF\xBB\xBF", 0) == 0) text.erase(0, 3);

  const auto header = detail::split_fields(text);
  std::map<std::string, std::size_t> index;
  for (std::size_t j = 0; j < header.size(); ++j) {
    const std::string name(header[j]);
    if (std::find(panel_columns().begin(), panel_columns().end(), name) == panel_columns().end())
      throw fail(line_no, "unknown column '" + name + "'");
    if (!index.emplace(name, j).second) throw fail(line_no, "duplicate column '" + name + "'");
  }
  for (const char* required : {"firm_id", "t", "K", "L", "M", "pL", "pM", "pK", "R", "sL_star", "sM_star"})
    if (!index.count(required)) throw fail(line_no, std::string("missing required column '") + required + "'");

  Panel panel;
  panel.has_omega = index.count("omega") > 0;
  panel.has_eps = index.count("eps") > 0;
  panel.has_Q = index.count("Q") > 0;
  panel.has_P = index.count("P") > 0;

  std::vector<std::size_t> lines;
  while (std::getline(in, text)) {
    ++line_no;
    if (detail::trim(text).empty()) continue;
    const auto fields = detail::split_fields(text);
    if (fields.size() != header.size())
      throw fail(line_no, "expected " + std::to_string(header.size()) + " fields, got " + std::to_string(fields.size()));

    FirmPeriod r;
    auto field = [&](const char* name) { return fields[index.at(name)]; };
    if (!detail::parse_number(field("firm_id"), r.firm_id))
      throw fail(line_no, "field 'firm_id' is not an integer: '" + std::string(field("firm_id")) + "'");
    if (!detail::parse_number(field("t"), r.t))
      throw fail(line_no, "field 't' is not an integer: '" + std::string(field("t")) + "'");
    auto number = [&](const char* name, bool positive) {
      double x = 0;
      const auto s = field(name);
      if (!detail::parse_number(s, x)) throw fail(line_no, std::string("field '") + name + "' is not a number: '" + std::string(s) + "'");
      if (!std::isfinite(x)) throw fail(line_no, std::string("field '") + name + "' is not finite");
      if (positive && !(x > 0.0)) throw fail(line_no, std::string("field '") + name + "' must be > 0");
      return x;
    };
    r.K = number("K", true);
    r.L = number("L", true);
    r.M = number("M", true);
    r.pL = number("pL", true);
    r.pM = number("pM", true);
    r.pK = number("pK", true);
    r.R = number("R", true);
    r.sL_star = number("sL_star", true);
    r.sM_star = number("sM_star", true);
    if (panel.has_omega) r.omega = number("omega", false);
    if (panel.has_eps) r.eps = number("eps", false);
    if (panel.has_Q) r.Q = number("Q", true);
    if (panel.has_P) r.P = number("P", true);
    if (panel.has_Q && panel.has_eps) r.Qstar = r.Q * std::exp(-r.eps);
    panel.rows.push_back(r);
    lines.push_back(line_no);
  }
  if (in.bad()) throw IoError(source + ": read error");

  std::vector<std::size_t> order(panel.rows.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  auto key = [&](std::size_t i) { return std::pair(panel.rows[i].firm_id, panel.rows[i].t); };
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return key(a) < key(b); });
  for (std::size_t i = 1; i < order.size(); ++i)
    if (key(order[i]) == key(order[i - 1]))
      throw fail(lines[order[i]], "duplicate firm-period (firm " + std::to_string(key(order[i]).first) + ", t " +
                                      std::to_string(key(order[i]).second) + "), first seen on line " +
                                      std::to_string(lines[order[i - 1]]));
  std::vector<FirmPeriod> sorted;
  sorted.reserve(order.size());
  for (std::size_t i : order) sorted.push_back(panel.rows[i]);
  panel.rows = std::move(sorted);
  return panel;
}

inline Panel read_panel_csv(const std::filesystem::path& path) {
  auto in = detail::open_input(path);
  return read_panel_csv(in, path.string());
}

// ---------------------------------------------------------------------------
// Profile CSV (plot data): param,grid,objective

inline void write_profile_csv(std::ostream& out, const ProfileCurve& p) {
  out << "param,grid,objective\n";
  for (std::size_t i = 0; i < p.grid.size(); ++i)
    out << p.param << ',' << detail::format_double(p.grid[i]) << ',' << detail::format_double(p.objective[i]) << '\n';
}

inline void write_profile_csv(const std::filesystem::path& path, const ProfileCurve& p) {
  auto out = detail::open_output(path);
  write_profile_csv(out, p);
  detail::finish_output(out, path);
}

// Reads back a single-parameter profile; flatness and argmin are recomputed.
inline ProfileCurve read_profile_csv(std::istream& in, const std::string& source = "<profile>") {
  std::string text;
  std::size_t line_no = 0;
  if (!std::getline(in, text)) throw FormatError(source + ": missing header line");
  ++line_no;
  if (detail::trim(text) != "param,grid,objective")
    throw FormatError(source + ":1: expected header 'param,grid,objective'");
  ProfileCurve p;
  while (std::getline(in, text)) {
    ++line_no;
    if (detail::trim(text).empty()) continue;
    const auto f = detail::split_fields(text);
    double g = 0, v = 0;
    if (f.size() != 3 || !detail::parse_number(f[1], g) || !detail::parse_number(f[2], v))
      throw FormatError(source + ":" + std::to_string(line_no) + ": malformed profile row");
    if (p.grid.empty()) p.param = std::string(f[0]);
    else if (f[0] != p.param)
      throw FormatError(source + ":" + std::to_string(line_no) + ": mixed parameters in one profile file");
    p.grid.push_back(g);
    p.objective.push_back(v);
  }
  if (!p.objective.empty()) {
    p.flatness = flatness_statistic(p.objective);
    p.argmin = static_cast<std::size_t>(std::min_element(p.objective.begin(), p.objective.end()) - p.objective.begin());
  }
  return p;
}

inline ProfileCurve read_profile_csv(const std::filesystem::path& path) {
  auto in = detail::open_input(path);
  return read_profile_csv(in, path.string());
}

// ---------------------------------------------------------------------------
// Provenance

inline std::string sha256_hex(std::string_view data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw Error("SHA-256 digest failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xf]);
  }
  return out;
}

inline std::string read_text_file(const std::filesystem::path& path) {
  auto in = detail::open_input(path);
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read from " + path.string() + " failed");
  return ss.str();
}

}  // namespace revpf
