#pragma once

// Plain-text serialization: CSV for fields, maps, landmarks, controls, and
// logs; ASCII PGM (P2) for images. Every emitted file starts with the comment
// line `# msdiffeo v<version> seed=<seed> cmd=<command>`; grid-shaped files
// add a second comment carrying the grid geometry so they round-trip. Numbers
// are written with 17 significant digits, so doubles round-trip exactly.

#include <cctype>
#include <cerrno>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "msdiffeo/fields.hpp"
#include "msdiffeo/flows.hpp"
#include "msdiffeo/registration.hpp"
#include "msdiffeo/version.hpp"

namespace msdiffeo {

// Provenance line for emitted files.
inline std::string csv_header(std::uint64_t seed, const std::string& command) {
  return "# msdiffeo v" + std::string(kVersion) + " seed=" + std::to_string(seed) +
         " cmd=" + command;
}

namespace detail {

inline std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double parse_double(const std::string& tok, const std::string& where) {
  errno = 0;
  char* end = nullptr;
  const double v = std::strtod(tok.c_str(), &end);
  if (end == tok.c_str() || errno == ERANGE)
    throw std::invalid_argument("bad number '" + tok + "' in " + where);
  while (*end != '\0') {
    if (!std::isspace(static_cast<unsigned char>(*end)))
      throw std::invalid_argument("bad number '" + tok + "' in " + where);
    ++end;
  }
  return v;
}

inline long long parse_int(const std::string& tok, const std::string& where) {
  errno = 0;
  char* end = nullptr;
  const long long v = std::strtoll(tok.c_str(), &end, 10);
  if (end == tok.c_str() || errno == ERANGE || *end != '\0')
    throw std::invalid_argument("bad integer '" + tok + "' in " + where);
  return v;
}

inline std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string tok;
  std::istringstream ss(line);
  while (std::getline(ss, tok, sep)) out.push_back(tok);
  if (!line.empty() && line.back() == sep) out.push_back("");
  return out;
}

inline std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

inline std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

inline std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot read " + path.string());
  return in;
}

inline std::string grid_comment(const Grid2& g) {
  return "# grid nx=" + std::to_string(g.nx) + " ny=" + std::to_string(g.ny) +
         " h=" + fmt17(g.h) + " ox=" + fmt17(g.ox) + " oy=" + fmt17(g.oy);
}

// Reads leading comment lines; returns the first non-comment line (the column
// header) and fills `grid` from a `# grid ...` comment when one is present.
inline std::string read_comments(std::ifstream& in, const std::string& where, Grid2* grid,
                                 bool* grid_seen) {
  if (grid_seen) *grid_seen = false;
  std::string line;
  while (std::getline(in, line)) {
    const std::string t = trim(line);
    if (t.empty()) continue;
    if (t[0] != '#') return t;
    if (t.rfind("# grid ", 0) == 0 && grid) {
      Grid2 g;
      std::istringstream ss(t.substr(7));
      std::string kv;
      while (ss >> kv) {
        const std::size_t eq = kv.find('=');
        if (eq == std::string::npos) continue;
        const std::string k = kv.substr(0, eq), v = kv.substr(eq + 1);
        if (k == "nx") g.nx = static_cast<int>(parse_int(v, where));
        else if (k == "ny") g.ny = static_cast<int>(parse_int(v, where));
        else if (k == "h") g.h = parse_double(v, where);
        else if (k == "ox") g.ox = parse_double(v, where);
        else if (k == "oy") g.oy = parse_double(v, where);
      }
      *grid = g;
      if (grid_seen) *grid_seen = true;
    }
  }
  throw std::invalid_argument("missing column header in " + where);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Grid fields.
// ---------------------------------------------------------------------------

inline void write_vector_field(const std::filesystem::path& path, const VectorField& f,
                               const std::string& header) {
  std::ofstream out = detail::open_out(path);
  out << header << '\n' << detail::grid_comment(f.grid) << '\n' << "i,j,vx,vy\n";
  for (int i = 0; i < f.grid.nx; ++i)
    for (int j = 0; j < f.grid.ny; ++j) {
      const Vec2 v = f.at(i, j);
      out << i << ',' << j << ',' << detail::fmt17(v.x) << ',' << detail::fmt17(v.y) << '\n';
    }
}

inline void write_scalar_field(const std::filesystem::path& path, const ScalarField& f,
                               const std::string& header) {
  std::ofstream out = detail::open_out(path);
  out << header << '\n' << detail::grid_comment(f.grid) << '\n' << "i,j,value\n";
  for (int i = 0; i < f.grid.nx; ++i)
    for (int j = 0; j < f.grid.ny; ++j)
      out << i << ',' << j << ',' << detail::fmt17(f.at(i, j)) << '\n';
}

namespace detail {

// Shared reader core: returns rows of numeric columns after the header.
inline std::vector<std::vector<double>> read_rows(const std::filesystem::path& path,
                                                  std::size_t min_cols, Grid2* grid,
                                                  bool* grid_seen, std::string* columns) {
  std::ifstream in = open_in(path);
  const std::string where = path.string();
  const std::string header = read_comments(in, where, grid, grid_seen);
  if (columns) *columns = header;
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const std::vector<std::string> toks = split(t, ',');
    if (toks.size() < min_cols)
      throw std::invalid_argument("short row in " + where + ": '" + t + "'");
    std::vector<double> row;
    row.reserve(toks.size());
    for (const std::string& tok : toks) row.push_back(parse_double(trim(tok), where));
    rows.push_back(std::move(row));
  }
  return rows;
}

// Infer grid dims from i,j columns when no grid comment was present.
inline Grid2 infer_grid(const std::vector<std::vector<double>>& rows) {
  int nx = 0, ny = 0;
  for (const auto& r : rows) {
    nx = std::max(nx, static_cast<int>(r[0]) + 1);
    ny = std::max(ny, static_cast<int>(r[1]) + 1);
  }
  if (nx < 2 || ny < 2) throw std::invalid_argument("grid file needs at least 2x2 nodes");
  Grid2 g{nx, ny, 1.0 / (std::max(nx, ny) - 1), 0.0, 0.0};
  return g;
}

}  // namespace detail

inline VectorField read_vector_field(const std::filesystem::path& path) {
  Grid2 g;
  bool seen = false;
  const auto rows = detail::read_rows(path, 4, &g, &seen, nullptr);
  if (!seen) g = detail::infer_grid(rows);
  VectorField f(g);
  if (rows.size() != g.size())
    throw std::invalid_argument("row count does not match grid in " + path.string());
  for (const auto& r : rows) {
    const int i = static_cast<int>(r[0]), j = static_cast<int>(r[1]);
    if (i < 0 || i >= g.nx || j < 0 || j >= g.ny)
      throw std::invalid_argument("node index out of range in " + path.string());
    f.at(i, j) = {r[2], r[3]};
  }
  f.check_finite();
  return f;
}

inline ScalarField read_scalar_field(const std::filesystem::path& path) {
  Grid2 g;
  bool seen = false;
  const auto rows = detail::read_rows(path, 3, &g, &seen, nullptr);
  if (!seen) g = detail::infer_grid(rows);
  ScalarField f(g);
  if (rows.size() != g.size())
    throw std::invalid_argument("row count does not match grid in " + path.string());
  for (const auto& r : rows) {
    const int i = static_cast<int>(r[0]), j = static_cast<int>(r[1]);
    if (i < 0 || i >= g.nx || j < 0 || j >= g.ny)
      throw std::invalid_argument("node index out of range in " + path.string());
    f.at(i, j) = r[2];
  }
  f.check_finite();
  return f;
}

// ---------------------------------------------------------------------------
// Landmarks.
// ---------------------------------------------------------------------------

inline void write_landmarks(const std::filesystem::path& path, const LandmarkSet& set,
                            const std::string& header) {
  std::ofstream out = detail::open_out(path);
  out << header << '\n' << "id,x,y\n";
  for (std::size_t a = 0; a < set.size(); ++a)
    out << set.ids[a] << ',' << detail::fmt17(set.points[a].x) << ','
        << detail::fmt17(set.points[a].y) << '\n';
}

inline LandmarkSet read_landmarks(const std::filesystem::path& path) {
  const auto rows = detail::read_rows(path, 3, nullptr, nullptr, nullptr);
  if (rows.empty()) throw std::invalid_argument("no landmarks in " + path.string());
  LandmarkSet set;
  for (const auto& r : rows) {
    set.ids.push_back(static_cast<int>(r[0]));
    set.points.push_back({r[1], r[2]});
  }
  for (const Vec2& p : set.points)
    if (!finite(p)) throw std::invalid_argument("non-finite landmark in " + path.string());
  return set;
}

// ---------------------------------------------------------------------------
// Diffeomorphisms and flow paths.
// ---------------------------------------------------------------------------

inline void write_diffeomorphism(const std::filesystem::path& path, const Diffeomorphism& d,
                                 const std::string& header) {
  std::ofstream out = detail::open_out(path);
  out << header << '\n' << detail::grid_comment(d.grid) << '\n';
  out << (d.has_inverse() ? "i,j,phix,phiy,invx,invy\n" : "i,j,phix,phiy\n");
  for (int i = 0; i < d.grid.nx; ++i)
    for (int j = 0; j < d.grid.ny; ++j) {
      const Vec2 p = d.map[d.grid.idx(i, j)];
      out << i << ',' << j << ',' << detail::fmt17(p.x) << ',' << detail::fmt17(p.y);
      if (d.has_inverse()) {
        const Vec2 q = d.inv[d.grid.idx(i, j)];
        out << ',' << detail::fmt17(q.x) << ',' << detail::fmt17(q.y);
      }
      out << '\n';
    }
}

inline Diffeomorphism read_diffeomorphism(const std::filesystem::path& path) {
  Grid2 g;
  bool seen = false;
  const auto rows = detail::read_rows(path, 4, &g, &seen, nullptr);
  if (!seen) g = detail::infer_grid(rows);
  if (rows.size() != g.size())
    throw std::invalid_argument("row count does not match grid in " + path.string());
  Diffeomorphism d(g);
  const bool with_inv = rows.front().size() >= 6;
  if (with_inv) d.inv.resize(g.size());
  for (const auto& r : rows) {
    const int i = static_cast<int>(r[0]), j = static_cast<int>(r[1]);
    if (i < 0 || i >= g.nx || j < 0 || j >= g.ny)
      throw std::invalid_argument("node index out of range in " + path.string());
    d.map[g.idx(i, j)] = {r[2], r[3]};
    if (with_inv) {
      if (r.size() < 6) throw std::invalid_argument("ragged inverse columns in " + path.string());
      d.inv[g.idx(i, j)] = {r[4], r[5]};
    }
  }
  return d;
}

// FlowPath directory layout: vel_t{m}.csv, or vel_t{m}_s{k}.csv for the k-th
// scale component of a tuple (indices 0-based).
inline std::string flow_file_name(std::size_t m) { return "vel_t" + std::to_string(m) + ".csv"; }
inline std::string flow_file_name(std::size_t m, std::size_t k) {
  return "vel_t" + std::to_string(m) + "_s" + std::to_string(k) + ".csv";
}

inline void write_flow_path(const std::filesystem::path& dir, const FlowPath& path,
                            const std::string& header) {
  std::filesystem::create_directories(dir);
  for (std::size_t m = 0; m < path.vel.size(); ++m)
    write_vector_field(dir / flow_file_name(m), path.vel[m], header);
}

// ---------------------------------------------------------------------------
// Controls.
// ---------------------------------------------------------------------------

inline void write_control(const std::filesystem::path& path, const Control& c,
                          const std::string& header) {
  std::ofstream out = detail::open_out(path);
  out << header << '\n';
  out << "# control time_steps=" << c.time_steps << " slots=" << c.n_slots
      << " points=" << c.n_points << '\n';
  out << "m,slot,point,px,py\n";
  for (int m = 0; m < c.time_steps; ++m)
    for (std::size_t s = 0; s < c.n_slots; ++s)
      for (std::size_t a = 0; a < c.n_points; ++a) {
        const Vec2 p = c.at(m, s, a);
        out << m << ',' << s << ',' << a << ',' << detail::fmt17(p.x) << ','
            << detail::fmt17(p.y) << '\n';
      }
}

inline Control read_control(const std::filesystem::path& path) {
  std::ifstream in = detail::open_in(path);
  const std::string where = path.string();
  int steps = 0;
  std::size_t slots = 0, points = 0;
  std::string line;
  bool shape_seen = false, header_seen = false;
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    if (t[0] == '#') {
      if (t.rfind("# control ", 0) == 0) {
        std::istringstream ss(t.substr(10));
        std::string kv;
        while (ss >> kv) {
          const std::size_t eq = kv.find('=');
          if (eq == std::string::npos) continue;
          const std::string k = kv.substr(0, eq), v = kv.substr(eq + 1);
          if (k == "time_steps") steps = static_cast<int>(detail::parse_int(v, where));
          else if (k == "slots") slots = static_cast<std::size_t>(detail::parse_int(v, where));
          else if (k == "points") points = static_cast<std::size_t>(detail::parse_int(v, where));
        }
        shape_seen = true;
      }
      continue;
    }
    if (!header_seen) {  // column header line
      header_seen = true;
      continue;
    }
    const auto toks = detail::split(t, ',');
    if (toks.size() < 5) throw std::invalid_argument("short row in " + where + ": '" + t + "'");
    std::vector<double> row;
    for (const std::string& tok : toks) row.push_back(detail::parse_double(detail::trim(tok), where));
    rows.push_back(std::move(row));
  }
  if (!shape_seen) throw std::invalid_argument("missing '# control ...' shape line in " + where);
  Control c = Control::zeros(steps, slots, points);
  if (rows.size() != c.p.size())
    throw std::invalid_argument("row count does not match control shape in " + where);
  for (const auto& r : rows) {
    const int m = static_cast<int>(r[0]);
    const std::size_t s = static_cast<std::size_t>(r[1]), a = static_cast<std::size_t>(r[2]);
    if (m < 0 || m >= steps || s >= slots || a >= points)
      throw std::invalid_argument("control index out of range in " + where);
    c.at(m, s, a) = {r[3], r[4]};
  }
  c.check_finite();
  return c;
}

// ---------------------------------------------------------------------------
// Optimizer history.
// ---------------------------------------------------------------------------

inline void write_energy_log(const std::filesystem::path& path,
                             const std::vector<IterRecord>& history,
                             const std::string& header) {
  std::ofstream out = detail::open_out(path);
  out << header << '\n' << "iter,total,reg,data,step,grad_norm\n";
  for (const IterRecord& r : history)
    out << r.iter << ',' << detail::fmt17(r.total) << ',' << detail::fmt17(r.reg) << ','
        << detail::fmt17(r.data) << ',' << detail::fmt17(r.step) << ','
        << detail::fmt17(r.grad_norm) << '\n';
}

// ---------------------------------------------------------------------------
// Images: ASCII PGM (P2). Values are normalized to [0,1] by maxval on read;
// writes quantize [0,1] back to the given maxval. Pixel column c, row r maps
// to grid node (i=c, j=r) with spacing 1/(max(W,H)-1) and origin 0.
// ---------------------------------------------------------------------------

inline ScalarField read_pgm(const std::filesystem::path& path) {
  std::ifstream in = detail::open_in(path);
  const std::string where = path.string();
  std::vector<std::string> toks;
  std::string line;
  while (std::getline(in, line)) {
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    std::istringstream ss(line);
    std::string t;
    while (ss >> t) toks.push_back(t);
  }
  if (toks.empty() || toks[0] != "P2")
    throw std::invalid_argument("not an ASCII PGM (P2) file: " + where);
  if (toks.size() < 4) throw std::invalid_argument("truncated PGM header in " + where);
  const int w = static_cast<int>(detail::parse_int(toks[1], where));
  const int h = static_cast<int>(detail::parse_int(toks[2], where));
  const long long maxval = detail::parse_int(toks[3], where);
  if (w < 2 || h < 2 || maxval < 1)
    throw std::invalid_argument("bad PGM dimensions in " + where);
  if (toks.size() != 4 + static_cast<std::size_t>(w) * h)
    throw std::invalid_argument("PGM pixel count mismatch in " + where);
  Grid2 g{w, h, 1.0 / (std::max(w, h) - 1), 0.0, 0.0};
  ScalarField f(g);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const long long v = detail::parse_int(toks[4 + static_cast<std::size_t>(r) * w + c], where);
      if (v < 0 || v > maxval) throw std::invalid_argument("PGM value out of range in " + where);
      f.at(c, r) = static_cast<double>(v) / static_cast<double>(maxval);
    }
  return f;
}

inline void write_pgm(const std::filesystem::path& path, const ScalarField& f, int maxval = 255) {
  if (maxval < 1 || maxval > 65535) throw std::invalid_argument("PGM maxval out of range");
  std::ofstream out = detail::open_out(path);
  out << "P2\n" << f.grid.nx << ' ' << f.grid.ny << '\n' << maxval << '\n';
  for (int r = 0; r < f.grid.ny; ++r) {
    for (int c = 0; c < f.grid.nx; ++c) {
      double v = std::min(std::max(f.at(c, r), 0.0), 1.0);
      out << static_cast<int>(std::lround(v * maxval)) << (c + 1 == f.grid.nx ? '\n' : ' ');
    }
  }
}

// Reads an image in either accepted format, deciding by extension.
inline ScalarField read_image(const std::filesystem::path& path) {
  if (path.extension() == ".pgm") return read_pgm(path);
  return read_scalar_field(path);
}

}  // namespace msdiffeo
