#include "screenreg/pto.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace screenreg {

namespace {

std::string fmt(const char* f, auto... args) {
  char buf[512];
  const int n = std::snprintf(buf, sizeof buf, f, args...);
  return std::string(buf, static_cast<std::size_t>(std::max(0, n)));
}

/// Value of a token like `x10.5` or `n"name"` on a PTO line.
bool field(const std::vector<std::string>& tokens, const std::string& key, std::string& out) {
  for (const auto& t : tokens)
    if (t.size() > key.size() && t.compare(0, key.size(), key) == 0) {
      out = t.substr(key.size());
      return true;
    }
  return false;
}

std::vector<std::string> tokenize(const std::string& line) {
  std::vector<std::string> out;
  std::size_t k = 0;
  while (k < line.size()) {
    while (k < line.size() && std::isspace(static_cast<unsigned char>(line[k]))) ++k;
    if (k >= line.size()) break;
    std::string tok;
    bool quoted = false;
    while (k < line.size() && (quoted || !std::isspace(static_cast<unsigned char>(line[k])))) {
      if (line[k] == '"') quoted = !quoted;
      tok += line[k++];
    }
    out.push_back(tok);
  }
  return out;
}

double num(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw Error(ErrorKind::Format, "malformed " + what + " value '" + s + "' in PTO file");
  }
}

}  // namespace

void sort_control_points(ControlPointSet& cps) {
  std::stable_sort(cps.begin(), cps.end(), [](const ControlPoint& a, const ControlPoint& b) {
    return std::tie(a.tile_a, a.tile_b) < std::tie(b.tile_a, b.tile_b);
  });
}

std::string format_pto(const PtoProject& project) {
  std::string out;
  out += "# hugin project written by screenreg\n";
  out += "p f2 w3000 h1500 v360 n\"TIFF_m c:LZW\"\n";
  out += "m g1 i0 m2 p0.00784314\n";
  for (const auto& im : project.images)
    out += fmt("i w%d h%d f0 v50 Ra0 Rb0 Rc0 Rd0 Re0 Eev0 Er1 Eb1 r0 p0 y0 TrX0 TrY0 TrZ0 j0 a0 b0 c0 d0 e0 g0 t0 Va1 Vb0 Vc0 Vd0 Vx0 Vy0 Vm5 n\"%s\"\n",
               im.width, im.height, im.filename.c_str());
  out += "\n# control points\n";
  ControlPointSet cps = project.points;
  sort_control_points(cps);
  for (const auto& c : cps) {
    out += fmt("#-screenreg %.17g %.17g %.17g %.17g %.17g %.17g %.17g %.17g\n", c.lattice_a.x(),
               c.lattice_a.y(), c.lattice_b.x(), c.lattice_b.y(), c.scan_a.x(), c.scan_a.y(),
               c.scan_b.x(), c.scan_b.y());
    out += fmt("c n%d N%d x%.6f y%.6f X%.6f Y%.6f t0\n", c.tile_a, c.tile_b, c.scan_a.x(), c.scan_a.y(),
               c.scan_b.x(), c.scan_b.y());
  }
  return out;
}

PtoProject parse_pto(const std::string& text) {
  PtoProject p;
  std::istringstream in(text);
  std::string line;
  bool have_exact = false;
  double exact[8] = {};
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.rfind("#-screenreg ", 0) == 0) {
      std::istringstream ls(line.substr(12));
      have_exact = true;
      for (double& v : exact)
        if (!(ls >> v)) have_exact = false;
      continue;
    }
    if (line.empty() || line[0] == '#') continue;
    const auto tokens = tokenize(line);
    if (tokens.empty()) continue;
    std::string v;
    if (tokens[0] == "i") {
      PtoImage im;
      if (!field(tokens, "w", v)) throw Error(ErrorKind::Format, "i-line without width at line " + std::to_string(lineno));
      im.width = static_cast<int>(num(v, "width"));
      if (!field(tokens, "h", v)) throw Error(ErrorKind::Format, "i-line without height at line " + std::to_string(lineno));
      im.height = static_cast<int>(num(v, "height"));
      if (field(tokens, "n", v)) {
        if (v.size() >= 2 && v.front() == '"' && v.back() == '"') v = v.substr(1, v.size() - 2);
        im.filename = v;
      }
      p.images.push_back(im);
    } else if (tokens[0] == "c") {
      ControlPoint c;
      const char* keys[] = {"n", "N", "x", "y", "X", "Y"};
      double vals[6];
      for (int k = 0; k < 6; ++k) {
        if (!field(tokens, keys[k], v))
          throw Error(ErrorKind::Format, std::string("c-line without ") + keys[k] + " at line " + std::to_string(lineno));
        vals[k] = num(v, keys[k]);
      }
      c.tile_a = static_cast<int>(vals[0]);
      c.tile_b = static_cast<int>(vals[1]);
      c.scan_a = Vec2(vals[2], vals[3]);
      c.scan_b = Vec2(vals[4], vals[5]);
      c.lattice_a = c.lattice_b = Vec2(std::nan(""), std::nan(""));
      // The exact comment is used only when it agrees with the rounded c-line.
      if (have_exact && std::abs(exact[4] - vals[2]) <= 5.1e-7 && std::abs(exact[5] - vals[3]) <= 5.1e-7 &&
          std::abs(exact[6] - vals[4]) <= 5.1e-7 && std::abs(exact[7] - vals[5]) <= 5.1e-7) {
        c.lattice_a = Vec2(exact[0], exact[1]);
        c.lattice_b = Vec2(exact[2], exact[3]);
        c.scan_a = Vec2(exact[4], exact[5]);
        c.scan_b = Vec2(exact[6], exact[7]);
      }
      have_exact = false;
      p.points.push_back(c);
    }
  }
  return p;
}

void export_pto(const PtoProject& project, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  out << format_pto(project);
  if (!out) throw Error(ErrorKind::Io, "write failed for " + path.string());
}

PtoProject load_pto(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_pto(ss.str());
}

}  // namespace screenreg
