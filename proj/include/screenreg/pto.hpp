#pragma once

#include "screenreg/stitch.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace screenreg {

struct PtoImage {
  int width = 0;
  int height = 0;
  std::string filename;

  friend bool operator==(const PtoImage&, const PtoImage&) = default;
};

struct PtoProject {
  std::vector<PtoImage> images;
  ControlPointSet points;
};

/// Hugin project text: one i-line per image and one c-line per control
/// point, `c n<A> N<B> x<xa> y<ya> X<xb> Y<yb> t0` with 6 decimals. Each
/// c-line is preceded by a comment carrying the exact values and the
/// lattice originals, which Hugin ignores.
std::string format_pto(const PtoProject& project);
PtoProject parse_pto(const std::string& text);

void export_pto(const PtoProject& project, const std::filesystem::path& path);
PtoProject load_pto(const std::filesystem::path& path);

/// Canonical order: tile pair, then original point order.
void sort_control_points(ControlPointSet& cps);

}  // namespace screenreg
