#include "screenreg/pto.hpp"

#include "support.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace screenreg;

namespace {

ControlPoint cp(int a, int b, Vec2 sa, Vec2 sb, Vec2 la = Vec2::Zero(), Vec2 lb = Vec2::Zero()) {
  ControlPoint c;
  c.tile_a = a;
  c.tile_b = b;
  c.scan_a = sa;
  c.scan_b = sb;
  c.lattice_a = la;
  c.lattice_b = lb;
  return c;
}

std::vector<std::string> lines_starting(const std::string& text, const std::string& prefix) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line))
    if (line.rfind(prefix, 0) == 0) out.push_back(line);
  return out;
}

}  // namespace

TEST(Pto, ControlPointLineFormat) {
  PtoProject p;
  p.images = {{1000, 1000, "a.tif"}, {1000, 1000, "b.tif"}};
  p.points = {cp(0, 1, Vec2(10.5, 20.25), Vec2(110.5, 20.25))};
  const auto c = lines_starting(format_pto(p), "c ");
  ASSERT_EQ(c.size(), 1u);
  EXPECT_EQ(c[0], "c n0 N1 x10.500000 y20.250000 X110.500000 Y20.250000 t0");
}

TEST(Pto, ImageLinesCarrySizeAndName) {
  PtoProject p;
  p.images = {{640, 480, "tiles/r0c0.tif"}};
  const auto i = lines_starting(format_pto(p), "i ");
  ASSERT_EQ(i.size(), 1u);
  EXPECT_NE(i[0].find(" w640 "), std::string::npos);
  EXPECT_NE(i[0].find(" h480 "), std::string::npos);
  EXPECT_NE(i[0].find("n\"tiles/r0c0.tif\""), std::string::npos);
}

TEST(Pto, NoPairsNoControlLines) {
  PtoProject p;
  p.images = {{10, 10, "a.tif"}};
  const std::string text = format_pto(p);
  EXPECT_TRUE(lines_starting(text, "c ").empty());
  const PtoProject back = parse_pto(text);
  EXPECT_EQ(back.images, p.images);
  EXPECT_TRUE(back.points.empty());
}

TEST(Pto, RoundTripIsExact) {
  PtoProject p;
  p.images = {{1000, 900, "a.tif"}, {1000, 900, "b.tif"}, {1000, 900, "c.tif"}};
  p.points = {cp(0, 1, Vec2(1.0 / 3, 2.0 / 7), Vec2(700.123456789, 5e-9), Vec2(0.1, 0.2), Vec2(-70.1, 0.2)),
              cp(1, 2, Vec2(3.25, 4.5), Vec2(8.125, 9.0625), Vec2(1, 2), Vec2(3, 4))};
  const PtoProject back = parse_pto(format_pto(p));
  EXPECT_EQ(back.images, p.images);
  EXPECT_EQ(back.points, p.points);
}

TEST(Pto, PlainHuginLinesParse) {
  const std::string text =
      "p f2 w3000 h1500 v360\n"
      "i w100 h50 f0 n\"x.tif\"\n"
      "i w100 h50 f0 n\"y.tif\"\n"
      "c n0 N1 x1.5 y2.5 X3.5 Y4.5 t0\n";
  const PtoProject p = parse_pto(text);
  ASSERT_EQ(p.points.size(), 1u);
  EXPECT_EQ(p.points[0].scan_a, Vec2(1.5, 2.5));
  EXPECT_EQ(p.points[0].scan_b, Vec2(3.5, 4.5));
  EXPECT_EQ(p.images[1].filename, "y.tif");
}

TEST(Pto, MalformedNumberRejected) {
  try {
    parse_pto("i w100 h50 n\"a\"\ni w100 h50 n\"b\"\nc n0 N1 xabc y2 X3 Y4 t0\n");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Format);
  }
}

TEST(Pto, CanonicalOrder) {
  ControlPointSet s = {cp(1, 2, Vec2(1, 0), Vec2(0, 0)), cp(0, 1, Vec2(2, 0), Vec2(0, 0)),
                       cp(1, 2, Vec2(3, 0), Vec2(0, 0)), cp(0, 1, Vec2(4, 0), Vec2(0, 0))};
  sort_control_points(s);
  EXPECT_EQ(s[0].scan_a.x(), 2);
  EXPECT_EQ(s[1].scan_a.x(), 4);
  EXPECT_EQ(s[2].scan_a.x(), 1);
  EXPECT_EQ(s[3].scan_a.x(), 3);
}

TEST(Pto, FileRoundTrip) {
  screenreg::testing::TempDir dir("pto");
  PtoProject p;
  p.images = {{5, 5, "a.tif"}, {5, 5, "b.tif"}};
  p.points = {cp(0, 1, Vec2(1, 2), Vec2(3, 4))};
  export_pto(p, dir.path() / "x.pto");
  EXPECT_EQ(load_pto(dir.path() / "x.pto").points, p.points);
}
