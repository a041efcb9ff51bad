#include "screenreg/sidecar.hpp"

#include "support.hpp"

#include <gtest/gtest.h>

#include <functional>
#include <random>

using namespace screenreg;
using screenreg::testing::TempDir;

namespace {

PatchGrid sample_grid() {
  PatchGrid pg({-3, 2, 7, 5}, 3, 640, 480);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0, 400);
  for (auto& r : pg.records()) {
    r.center = Vec2(u(rng), u(rng));
    r.valid = u(rng) > 100;
    r.weight = static_cast<float>(u(rng) / 400);
  }
  pg.seed_frame.origin = Vec2(12.25, 7.5);
  pg.seed_frame.a1 = Vec2(9.9, 0.3);
  return pg;
}

MeshTransform sample_mesh() {
  LensModel lens = LensModel::for_image(640, 480);
  lens.k1 = -0.01;
  MeshTransform m(3, 2, {-3, 2}, {4, 7}, lens);
  for (int l = 0; l < 2; ++l)
    for (int k = 0; k < 3; ++k) m.set_node(k, l, Homography::similarity(10 + 0.1 * k, 0.01 * l, Vec2(k, l)), k != 1);
  return m;
}

MosaicImage sample_mosaic() {
  MosaicImage m({0, 0, 6, 4}, 3);
  for (int j = 0; j < 4; ++j)
    for (int i = 0; i < 6; ++i)
      for (int s = 0; s < 3; ++s)
        if ((i + j + s) % 4) m.set(i, j, s, 0.1f * static_cast<float>(i + j) + 0.01f * static_cast<float>(s));
  return m;
}

void flip_byte(const std::filesystem::path& p, std::size_t at) {
  auto bytes = read_file(p);
  bytes.at(at) ^= 0x5a;
  write_file_atomic(p, bytes);
}

ErrorKind read_kind(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  return ErrorKind::InvalidArgument;
}

}  // namespace

TEST(Sidecar, Fnv1aKnownValues) {
  EXPECT_EQ(fnv1a64({}), 0xcbf29ce484222325ull);
  const std::uint8_t a[] = {'a'};
  EXPECT_EQ(fnv1a64(a), 0xaf63dc4c8601ec8cull);
  EXPECT_EQ(hex64(0xabcull), "0000000000000abc");
}

TEST(Sidecar, GridRoundTripBitIdentical) {
  TempDir dir("grid");
  const PatchGrid pg = sample_grid();
  write_grid(dir.path() / "g.bin", pg);
  const PatchGrid back = read_grid(dir.path() / "g.bin");
  EXPECT_EQ(encode_grid(back), encode_grid(pg));
  EXPECT_EQ(back.bounds().u0, -3);
  EXPECT_EQ(back.records()[5].center, pg.records()[5].center);
  EXPECT_TRUE(sidecar_intact(dir.path() / "g.bin", SidecarKind::Grid));
  EXPECT_FALSE(sidecar_intact(dir.path() / "g.bin", SidecarKind::Mesh));
}

TEST(Sidecar, MeshRoundTripBitIdentical) {
  TempDir dir("mesh");
  const MeshTransform m = sample_mesh();
  write_mesh(dir.path() / "m.bin", m);
  const MeshTransform back = read_mesh(dir.path() / "m.bin");
  EXPECT_EQ(encode_mesh(back), encode_mesh(m));
  EXPECT_EQ(back.forward({0.3, 4.4}), m.forward({0.3, 4.4}));
  EXPECT_FALSE(back.node_solved(1, 0));
  EXPECT_EQ(back.lens().k1, -0.01);
}

TEST(Sidecar, MosaicRoundTripBitIdentical) {
  TempDir dir("mosaic");
  const MosaicImage m = sample_mosaic();
  write_mosaic(dir.path() / "x.bin", m);
  const MosaicImage back = read_mosaic(dir.path() / "x.bin");
  EXPECT_EQ(back.values(), m.values());
  EXPECT_EQ(back.valid_flags(), m.valid_flags());
}

TEST(Sidecar, CorruptedPayloadDetected) {
  TempDir dir("corrupt");
  const auto p = dir.path() / "g.bin";
  write_grid(p, sample_grid());
  flip_byte(p, 40);
  EXPECT_FALSE(sidecar_intact(p, SidecarKind::Grid));
  EXPECT_EQ(read_kind([&] { read_grid(p); }), ErrorKind::Format);
}

TEST(Sidecar, VersionMismatchRejected) {
  TempDir dir("version");
  const auto p = dir.path() / "m.bin";
  write_mosaic(p, sample_mosaic());
  flip_byte(p, 8);  // first byte of the version field
  EXPECT_FALSE(sidecar_intact(p, SidecarKind::Mosaic));
  EXPECT_EQ(read_kind([&] { read_mosaic(p); }), ErrorKind::Format);
}

TEST(Sidecar, TruncatedFileRejected) {
  TempDir dir("trunc");
  const auto p = dir.path() / "g.bin";
  write_grid(p, sample_grid());
  auto bytes = read_file(p);
  bytes.resize(bytes.size() / 2);
  write_file_atomic(p, bytes);
  EXPECT_EQ(read_kind([&] { read_grid(p); }), ErrorKind::Format);
}

TEST(Sidecar, MissingFileIsIoError) {
  EXPECT_EQ(read_kind([] { read_grid("/nonexistent/grid.bin"); }), ErrorKind::Io);
}

TEST(Sidecar, WrongKindRejected) {
  TempDir dir("kind");
  const auto p = dir.path() / "g.bin";
  write_grid(p, sample_grid());
  EXPECT_EQ(read_kind([&] { read_mesh(p); }), ErrorKind::Format);
}

TEST(Sidecar, MosaicTiffScale) {
  TempDir dir("tiff");
  EXPECT_NEAR(write_mosaic_tiff(dir.path() / "m.tif", sample_mosaic()), 0.1 * 8 + 0.02, 1e-6);
  MosaicImage dim({0, 0, 2, 2}, 3);
  dim.set(0, 0, 0, 0.5f);
  EXPECT_EQ(write_mosaic_tiff(dir.path() / "d.tif", dim), 0.5);
  EXPECT_TRUE(std::filesystem::exists(dir.path() / "d.tif"));
  EXPECT_EQ(write_mosaic_tiff(dir.path() / "e.tif", MosaicImage({0, 0, 2, 2}, 3)), 1.0);
}
