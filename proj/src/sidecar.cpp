#include "screenreg/sidecar.hpp"

#include "screenreg/image_io.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <system_error>

namespace screenreg {

namespace {

// Sidecars are stored in native order, which must be little-endian.
static_assert(std::endian::native == std::endian::little);

constexpr char kMagic[8] = {'S', 'C', 'R', 'N', 'R', 'E', 'G', '\0'};

class Writer {
 public:
  template <class T>
  void put(const T& v) {
    static_assert(std::is_trivially_copyable_v<T>);
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }
  void put_vec2(const Vec2& v) {
    put(v.x());
    put(v.y());
  }
  std::vector<std::uint8_t>& bytes() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}
  template <class T>
  T get() {
    if (pos_ + sizeof(T) > b_.size()) throw Error(ErrorKind::Format, "sidecar payload truncated");
    T v;
    std::memcpy(&v, b_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  Vec2 get_vec2() {
    const double x = get<double>();
    return {x, get<double>()};
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> wrap(SidecarKind kind, const std::vector<std::uint8_t>& payload) {
  Writer w;
  for (char c : kMagic) w.put(c);
  w.put(kSidecarVersion);
  w.put(static_cast<std::uint32_t>(kind));
  w.put(static_cast<std::uint64_t>(payload.size()));
  auto& out = w.bytes();
  out.insert(out.end(), payload.begin(), payload.end());
  w.put(fnv1a64(payload));
  return std::move(out);
}

std::span<const std::uint8_t> unwrap(std::span<const std::uint8_t> bytes, SidecarKind kind) {
  constexpr std::size_t header = 8 + 4 + 4 + 8;
  if (bytes.size() < header + 8) throw Error(ErrorKind::Format, "sidecar too short");
  if (std::memcmp(bytes.data(), kMagic, 8) != 0) throw Error(ErrorKind::Format, "not a sidecar file");
  Reader r(bytes.subspan(8, header - 8));
  const auto version = r.get<std::uint32_t>();
  if (version != kSidecarVersion)
    throw Error(ErrorKind::Format, "sidecar version mismatch: file " + std::to_string(version) + ", expected " +
                                       std::to_string(kSidecarVersion));
  const auto k = r.get<std::uint32_t>();
  if (k != static_cast<std::uint32_t>(kind)) throw Error(ErrorKind::Format, "sidecar holds a different payload kind");
  const auto size = r.get<std::uint64_t>();
  if (size != bytes.size() - header - 8) throw Error(ErrorKind::Format, "sidecar size mismatch");
  const auto payload = bytes.subspan(header, size);
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + header + size, 8);
  if (stored != fnv1a64(payload)) throw Error(ErrorKind::Format, "sidecar checksum mismatch");
  return payload;
}

}  // namespace

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 14695981039346656037ull;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 1099511628211ull;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::vector<std::uint8_t> encode_grid(const PatchGrid& pg) {
  Writer w;
  const auto& b = pg.bounds();
  for (int v : {b.u0, b.v0, b.width, b.height, pg.sites_per_cell(), pg.image_width(), pg.image_height()})
    w.put(static_cast<std::int32_t>(v));
  w.put_vec2(pg.seed_frame.origin);
  w.put_vec2(pg.seed_frame.a1);
  w.put_vec2(pg.seed_frame.a2);
  for (const auto& r : pg.records()) {
    w.put_vec2(r.center);
    w.put(static_cast<std::uint8_t>(r.valid ? 1 : 0));
    w.put(r.weight);
  }
  return wrap(SidecarKind::Grid, w.bytes());
}

PatchGrid decode_grid(std::span<const std::uint8_t> bytes) {
  Reader r(unwrap(bytes, SidecarKind::Grid));
  LatticeRect b;
  b.u0 = r.get<std::int32_t>();
  b.v0 = r.get<std::int32_t>();
  b.width = r.get<std::int32_t>();
  b.height = r.get<std::int32_t>();
  const int sites = r.get<std::int32_t>();
  const int iw = r.get<std::int32_t>();
  const int ih = r.get<std::int32_t>();
  if (b.width < 0 || b.height < 0 || sites < 1) throw Error(ErrorKind::Format, "invalid grid dimensions");
  PatchGrid pg(b, sites, iw, ih);
  pg.seed_frame.origin = r.get_vec2();
  pg.seed_frame.a1 = r.get_vec2();
  pg.seed_frame.a2 = r.get_vec2();
  for (auto& rec : pg.records()) {
    rec.center = r.get_vec2();
    rec.valid = r.get<std::uint8_t>() != 0;
    rec.weight = r.get<float>();
  }
  if (!r.done()) throw Error(ErrorKind::Format, "trailing bytes in grid sidecar");
  return pg;
}

std::vector<std::uint8_t> encode_mesh(const MeshTransform& mesh) {
  Writer w;
  w.put(static_cast<std::int32_t>(mesh.nx()));
  w.put(static_cast<std::int32_t>(mesh.ny()));
  w.put_vec2(mesh.domain_min());
  w.put_vec2(mesh.domain_max());
  w.put_vec2(mesh.lens().center);
  w.put(mesh.lens().k1);
  w.put(mesh.lens().k2);
  w.put(mesh.lens().norm_radius);
  for (const auto& h : mesh.nodes())
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) w.put(h.matrix()(r, c));
  for (auto f : mesh.solved_flags()) w.put(f);
  return wrap(SidecarKind::Mesh, w.bytes());
}

MeshTransform decode_mesh(std::span<const std::uint8_t> bytes) {
  Reader r(unwrap(bytes, SidecarKind::Mesh));
  const int nx = r.get<std::int32_t>(), ny = r.get<std::int32_t>();
  if (nx < 2 || ny < 2 || static_cast<long long>(nx) * ny > 100000000LL)
    throw Error(ErrorKind::Format, "invalid mesh dimensions");
  const Vec2 dmin = r.get_vec2(), dmax = r.get_vec2();
  LensModel lens;
  lens.center = r.get_vec2();
  lens.k1 = r.get<double>();
  lens.k2 = r.get<double>();
  lens.norm_radius = r.get<double>();
  MeshTransform mesh(nx, ny, dmin, dmax, lens);
  std::vector<Mat3> ms(static_cast<std::size_t>(nx) * ny);
  for (auto& m : ms)
    for (int i = 0; i < 3; ++i)
      for (int c = 0; c < 3; ++c) m(i, c) = r.get<double>();
  for (int l = 0; l < ny; ++l)
    for (int k = 0; k < nx; ++k) {
      const bool solved = r.get<std::uint8_t>() != 0;
      mesh.set_node(k, l, Homography(ms[static_cast<std::size_t>(l) * nx + k]), solved);
    }
  if (!r.done()) throw Error(ErrorKind::Format, "trailing bytes in mesh sidecar");
  return mesh;
}

std::vector<std::uint8_t> encode_mosaic(const MosaicImage& m) {
  Writer w;
  const auto& b = m.bounds();
  for (int v : {b.u0, b.v0, b.width, b.height, m.sites_per_cell()}) w.put(static_cast<std::int32_t>(v));
  for (float v : m.values()) w.put(v);
  for (auto f : m.valid_flags()) w.put(f);
  return wrap(SidecarKind::Mosaic, w.bytes());
}

MosaicImage decode_mosaic(std::span<const std::uint8_t> bytes) {
  Reader r(unwrap(bytes, SidecarKind::Mosaic));
  LatticeRect b;
  b.u0 = r.get<std::int32_t>();
  b.v0 = r.get<std::int32_t>();
  b.width = r.get<std::int32_t>();
  b.height = r.get<std::int32_t>();
  const int sites = r.get<std::int32_t>();
  if (b.width < 0 || b.height < 0 || sites < 1) throw Error(ErrorKind::Format, "invalid mosaic dimensions");
  MosaicImage m(b, sites);
  for (auto& v : m.values()) v = r.get<float>();
  for (auto& f : m.valid_flags()) f = r.get<std::uint8_t>();
  if (!r.done()) throw Error(ErrorKind::Format, "trailing bytes in mosaic sidecar");
  return m;
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::Io, "cannot write " + tmp);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorKind::Io, "write failed for " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(ErrorKind::Io, "cannot move " + tmp + " into place: " + ec.message());
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot read " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

std::string read_text(const std::filesystem::path& path) {
  const auto b = read_file(path);
  return std::string(b.begin(), b.end());
}

void write_grid(const std::filesystem::path& path, const PatchGrid& pg) { write_file_atomic(path, encode_grid(pg)); }
PatchGrid read_grid(const std::filesystem::path& path) { return decode_grid(read_file(path)); }
void write_mesh(const std::filesystem::path& path, const MeshTransform& m) { write_file_atomic(path, encode_mesh(m)); }
MeshTransform read_mesh(const std::filesystem::path& path) { return decode_mesh(read_file(path)); }
void write_mosaic(const std::filesystem::path& path, const MosaicImage& m) { write_file_atomic(path, encode_mosaic(m)); }
MosaicImage read_mosaic(const std::filesystem::path& path) { return decode_mosaic(read_file(path)); }

bool sidecar_intact(const std::filesystem::path& path, SidecarKind kind) {
  try {
    const auto bytes = read_file(path);
    unwrap(bytes, kind);
    return true;
  } catch (const Error&) {
    return false;
  }
}

double write_mosaic_tiff(const std::filesystem::path& path, const MosaicImage& m) {
  const auto& b = m.bounds();
  const int s = m.sites_per_cell();
  float mx = 0;
  for (std::size_t k = 0; k < m.values().size(); ++k)
    if (m.valid_flags()[k]) mx = std::max(mx, m.values()[k]);
  const double scale = mx > 0 ? mx : 1.0;
  LinearImage img(std::max(1, b.width * s), std::max(1, b.height), 1);
  for (int j = 0; j < b.height; ++j)
    for (int i = 0; i < b.width; ++i)
      for (int k = 0; k < s; ++k)
        if (m.valid(b.u0 + i, b.v0 + j, k)) img.at(i * s + k, j) = m.value(b.u0 + i, b.v0 + j, k);
  write_image(path, img, SampleDepth::U16, static_cast<float>(scale));
  return scale;
}

std::string grid_summary_json(const PatchGrid& pg, double area_cov) {
  nlohmann::json j;
  const auto& b = pg.bounds();
  j["bounds"] = {{"u0", b.u0}, {"v0", b.v0}, {"width", b.width}, {"height", b.height}};
  j["sites_per_cell"] = pg.sites_per_cell();
  j["image"] = {pg.image_width(), pg.image_height()};
  j["valid_sites"] = pg.valid_count();
  j["coverage"] = coverage(pg);
  j["area_coverage"] = area_cov;
  j["seed_frame"] = {{"origin", {pg.seed_frame.origin.x(), pg.seed_frame.origin.y()}},
                     {"a1", {pg.seed_frame.a1.x(), pg.seed_frame.a1.y()}},
                     {"a2", {pg.seed_frame.a2.x(), pg.seed_frame.a2.y()}}};
  return j.dump(2);
}

std::string mesh_summary_json(const MeshTransform& mesh, const MeshFitReport& report) {
  nlohmann::json j;
  j["nodes"] = {mesh.nx(), mesh.ny()};
  j["solved_nodes"] = mesh.solved_count();
  j["domain_min"] = {mesh.domain_min().x(), mesh.domain_min().y()};
  j["domain_max"] = {mesh.domain_max().x(), mesh.domain_max().y()};
  j["lens"] = {{"center", {mesh.lens().center.x(), mesh.lens().center.y()}},
               {"k1", mesh.lens().k1},
               {"k2", mesh.lens().k2},
               {"norm_radius", mesh.lens().norm_radius}};
  j["pairs"] = report.pairs;
  j["global_inliers"] = report.global_inliers;
  j["rms_residual_px"] = report.rms_residual_px;
  j["max_residual_px"] = report.max_residual_px;
  return j.dump(2);
}

}  // namespace screenreg
