#pragma once

#include "screenreg/analysis.hpp"
#include "screenreg/mesh.hpp"
#include "screenreg/mosaic.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace screenreg {

/// Binary sidecar layout: 8-byte magic, u32 version, u32 payload kind,
/// u64 payload size, payload, u64 FNV-1a checksum of the payload.
/// Little-endian. Readers reject other versions with ErrorKind::Format.
inline constexpr std::uint32_t kSidecarVersion = 1;

enum class SidecarKind : std::uint32_t { Grid = 1, Mesh = 2, Mosaic = 3 };

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes);
std::string hex64(std::uint64_t v);

std::vector<std::uint8_t> encode_grid(const PatchGrid& pg);
PatchGrid decode_grid(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_mesh(const MeshTransform& mesh);
MeshTransform decode_mesh(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_mosaic(const MosaicImage& m);
MosaicImage decode_mosaic(std::span<const std::uint8_t> bytes);

/// Writes through a temporary file and rename, so readers never see a
/// partial sidecar.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text_atomic(const std::filesystem::path& path, const std::string& text);
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
std::string read_text(const std::filesystem::path& path);

void write_grid(const std::filesystem::path& path, const PatchGrid& pg);
PatchGrid read_grid(const std::filesystem::path& path);
void write_mesh(const std::filesystem::path& path, const MeshTransform& mesh);
MeshTransform read_mesh(const std::filesystem::path& path);
void write_mosaic(const std::filesystem::path& path, const MosaicImage& m);
MosaicImage read_mosaic(const std::filesystem::path& path);

/// Checks magic, version, kind and checksum without decoding.
bool sidecar_intact(const std::filesystem::path& path, SidecarKind kind);

/// 16-bit single-channel export: pixel (i * sites + s, j); value / scale.
/// Returns the scale used (the largest intensity, or 1).
double write_mosaic_tiff(const std::filesystem::path& path, const MosaicImage& m);

std::string grid_summary_json(const PatchGrid& pg, double area_coverage);
std::string mesh_summary_json(const MeshTransform& mesh, const MeshFitReport& report);

}  // namespace screenreg
