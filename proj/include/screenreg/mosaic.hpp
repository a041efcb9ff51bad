#pragma once

#include "screenreg/analysis.hpp"
#include "screenreg/core.hpp"
#include "screenreg/image_io.hpp"
#include "screenreg/mesh.hpp"
#include "screenreg/profiling.hpp"

#include <string>
#include <vector>

namespace screenreg {

/// One intensity per screen site at the screen's native resolution.
class MosaicImage {
 public:
  MosaicImage() = default;
  MosaicImage(LatticeRect bounds, int sites_per_cell);

  const LatticeRect& bounds() const noexcept { return bounds_; }
  int sites_per_cell() const noexcept { return sites_; }
  bool empty() const noexcept { return values_.empty(); }

  bool valid(int i, int j, int s) const { return valid_[index(i, j, s)] != 0; }
  float value(int i, int j, int s) const { return values_[index(i, j, s)]; }
  /// Marks the site valid with the given intensity.
  void set(int i, int j, int s, float x);
  /// Marks the site invalid and clears its intensity.
  void clear(int i, int j, int s);

  std::size_t valid_count() const;

  const std::vector<float>& values() const noexcept { return values_; }
  const std::vector<std::uint8_t>& valid_flags() const noexcept { return valid_; }
  std::vector<float>& values() noexcept { return values_; }
  std::vector<std::uint8_t>& valid_flags() noexcept { return valid_; }

 private:
  std::size_t index(int i, int j, int s) const {
    return ((static_cast<std::size_t>(j - bounds_.v0) * bounds_.width) + (i - bounds_.u0)) *
               sites_ + s;
  }

  LatticeRect bounds_;
  int sites_ = 0;
  std::vector<float> values_;
  std::vector<std::uint8_t> valid_;
};

struct CollectParams {
  double kernel_factor = 0.3;  // kernel radius as a fraction of the site extent
};

/// Samples each valid site of a profile-space image at its mesh position.
MosaicImage collect_profiled(const LinearImage& primaries, const MeshTransform& mesh,
                             const PatchGrid& pg, const ScreenSpec& spec,
                             const CollectParams& params = {});

/// Same, starting from the linear scan and its profile.
MosaicImage collect(const LinearImage& img, const MatrixProfile& profile, const MeshTransform& mesh,
                    const PatchGrid& pg, const ScreenSpec& spec, const CollectParams& params = {});

enum class DemosaicMode {
  SiteGrid,  // two output pixels per cell along each axis
  Cell,      // one output pixel per cell
};

struct DemosaicParams {
  DemosaicMode mode = DemosaicMode::SiteGrid;
  double fill_radius_cells = 2.0;
};

struct DemosaicResult {
  LinearImage rgb;
  std::vector<std::uint8_t> valid;  // per output pixel; 0 where nothing could be filled
  std::vector<std::uint8_t> direct; // per output pixel; 1 where every channel had full support
  std::size_t filled = 0;           // output samples that needed the fill path
};

/// Output pixel (x, y) sits at lattice position origin + (x, y) / scale.
double demosaic_scale(DemosaicMode mode);
Vec2 demosaic_origin(const LatticeRect& bounds, DemosaicMode mode);

DemosaicResult demosaic(const MosaicImage& m, const ScreenSpec& spec, const DemosaicParams& params = {});

struct RenderParams {
  Mat3 matrix = Mat3::Identity();  // screen primaries to display rgb
  double gamma = 1.0;              // display encode exponent 1/gamma
  double gain = 1.0;
  bool auto_brighten = false;      // gain chosen so the 99th percentile luminance lands at 0.9
  SampleDepth depth = SampleDepth::U16;

  std::string to_json() const;
  static RenderParams from_json(const std::string& text);
};

/// Nominal Dufaycolor filter primaries to display primaries. Editable.
Mat3 nominal_dufay_render_matrix();

struct RenderResult {
  DisplayImage image;
  double gain_used = 1.0;
};

RenderResult color_render(const LinearImage& rgb, const RenderParams& params,
                          const std::vector<std::uint8_t>* valid = nullptr);

/// Linear luminance used by auto-brighten.
inline double luminance(double r, double g, double b) { return 0.2126 * r + 0.7152 * g + 0.0722 * b; }

}  // namespace screenreg
