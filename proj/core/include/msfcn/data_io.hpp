#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "msfcn/image.hpp"
#include "msfcn/metrics.hpp"

namespace msfcn {

// ---------------------------------------------------------------------------
// PGM (binary P5, 8- or 16-bit)

struct PgmRaster {
  int rows = 0;
  int cols = 0;
  int maxval = 0;
  std::vector<std::uint16_t> values;
};

PgmRaster parse_pgm(const std::vector<std::uint8_t>& bytes);
PgmRaster read_pgm(const std::filesystem::path& path);

/// Intensities scaled to [0, 1] by maxval.
Image load_image_pgm(const std::filesystem::path& path);
/// Quantises [0, 1] to `maxval` (255 -> 8-bit, 65535 -> 16-bit).
void save_image_pgm(const Image& image, const std::filesystem::path& path, int maxval = 65535);

/// Class k is stored as gray level k * (255 / classes): {0, 85, 170} for 3 classes.
void save_mask_pgm(const Mask& mask, const std::filesystem::path& path, int classes = 3);
Mask load_mask_pgm(const std::filesystem::path& path, int classes = 3);

// ---------------------------------------------------------------------------
// Contours

/// One "x y" pair per line; blank lines and trailing whitespace are ignored.
Polygon parse_contour_text(const std::string& text, const std::string& source = "<text>");
Polygon load_contour_text(const std::filesystem::path& path);
void save_contour_text(const Polygon& poly, const std::filesystem::path& path);

/// Even-odd test at point (x, y).
bool point_in_polygon(const Polygon& poly, double x, double y);

/// Pixel-centre rasterisation: inside endo -> cavity, inside epi only ->
/// myocardium, otherwise background.
Mask contour_to_mask(const std::optional<Polygon>& endo, const std::optional<Polygon>& epi, int rows,
                     int cols);

// ---------------------------------------------------------------------------
// Synthetic phantoms

struct PhantomSpec {
  int size = 128;
  double cavity_radius_min = 12.0;
  double cavity_radius_max = 20.0;
  double thickness_min = 5.0;
  double thickness_max = 9.0;
  double center_jitter = 4.0;
  double background_mean = 0.1;
  double cavity_mean = 0.5;
  double myocardium_mean = 0.85;
  double noise_sigma = 0.05;
  int slices_per_case = 1;
  Spacing spacing{};
  std::uint64_t seed = 1;

  void validate() const;
};

/// A phantom with the geometry it was drawn from.
struct Phantom {
  Sample sample;
  double center_x = 0.0;
  double center_y = 0.0;
  double cavity_radius = 0.0;
  double outer_radius = 0.0;
  /// Noise-free intensities.
  Image clean;

  /// Circle polygons with `vertices` points for the two boundaries.
  ContourSet contours(int vertices = 256) const;
};

/// Annulus phantoms: bright myocardium ring around a mid-gray cavity on a dark
/// background, plus Gaussian noise clipped to [0, 1]. A pixel is cavity iff its
/// centre lies within the cavity radius, myocardium iff within the outer radius.
std::vector<Phantom> synth_phantoms(const PhantomSpec& spec, int n);

// ---------------------------------------------------------------------------
// Manifest

enum class Split { kTrain, kTest };

std::string_view to_string(Split split) noexcept;

struct ManifestEntry {
  std::string id;
  std::string case_id;
  std::filesystem::path image;
  std::optional<std::filesystem::path> endo;
  std::optional<std::filesystem::path> epi;
  std::optional<std::filesystem::path> mask;
  std::optional<Spacing> spacing;
  Split split = Split::kTrain;

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct Manifest {
  Spacing default_spacing{};
  std::vector<ManifestEntry> entries;

  Spacing spacing_of(const ManifestEntry& e) const { return e.spacing.value_or(default_spacing); }
  Manifest filter(Split split) const;

  friend bool operator==(const Manifest&, const Manifest&) = default;
};

struct ManifestReadOptions {
  bool check_files = true;
};

/// Relative paths are resolved against the manifest's directory.
Manifest read_manifest(const std::filesystem::path& path, const ManifestReadOptions& opt = {});
/// Paths are written relative to the manifest's directory.
void write_manifest(const Manifest& manifest, const std::filesystem::path& path);

/// Writes images (16-bit), masks and contour files under `dir` and returns a
/// manifest whose paths point at them. The manifest itself is not written.
Manifest write_phantom_dataset(const std::vector<Phantom>& phantoms, const std::filesystem::path& dir,
                               Split split = Split::kTrain);

/// Writes samples as images and masks (no contours) under `dir`.
Manifest write_sample_dataset(const std::vector<Sample>& samples, const std::filesystem::path& dir,
                              Split split = Split::kTrain);

/// Image plus mask (from the mask file, else rasterised contours).
Sample load_sample(const Manifest& manifest, const ManifestEntry& entry, int classes = 3);
/// Contours from the contour files, else traced from the mask.
ContourSet load_contours(const Manifest& manifest, const ManifestEntry& entry, int classes = 3);

}  // namespace msfcn
