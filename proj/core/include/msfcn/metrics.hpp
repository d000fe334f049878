#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "msfcn/image.hpp"

namespace msfcn {

/// Pixel coordinates: x is the column, y the row; pixel centres sit on integers.
struct Point {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point&, const Point&) = default;
};

/// Closed polygon; the last vertex connects back to the first.
using Polygon = std::vector<Point>;

struct ContourSet {
  std::optional<Polygon> endo;
  std::optional<Polygon> epi;
  std::string slice_id;
  Spacing spacing;
};

enum class Region { kCavity, kCavityAndMyocardium };

/// Binary indicator (0/1) of `region` in a class-index mask.
Mask region_mask(const Mask& labels, Region region);

/// 2|A n B| / (|A| + |B|) over non-zero pixels; 1 when both are empty.
double dice(const Mask& a, const Mask& b);

/// Signed shoelace area (positive for counter-clockwise in x-right/y-up terms).
double polygon_area(const Polygon& poly);

/// Largest 4-connected component of a binary mask (ties: first in raster order).
Mask largest_component(const Mask& binary);

/// Outer boundary of the largest connected component of `binary`, traced by
/// marching squares at the 0.5 iso-level. Collinear vertices are dropped.
std::optional<Polygon> binary_to_contour(const Mask& binary);
std::optional<Polygon> mask_to_contour(const Mask& labels, Region region);

/// Splits every edge into equal pieces no longer than `step` pixels.
/// Original vertices are kept, so the polyline itself is unchanged.
Polygon resample(const Polygon& poly, double step);

/// Euclidean distance from `p` to segment [a, b].
double point_segment_distance(Point p, Point a, Point b);

struct ApdOptions {
  double step_px = 0.5;
  /// Average of both directions instead of pred -> gt only.
  bool symmetric = false;
};

/// Average perpendicular distance in mm: mean over resampled `pred` vertices of
/// the distance to the `gt` polyline, after scaling coordinates by `spacing`.
double apd(const Polygon& pred, const Polygon& gt, Spacing spacing, const ApdOptions& opt = {});
/// Absent when either contour is missing.
std::optional<double> apd(const std::optional<Polygon>& pred, const std::optional<Polygon>& gt,
                          Spacing spacing, const ApdOptions& opt = {});

inline constexpr double kGoodContourThresholdMm = 5.0;

/// Percentage of slices whose contour is present with APD < threshold.
/// Absent for an empty input.
std::optional<double> good_fraction(std::span<const std::optional<double>> apds,
                                    double threshold_mm = kGoodContourThresholdMm);

struct SliceRecord {
  std::string case_id;
  std::string slice_id;
  double dice_endo = 0.0;
  double dice_epi = 0.0;
  std::optional<double> apd_endo_mm;
  std::optional<double> apd_epi_mm;
  bool good_endo = false;
  bool good_epi = false;
};

struct PredictedSlice {
  std::string slice_id;
  std::string case_id;
  Mask labels;
};

struct EvaluateOptions {
  double threshold_mm = kGoodContourThresholdMm;
  ApdOptions apd;
};

/// Dice against the rasterised ground-truth contours, APD contour-to-contour.
/// Slices are matched by id; unmatched ids on either side raise an error.
std::vector<SliceRecord> evaluate_case(const std::vector<PredictedSlice>& preds,
                                       const std::vector<ContourSet>& gts,
                                       const EvaluateOptions& opt = {});

/// Mean and sample (n-1) standard deviation; each absent when undefined.
struct Stat {
  std::optional<double> mean;
  std::optional<double> stddev;
  std::size_t n = 0;
};

Stat summarize(std::span<const double> values);

struct MetricSummary {
  Stat dice_endo;
  Stat dice_epi;
  Stat apd_endo;
  Stat apd_epi;
  Stat good_endo;
  Stat good_epi;
};

struct CaseSummary {
  std::string case_id;
  std::size_t slices = 0;
  std::optional<double> dice_endo;
  std::optional<double> dice_epi;
  std::optional<double> apd_endo;
  std::optional<double> apd_epi;
  std::optional<double> good_endo;
  std::optional<double> good_epi;
};

struct MetricsReport {
  std::vector<SliceRecord> slices;
  std::vector<CaseSummary> cases;
  MetricSummary overall;
  double threshold_mm = kGoodContourThresholdMm;
};

/// Per-case means first (cases in order of first appearance), then mean (std)
/// across cases.
MetricsReport aggregate_report(const std::vector<SliceRecord>& records,
                               double threshold_mm = kGoodContourThresholdMm);

/// "0.928(0.022)" style cell; "-" for absent values.
std::string format_stat(const Stat& s, int decimals);

/// Rows Dice / APD(mm) / Good Contours(%) x Endo / Epi, one column per summary.
/// An absent summary renders as "failed".
std::string format_metrics_table(const std::vector<std::string>& columns,
                                 const std::vector<std::optional<MetricSummary>>& summaries);

struct ComparisonRow {
  std::string method;
  /// Evaluated cases, shown in the "#" column.
  std::size_t cases = 0;
  MetricSummary summary;
};

/// One row per method; columns # then Dice / APD(mm) / Good Contours(%), each
/// split into Endo and Epi under a two-line header.
std::string format_comparison_table(const std::vector<ComparisonRow>& rows);

/// One row per slice, per case, then the overall mean and std rows.
std::string report_csv(const MetricsReport& report);

}  // namespace msfcn
