#include "msfcn/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <set>
#include <unordered_map>

#include "msfcn/data_io.hpp"

namespace msfcn {

Mask region_mask(const Mask& labels, Region region) {
  Mask out(labels.rows, labels.cols, 0);
  for (std::size_t i = 0; i < labels.data.size(); ++i) {
    const auto v = labels.data[i];
    const bool in = region == Region::kCavity ? v == kCavity : (v == kCavity || v == kMyocardium);
    out.data[i] = in ? 1 : 0;
  }
  return out;
}

double dice(const Mask& a, const Mask& b) {
  if (a.rows != b.rows || a.cols != b.cols) {
    throw_invalid("dice: masks differ in shape (" + std::to_string(a.rows) + "x" +
                  std::to_string(a.cols) + " vs " + std::to_string(b.rows) + "x" +
                  std::to_string(b.cols) + ")");
  }
  std::size_t na = 0, nb = 0, both = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const bool ia = a.data[i] != 0;
    const bool ib = b.data[i] != 0;
    na += ia;
    nb += ib;
    both += ia && ib;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

double polygon_area(const Polygon& poly) {
  const std::size_t n = poly.size();
  if (n < 3) return 0.0;
  double twice = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Point& p = poly[i];
    const Point& q = poly[(i + 1) % n];
    twice += p.x * q.y - q.x * p.y;
  }
  return 0.5 * twice;
}

Mask largest_component(const Mask& binary) {
  const int rows = binary.rows;
  const int cols = binary.cols;
  std::vector<int> label(binary.data.size(), -1);
  std::vector<int> stack;
  int best = -1;
  std::size_t best_size = 0;
  int next = 0;
  for (int start = 0; start < rows * cols; ++start) {
    if (binary.data[start] == 0 || label[start] >= 0) continue;
    const int id = next++;
    std::size_t size = 0;
    stack.push_back(start);
    label[start] = id;
    while (!stack.empty()) {
      const int i = stack.back();
      stack.pop_back();
      ++size;
      const int r = i / cols;
      const int c = i % cols;
      const int nbr[4][2] = {{r - 1, c}, {r + 1, c}, {r, c - 1}, {r, c + 1}};
      for (const auto& [nr, nc] : nbr) {
        if (!binary.contains(nr, nc)) continue;
        const int j = nr * cols + nc;
        if (binary.data[j] == 0 || label[j] >= 0) continue;
        label[j] = id;
        stack.push_back(j);
      }
    }
    if (size > best_size) {
      best_size = size;
      best = id;
    }
  }
  Mask out(rows, cols, 0);
  if (best < 0) return out;
  for (std::size_t i = 0; i < label.size(); ++i) out.data[i] = label[i] == best ? 1 : 0;
  return out;
}

namespace {

bool collinear(const Point& a, const Point& b, const Point& c) {
  const double cross = (b.x - a.x) * (c.y - b.y) - (b.y - a.y) * (c.x - b.x);
  return std::abs(cross) < 1e-12;
}

Polygon drop_collinear(Polygon poly) {
  bool changed = true;
  while (changed && poly.size() > 3) {
    changed = false;
    Polygon kept;
    kept.reserve(poly.size());
    const std::size_t n = poly.size();
    for (std::size_t i = 0; i < n; ++i) {
      const Point& prev = kept.empty() ? poly[(i + n - 1) % n] : kept.back();
      if (collinear(prev, poly[i], poly[(i + 1) % n])) {
        changed = true;
        continue;
      }
      kept.push_back(poly[i]);
    }
    if (kept.size() < 3) break;
    poly = std::move(kept);
  }
  return poly;
}

}  // namespace

std::optional<Polygon> binary_to_contour(const Mask& binary) {
  const Mask comp = largest_component(binary);
  if (std::none_of(comp.data.begin(), comp.data.end(), [](auto v) { return v != 0; })) {
    return std::nullopt;
  }
  // Zero-padded indicator so every boundary closes inside the grid.
  const int pr_n = comp.rows + 2;
  const int pc_n = comp.cols + 2;
  auto in = [&](int pr, int pc) {
    const int r = pr - 1;
    const int c = pc - 1;
    return comp.contains(r, c) && comp(r, c) != 0;
  };
  auto h_edge = [&](int pr, int pc) { return (pr * pc_n + pc) * 2; };
  auto v_edge = [&](int pr, int pc) { return (pr * pc_n + pc) * 2 + 1; };
  auto edge_point = [&](int id) {
    const int cell = id / 2;
    const int pr = cell / pc_n;
    const int pc = cell % pc_n;
    if (id % 2 == 0) return Point{pc + 0.5 - 1.0, pr - 1.0};
    return Point{pc - 1.0, pr + 0.5 - 1.0};
  };

  std::unordered_map<int, std::array<int, 2>> adj;
  auto link = [&](int a, int b) {
    for (auto [from, to] : {std::pair{a, b}, std::pair{b, a}}) {
      auto [it, fresh] = adj.try_emplace(from, std::array<int, 2>{-1, -1});
      auto& slots = it->second;
      (slots[0] < 0 ? slots[0] : slots[1]) = to;
    }
  };

  for (int pr = 0; pr + 1 < pr_n; ++pr) {
    for (int pc = 0; pc + 1 < pc_n; ++pc) {
      const int code = (in(pr, pc) << 3) | (in(pr, pc + 1) << 2) | (in(pr + 1, pc + 1) << 1) |
                       static_cast<int>(in(pr + 1, pc));
      const int top = h_edge(pr, pc);
      const int bottom = h_edge(pr + 1, pc);
      const int left = v_edge(pr, pc);
      const int right = v_edge(pr, pc + 1);
      switch (code) {
        case 0:
        case 15: break;
        case 8:
        case 7: link(top, left); break;
        case 4:
        case 11: link(top, right); break;
        case 2:
        case 13: link(right, bottom); break;
        case 1:
        case 14: link(bottom, left); break;
        case 12:
        case 3: link(left, right); break;
        case 6:
        case 9: link(top, bottom); break;
        case 10:  // tl + br: keep the two corners apart
          link(top, left);
          link(right, bottom);
          break;
        case 5:  // tr + bl
          link(top, right);
          link(bottom, left);
          break;
      }
    }
  }

  std::vector<int> keys;
  keys.reserve(adj.size());
  for (const auto& [k, v] : adj) keys.push_back(k);
  std::sort(keys.begin(), keys.end());

  std::unordered_map<int, bool> seen;
  Polygon best;
  double best_area = -1.0;
  for (int start : keys) {
    if (seen[start]) continue;
    Polygon loop;
    int prev = -1;
    int cur = start;
    while (true) {
      seen[cur] = true;
      loop.push_back(edge_point(cur));
      const auto& nb = adj.at(cur);
      const int next = nb[0] != prev ? nb[0] : nb[1];
      prev = cur;
      cur = next;
      if (cur == start || cur < 0) break;
    }
    const double area = std::abs(polygon_area(loop));
    if (area > best_area) {
      best_area = area;
      best = std::move(loop);
    }
  }
  best = drop_collinear(std::move(best));
  if (polygon_area(best) < 0) std::reverse(best.begin(), best.end());
  return best;
}

std::optional<Polygon> mask_to_contour(const Mask& labels, Region region) {
  return binary_to_contour(region_mask(labels, region));
}

Polygon resample(const Polygon& poly, double step) {
  if (!(step > 0.0)) throw_invalid("resample: step must be positive");
  Polygon out;
  const std::size_t n = poly.size();
  for (std::size_t i = 0; i < n; ++i) {
    const Point a = poly[i];
    const Point b = poly[(i + 1) % n];
    const double len = std::hypot(b.x - a.x, b.y - a.y);
    const int pieces = std::max(1, static_cast<int>(std::ceil(len / step)));
    for (int k = 0; k < pieces; ++k) {
      const double t = static_cast<double>(k) / pieces;
      out.push_back({a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)});
    }
  }
  return out;
}

double point_segment_distance(Point p, Point a, Point b) {
  const double dx = b.x - a.x;
  const double dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  double t = 0.0;
  if (len2 > 0.0) t = std::clamp(((p.x - a.x) * dx + (p.y - a.y) * dy) / len2, 0.0, 1.0);
  return std::hypot(p.x - (a.x + t * dx), p.y - (a.y + t * dy));
}

namespace {

Polygon to_mm(const Polygon& poly, Spacing s) {
  Polygon out(poly.size());
  for (std::size_t i = 0; i < poly.size(); ++i) out[i] = {poly[i].x * s.col_mm, poly[i].y * s.row_mm};
  return out;
}

double directed_apd(const Polygon& from, const Polygon& to) {
  double total = 0.0;
  const std::size_t m = to.size();
  for (const Point& p : from) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < m; ++j) best = std::min(best, point_segment_distance(p, to[j], to[(j + 1) % m]));
    total += best;
  }
  return total / static_cast<double>(from.size());
}

}  // namespace

double apd(const Polygon& pred, const Polygon& gt, Spacing spacing, const ApdOptions& opt) {
  if (pred.empty() || gt.empty()) throw_invalid("apd: contours must be non-empty");
  if (!(spacing.row_mm > 0.0 && spacing.col_mm > 0.0)) throw_invalid("apd: spacing must be positive");
  const Polygon p = to_mm(resample(pred, opt.step_px), spacing);
  const Polygon g = to_mm(resample(gt, opt.step_px), spacing);
  const double forward = directed_apd(p, g);
  if (!opt.symmetric) return forward;
  return 0.5 * (forward + directed_apd(g, p));
}

std::optional<double> apd(const std::optional<Polygon>& pred, const std::optional<Polygon>& gt,
                          Spacing spacing, const ApdOptions& opt) {
  if (!pred || !gt || pred->empty() || gt->empty()) return std::nullopt;
  return apd(*pred, *gt, spacing, opt);
}

std::optional<double> good_fraction(std::span<const std::optional<double>> apds, double threshold_mm) {
  if (apds.empty()) return std::nullopt;
  std::size_t good = 0;
  for (const auto& a : apds) good += a.has_value() && *a < threshold_mm;
  return 100.0 * static_cast<double>(good) / static_cast<double>(apds.size());
}

std::vector<SliceRecord> evaluate_case(const std::vector<PredictedSlice>& preds,
                                       const std::vector<ContourSet>& gts, const EvaluateOptions& opt) {
  std::map<std::string, const ContourSet*> by_id;
  for (const auto& g : gts) {
    if (!by_id.emplace(g.slice_id, &g).second) {
      throw_invalid("evaluate: duplicate ground-truth slice '" + g.slice_id + "'");
    }
  }
  std::set<std::string> predicted;
  std::vector<std::string> no_gt, no_pred;
  for (const auto& p : preds) {
    if (!predicted.insert(p.slice_id).second) {
      throw_invalid("evaluate: duplicate prediction for slice '" + p.slice_id + "'");
    }
    if (!by_id.contains(p.slice_id)) no_gt.push_back(p.slice_id);
  }
  for (const auto& g : gts) {
    if (!predicted.contains(g.slice_id)) no_pred.push_back(g.slice_id);
  }
  if (!no_gt.empty() || !no_pred.empty()) {
    auto join = [](const std::vector<std::string>& ids) {
      std::string s;
      for (const auto& id : ids) s += (s.empty() ? "'" : ", '") + id + "'";
      return s.empty() ? std::string("none") : s;
    };
    throw_invalid("evaluate: unmatched slices; without ground truth: " + join(no_gt) +
                  "; without prediction: " + join(no_pred));
  }
  std::vector<SliceRecord> out;
  out.reserve(preds.size());
  for (const auto& p : preds) {
    const ContourSet& gt = *by_id.at(p.slice_id);

    const Mask gt_labels = contour_to_mask(gt.endo, gt.epi, p.labels.rows, p.labels.cols);
    SliceRecord rec;
    rec.case_id = p.case_id;
    rec.slice_id = p.slice_id;
    rec.dice_endo = dice(region_mask(p.labels, Region::kCavity), region_mask(gt_labels, Region::kCavity));
    rec.dice_epi = dice(region_mask(p.labels, Region::kCavityAndMyocardium),
                        region_mask(gt_labels, Region::kCavityAndMyocardium));
    rec.apd_endo_mm = apd(mask_to_contour(p.labels, Region::kCavity), gt.endo, gt.spacing, opt.apd);
    rec.apd_epi_mm =
        apd(mask_to_contour(p.labels, Region::kCavityAndMyocardium), gt.epi, gt.spacing, opt.apd);
    rec.good_endo = rec.apd_endo_mm && *rec.apd_endo_mm < opt.threshold_mm;
    rec.good_epi = rec.apd_epi_mm && *rec.apd_epi_mm < opt.threshold_mm;
    out.push_back(std::move(rec));
  }
  return out;
}

Stat summarize(std::span<const double> values) {
  Stat s;
  s.n = values.size();
  if (values.empty()) return s;
  double sum = 0.0;
  for (double v : values) sum += v;
  const double mean = sum / static_cast<double>(values.size());
  s.mean = mean;
  if (values.size() >= 2) {
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    s.stddev = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return s;
}

namespace {

std::optional<double> mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::nullopt;
  double sum = 0.0;
  for (double x : v) sum += x;
  return sum / static_cast<double>(v.size());
}

Stat summarize_present(const std::vector<CaseSummary>& cases,
                       std::optional<double> CaseSummary::*field) {
  std::vector<double> vals;
  for (const auto& c : cases) {
    if (c.*field) vals.push_back(*(c.*field));
  }
  return summarize(vals);
}

}  // namespace

MetricsReport aggregate_report(const std::vector<SliceRecord>& records, double threshold_mm) {
  MetricsReport report;
  report.slices = records;
  report.threshold_mm = threshold_mm;

  std::vector<std::string> order;
  std::map<std::string, std::vector<const SliceRecord*>> groups;
  for (const auto& r : records) {
    auto& g = groups[r.case_id];
    if (g.empty()) order.push_back(r.case_id);
    g.push_back(&r);
  }
  for (const auto& id : order) {
    const auto& g = groups[id];
    CaseSummary c;
    c.case_id = id;
    c.slices = g.size();
    std::vector<double> de, dp, ae, ap;
    std::vector<std::optional<double>> oe, op;
    for (const SliceRecord* r : g) {
      de.push_back(r->dice_endo);
      dp.push_back(r->dice_epi);
      if (r->apd_endo_mm) ae.push_back(*r->apd_endo_mm);
      if (r->apd_epi_mm) ap.push_back(*r->apd_epi_mm);
      oe.push_back(r->apd_endo_mm);
      op.push_back(r->apd_epi_mm);
    }
    c.dice_endo = mean_of(de);
    c.dice_epi = mean_of(dp);
    c.apd_endo = mean_of(ae);
    c.apd_epi = mean_of(ap);
    c.good_endo = good_fraction(oe, threshold_mm);
    c.good_epi = good_fraction(op, threshold_mm);
    report.cases.push_back(std::move(c));
  }

  auto& o = report.overall;
  o.dice_endo = summarize_present(report.cases, &CaseSummary::dice_endo);
  o.dice_epi = summarize_present(report.cases, &CaseSummary::dice_epi);
  o.apd_endo = summarize_present(report.cases, &CaseSummary::apd_endo);
  o.apd_epi = summarize_present(report.cases, &CaseSummary::apd_epi);
  o.good_endo = summarize_present(report.cases, &CaseSummary::good_endo);
  o.good_epi = summarize_present(report.cases, &CaseSummary::good_epi);
  return report;
}

namespace {

std::string fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

std::string exact(const std::optional<double>& v) {
  if (!v) return "";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", *v);
  return buf;
}

std::string pad_right(std::string s, std::size_t width) {
  if (s.size() < width) s.append(width - s.size(), ' ');
  return s;
}

}  // namespace

std::string format_stat(const Stat& s, int decimals) {
  if (!s.mean) return "-";
  return fixed(*s.mean, decimals) + "(" + (s.stddev ? fixed(*s.stddev, decimals) : "-") + ")";
}

std::string format_comparison_table(const std::vector<ComparisonRow>& rows) {
  const std::vector<std::pair<const char*, int>> groups = {{"Dice", 3}, {"APD(mm)", 2}, {"Good Contours(%)", 2}};
  const Stat MetricSummary::*fields[] = {&MetricSummary::dice_endo, &MetricSummary::dice_epi,
                                         &MetricSummary::apd_endo,  &MetricSummary::apd_epi,
                                         &MetricSummary::good_endo, &MetricSummary::good_epi};
  std::vector<std::string> top = {"Method", "#"};
  std::vector<std::string> sub = {"", ""};
  for (const auto& g : groups) {
    top.insert(top.end(), {g.first, ""});
    sub.insert(sub.end(), {"Endo", "Epi"});
  }
  std::vector<std::vector<std::string>> body;
  for (const auto& r : rows) {
    std::vector<std::string> line = {r.method, std::to_string(r.cases)};
    for (std::size_t k = 0; k < 6; ++k) line.push_back(format_stat(r.summary.*fields[k], groups[k / 2].second));
    body.push_back(std::move(line));
  }
  std::vector<std::size_t> width(top.size(), 0);
  for (std::size_t i = 0; i < sub.size(); ++i) width[i] = std::max(i < 2 ? top[i].size() : 0, sub[i].size());
  for (const auto& line : body) {
    for (std::size_t i = 0; i < line.size(); ++i) width[i] = std::max(width[i], line[i].size());
  }
  // A group label spans its Endo and Epi columns.
  for (std::size_t i = 2; i < top.size(); i += 2) {
    if (top[i].size() > width[i] + 2 + width[i + 1]) width[i + 1] = top[i].size() - width[i] - 2;
  }
  auto render = [&](const std::vector<std::string>& line, bool spanning) {
    std::string text;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (i) text += "  ";
      if (spanning && i >= 2 && i % 2 == 0) {
        text += pad_right(line[i], width[i] + 2 + width[i + 1]);
        ++i;
      } else {
        text += pad_right(line[i], width[i]);
      }
    }
    while (!text.empty() && text.back() == ' ') text.pop_back();
    return text + "\n";
  };
  std::string out = render(top, true) + render(sub, false);
  for (const auto& line : body) out += render(line, false);
  return out;
}

std::string format_metrics_table(const std::vector<std::string>& columns,
                                 const std::vector<std::optional<MetricSummary>>& summaries) {
  if (columns.size() != summaries.size()) {
    throw_invalid("format_metrics_table: " + std::to_string(columns.size()) + " column labels for " +
                  std::to_string(summaries.size()) + " summaries");
  }
  struct Row {
    const char* metric;
    const char* contour;
    Stat MetricSummary::*field;
    int decimals;
  };
  const Row rows[] = {
      {"Dice", "Endo", &MetricSummary::dice_endo, 3},
      {"", "Epi", &MetricSummary::dice_epi, 3},
      {"APD(mm)", "Endo", &MetricSummary::apd_endo, 2},
      {"", "Epi", &MetricSummary::apd_epi, 2},
      {"Good Contours(%)", "Endo", &MetricSummary::good_endo, 2},
      {"", "Epi", &MetricSummary::good_epi, 2},
  };
  std::vector<std::vector<std::string>> cells;
  std::vector<std::string> header = {"Metric", ""};
  header.insert(header.end(), columns.begin(), columns.end());
  cells.push_back(header);
  for (const Row& r : rows) {
    std::vector<std::string> line = {r.metric, r.contour};
    for (const auto& s : summaries) line.push_back(s ? format_stat((*s).*(r.field), r.decimals) : "failed");
    cells.push_back(std::move(line));
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& line : cells) {
    for (std::size_t i = 0; i < line.size(); ++i) width[i] = std::max(width[i], line[i].size());
  }
  std::string out;
  for (const auto& line : cells) {
    std::string text;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (i) text += "  ";
      text += pad_right(line[i], width[i]);
    }
    while (!text.empty() && text.back() == ' ') text.pop_back();
    out += text + "\n";
  }
  return out;
}

std::string report_csv(const MetricsReport& report) {
  std::string out = "kind,case,slice,dice_endo,dice_epi,apd_endo_mm,apd_epi_mm,good_endo,good_epi\n";
  for (const auto& s : report.slices) {
    out += "slice," + s.case_id + "," + s.slice_id + "," + exact(s.dice_endo) + "," +
           exact(s.dice_epi) + "," + exact(s.apd_endo_mm) + "," + exact(s.apd_epi_mm) + "," +
           (s.good_endo ? "1" : "0") + "," + (s.good_epi ? "1" : "0") + "\n";
  }
  for (const auto& c : report.cases) {
    out += "case," + c.case_id + ",," + exact(c.dice_endo) + "," + exact(c.dice_epi) + "," +
           exact(c.apd_endo) + "," + exact(c.apd_epi) + "," + exact(c.good_endo) + "," +
           exact(c.good_epi) + "\n";
  }
  const auto& o = report.overall;
  out += "mean,,," + exact(o.dice_endo.mean) + "," + exact(o.dice_epi.mean) + "," +
         exact(o.apd_endo.mean) + "," + exact(o.apd_epi.mean) + "," + exact(o.good_endo.mean) + "," +
         exact(o.good_epi.mean) + "\n";
  out += "std,,," + exact(o.dice_endo.stddev) + "," + exact(o.dice_epi.stddev) + "," +
         exact(o.apd_endo.stddev) + "," + exact(o.apd_epi.stddev) + "," + exact(o.good_endo.stddev) +
         "," + exact(o.good_epi.stddev) + "\n";
  return out;
}

}  // namespace msfcn
