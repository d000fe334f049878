#include "msfcn/data_io.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <numbers>
#include <set>
#include <sstream>

#include "json.hpp"
#include "msfcn/ops.hpp"

namespace msfcn {

namespace fs = std::filesystem;

namespace {

[[noreturn]] void throw_parse(const std::string& msg) { throw Error(ErrorKind::kParse, msg); }
[[noreturn]] void throw_io(const std::string& msg) { throw Error(ErrorKind::kIo, msg); }

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw_io("cannot open '" + path.string() + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw_io("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw_io("write to '" + path.string() + "' failed");
}

bool is_space(std::uint8_t c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; }

class PgmHeader {
 public:
  explicit PgmHeader(const std::vector<std::uint8_t>& b) : b_(b) {}

  // Skips whitespace and comments, then reads one unsigned decimal field.
  long field(const char* what) {
    while (pos_ < b_.size()) {
      if (is_space(b_[pos_])) {
        ++pos_;
      } else if (b_[pos_] == '#') {
        while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
    const std::size_t start = pos_;
    long v = 0;
    while (pos_ < b_.size() && b_[pos_] >= '0' && b_[pos_] <= '9') {
      v = v * 10 + (b_[pos_] - '0');
      if (v > 1'000'000'000) throw_parse("pgm: " + std::string(what) + " too large at byte " + std::to_string(start));
      ++pos_;
    }
    if (pos_ == start) {
      throw_parse("pgm: expected " + std::string(what) + " at byte " + std::to_string(start));
    }
    return v;
  }

  std::size_t pos_ = 0;

 private:
  const std::vector<std::uint8_t>& b_;
};

}  // namespace

PgmRaster parse_pgm(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') {
    throw_parse("pgm: missing P5 magic at byte 0");
  }
  PgmHeader h(bytes);
  h.pos_ = 2;
  const long width = h.field("width");
  const long height = h.field("height");
  const long maxval = h.field("maxval");
  if (width <= 0 || height <= 0) throw_parse("pgm: image dimensions must be positive");
  if (maxval <= 0 || maxval > 65535) {
    throw_parse("pgm: maxval " + std::to_string(maxval) + " outside [1, 65535]");
  }
  if (h.pos_ >= bytes.size() || !is_space(bytes[h.pos_])) {
    throw_parse("pgm: expected whitespace after header at byte " + std::to_string(h.pos_));
  }
  std::size_t pos = h.pos_ + 1;
  const std::size_t bpp = maxval < 256 ? 1 : 2;
  const std::size_t count = static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
  if (bytes.size() - pos < count * bpp) {
    throw_parse("pgm: raster truncated at byte " + std::to_string(bytes.size()) + ", expected " +
                std::to_string(pos + count * bpp) + " bytes");
  }
  PgmRaster r;
  r.rows = static_cast<int>(height);
  r.cols = static_cast<int>(width);
  r.maxval = static_cast<int>(maxval);
  r.values.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint16_t v = bytes[pos];
    if (bpp == 2) v = static_cast<std::uint16_t>((v << 8) | bytes[pos + 1]);
    if (v > maxval) {
      throw_parse("pgm: sample " + std::to_string(v) + " exceeds maxval at byte " + std::to_string(pos));
    }
    r.values[i] = v;
    pos += bpp;
  }
  return r;
}

PgmRaster read_pgm(const fs::path& path) {
  try {
    return parse_pgm(read_bytes(path));
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::kParse) throw;
    throw Error(ErrorKind::kParse, path.string() + ": " + e.what());
  }
}

Image load_image_pgm(const fs::path& path) {
  const PgmRaster r = read_pgm(path);
  Image img(r.rows, r.cols);
  for (std::size_t i = 0; i < r.values.size(); ++i) img.data[i] = static_cast<double>(r.values[i]) / r.maxval;
  return img;
}

namespace {

void save_raster(const fs::path& path, int rows, int cols, int maxval, const std::vector<std::uint16_t>& v) {
  std::string out = "P5\n" + std::to_string(cols) + " " + std::to_string(rows) + "\n" + std::to_string(maxval) + "\n";
  const bool wide = maxval > 255;
  out.reserve(out.size() + v.size() * (wide ? 2 : 1));
  for (std::uint16_t x : v) {
    if (wide) out.push_back(static_cast<char>(x >> 8));
    out.push_back(static_cast<char>(x & 0xff));
  }
  write_bytes(path, out);
}

}  // namespace

void save_image_pgm(const Image& image, const fs::path& path, int maxval) {
  if (maxval <= 0 || maxval > 65535) throw_invalid("save_image_pgm: maxval must be in [1, 65535]");
  std::vector<std::uint16_t> v(image.data.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double x = std::clamp(image.data[i], 0.0, 1.0);
    v[i] = static_cast<std::uint16_t>(std::lround(x * maxval));
  }
  save_raster(path, image.rows, image.cols, maxval, v);
}

void save_mask_pgm(const Mask& mask, const fs::path& path, int classes) {
  if (classes < 2 || classes > 255) throw_invalid("save_mask_pgm: classes must be in [2, 255]");
  const int step = 255 / classes;
  std::vector<std::uint16_t> v(mask.data.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (mask.data[i] >= classes) {
      throw_invalid("save_mask_pgm: label " + std::to_string(mask.data[i]) + " >= classes " + std::to_string(classes));
    }
    v[i] = static_cast<std::uint16_t>(mask.data[i] * step);
  }
  save_raster(path, mask.rows, mask.cols, 255, v);
}

Mask load_mask_pgm(const fs::path& path, int classes) {
  if (classes < 2 || classes > 255) throw_invalid("load_mask_pgm: classes must be in [2, 255]");
  const PgmRaster r = read_pgm(path);
  // Only the exact levels k * step (rescaled to maxval) are accepted.
  const long step = 255 / classes;
  Mask m(r.rows, r.cols);
  for (std::size_t i = 0; i < r.values.size(); ++i) {
    const long scaled = static_cast<long>(r.values[i]) * 255;
    const long k = scaled % r.maxval == 0 && (scaled / r.maxval) % step == 0 ? scaled / r.maxval / step : -1;
    if (k < 0 || k >= classes) {
      throw_parse(path.string() + ": gray level " + std::to_string(r.values[i]) + " at pixel (" +
                  std::to_string(i / r.cols) + ", " + std::to_string(i % r.cols) + ") maps to no class");
    }
    m.data[i] = static_cast<std::uint8_t>(k);
  }
  return m;
}

Polygon parse_contour_text(const std::string& text, const std::string& source) {
  Polygon poly;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::vector<std::string_view> tokens;
    std::string_view rest(line);
    while (!rest.empty()) {
      const auto b = rest.find_first_not_of(" \t\r");
      if (b == std::string_view::npos) break;
      rest.remove_prefix(b);
      const auto e = std::min(rest.find_first_of(" \t\r"), rest.size());
      tokens.push_back(rest.substr(0, e));
      rest.remove_prefix(e);
    }
    if (tokens.empty()) continue;
    if (tokens.size() != 2) {
      throw_parse(source + ":" + std::to_string(lineno) + ": expected 'x y', got " +
                  std::to_string(tokens.size()) + " fields");
    }
    double xy[2];
    for (int k = 0; k < 2; ++k) {
      const auto tok = tokens[k];
      const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), xy[k]);
      if (ec != std::errc() || ptr != tok.data() + tok.size() || !std::isfinite(xy[k])) {
        throw_parse(source + ":" + std::to_string(lineno) + ": invalid number '" + std::string(tok) + "'");
      }
    }
    poly.push_back({xy[0], xy[1]});
  }
  if (poly.size() < 3) {
    throw_parse(source + ": contour needs at least 3 points, got " + std::to_string(poly.size()));
  }
  return poly;
}

Polygon load_contour_text(const fs::path& path) {
  const auto bytes = read_bytes(path);
  return parse_contour_text(std::string(bytes.begin(), bytes.end()), path.string());
}

void save_contour_text(const Polygon& poly, const fs::path& path) {
  std::string out;
  char buf[80];
  for (const Point& p : poly) {
    std::snprintf(buf, sizeof buf, "%.17g %.17g\n", p.x, p.y);
    out += buf;
  }
  write_bytes(path, out);
}

bool point_in_polygon(const Polygon& poly, double x, double y) {
  bool inside = false;
  const std::size_t n = poly.size();
  for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
    const Point& a = poly[i];
    const Point& b = poly[j];
    if ((a.y > y) != (b.y > y)) {
      const double cross_x = a.x + (y - a.y) * (b.x - a.x) / (b.y - a.y);
      if (x < cross_x) inside = !inside;
    }
  }
  return inside;
}

Mask contour_to_mask(const std::optional<Polygon>& endo, const std::optional<Polygon>& epi, int rows, int cols) {
  Mask m(rows, cols, kBackground);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      if (endo && point_in_polygon(*endo, c, r)) {
        m(r, c) = kCavity;
      } else if (epi && point_in_polygon(*epi, c, r)) {
        m(r, c) = kMyocardium;
      }
    }
  }
  return m;
}

void PhantomSpec::validate() const {
  std::vector<std::string> problems;
  if (size < 16) problems.push_back("size: must be >= 16");
  if (!(cavity_radius_min > 0 && cavity_radius_min <= cavity_radius_max)) {
    problems.push_back("cavity_radius: need 0 < min <= max");
  }
  if (!(thickness_min > 0 && thickness_min <= thickness_max)) problems.push_back("thickness: need 0 < min <= max");
  if (center_jitter < 0) problems.push_back("center_jitter: must be >= 0");
  if (noise_sigma < 0) problems.push_back("noise_sigma: must be >= 0");
  if (slices_per_case < 1) problems.push_back("slices_per_case: must be >= 1");
  if (!(spacing.row_mm > 0 && spacing.col_mm > 0)) problems.push_back("spacing: must be positive");
  if (problems.empty() && (cavity_radius_max + thickness_max + center_jitter + 1) * 2 > size) {
    problems.push_back("size: too small for the largest ring");
  }
  if (problems.empty()) return;
  std::string msg = "phantom spec: ";
  for (std::size_t i = 0; i < problems.size(); ++i) msg += (i ? "; " : "") + problems[i];
  throw Error(ErrorKind::kConfig, msg);
}

ContourSet Phantom::contours(int vertices) const {
  if (vertices < 3) throw_invalid("phantom contours need at least 3 vertices");
  auto circle = [&](double radius) {
    Polygon p(vertices);
    for (int i = 0; i < vertices; ++i) {
      const double t = 2.0 * std::numbers::pi * i / vertices;
      p[i] = {center_x + radius * std::cos(t), center_y + radius * std::sin(t)};
    }
    return p;
  };
  ContourSet cs;
  cs.endo = circle(cavity_radius);
  cs.epi = circle(outer_radius);
  cs.slice_id = sample.id;
  cs.spacing = sample.spacing;
  return cs;
}

std::vector<Phantom> synth_phantoms(const PhantomSpec& spec, int n) {
  spec.validate();
  if (n < 0) throw_invalid("synth_phantoms: count must be >= 0");
  Rng rng(spec.seed);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * uniform01(rng); };
  auto gaussian = [&] {
    const double u1 = 1.0 - uniform01(rng);
    const double u2 = uniform01(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  };
  std::vector<Phantom> out;
  out.reserve(n);
  const double mid = (spec.size - 1) / 2.0;
  for (int i = 0; i < n; ++i) {
    Phantom p;
    p.center_x = mid + uniform(-spec.center_jitter, spec.center_jitter);
    p.center_y = mid + uniform(-spec.center_jitter, spec.center_jitter);
    p.cavity_radius = uniform(spec.cavity_radius_min, spec.cavity_radius_max);
    p.outer_radius = p.cavity_radius + uniform(spec.thickness_min, spec.thickness_max);
    p.clean = Image(spec.size, spec.size, spec.background_mean);
    p.sample.image = Image(spec.size, spec.size);
    p.sample.mask = Mask(spec.size, spec.size, kBackground);
    for (int r = 0; r < spec.size; ++r) {
      for (int c = 0; c < spec.size; ++c) {
        const double d = std::hypot(c - p.center_x, r - p.center_y);
        if (d <= p.cavity_radius) {
          p.sample.mask(r, c) = kCavity;
          p.clean(r, c) = spec.cavity_mean;
        } else if (d <= p.outer_radius) {
          p.sample.mask(r, c) = kMyocardium;
          p.clean(r, c) = spec.myocardium_mean;
        }
        p.sample.image(r, c) = std::clamp(p.clean(r, c) + spec.noise_sigma * gaussian(), 0.0, 1.0);
      }
    }
    char id[32];
    std::snprintf(id, sizeof id, "phantom_%03d", i);
    p.sample.id = id;
    std::snprintf(id, sizeof id, "case_%03d", i / spec.slices_per_case);
    p.sample.case_id = id;
    p.sample.spacing = spec.spacing;
    out.push_back(std::move(p));
  }
  return out;
}

std::string_view to_string(Split split) noexcept { return split == Split::kTrain ? "train" : "test"; }

Manifest Manifest::filter(Split split) const {
  Manifest m;
  m.default_spacing = default_spacing;
  for (const auto& e : entries) {
    if (e.split == split) m.entries.push_back(e);
  }
  return m;
}

namespace {

using nlohmann::json;

Spacing parse_spacing(const json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 2 || !j[0].is_number() || !j[1].is_number()) {
    throw Error(ErrorKind::kConfig, where + ": spacing must be [row_mm, col_mm]");
  }
  Spacing s{j[0].get<double>(), j[1].get<double>()};
  if (!(s.row_mm > 0 && s.col_mm > 0)) throw Error(ErrorKind::kConfig, where + ": spacing must be positive");
  return s;
}

std::string require_string(const json& e, const char* key, const std::string& where) {
  if (!e.contains(key) || !e[key].is_string() || e[key].get<std::string>().empty()) {
    throw Error(ErrorKind::kConfig, where + ": missing string field '" + key + "'");
  }
  return e[key].get<std::string>();
}

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return (path.is_absolute() ? path : base / path).lexically_normal();
}

std::string relative_to(const fs::path& p, const fs::path& base) {
  const fs::path abs = fs::absolute(p).lexically_normal();
  const fs::path rel = abs.lexically_relative(fs::absolute(base).lexically_normal());
  return (rel.empty() ? abs : rel).generic_string();
}

}  // namespace

Manifest read_manifest(const fs::path& path, const ManifestReadOptions& opt) {
  const auto bytes = read_bytes(path);
  json doc;
  try {
    doc = json::parse(bytes.begin(), bytes.end());
  } catch (const json::parse_error& e) {
    throw_parse(path.string() + ": invalid JSON at byte " + std::to_string(e.byte) + ": " + e.what());
  }
  const std::string where = path.string();
  if (!doc.is_object()) throw Error(ErrorKind::kConfig, where + ": top level must be an object");
  const fs::path base = fs::absolute(path).parent_path();

  Manifest m;
  if (doc.contains("defaults")) {
    const json& d = doc["defaults"];
    if (!d.is_object()) throw Error(ErrorKind::kConfig, where + ": 'defaults' must be an object");
    if (d.contains("spacing")) m.default_spacing = parse_spacing(d["spacing"], where + ": defaults");
  }
  if (!doc.contains("entries") || !doc["entries"].is_array()) {
    throw Error(ErrorKind::kConfig, where + ": missing 'entries' array");
  }
  std::set<std::string> ids;
  std::size_t index = 0;
  for (const json& j : doc["entries"]) {
    const std::string at = where + ": entries[" + std::to_string(index++) + "]";
    if (!j.is_object()) throw Error(ErrorKind::kConfig, at + ": must be an object");
    ManifestEntry e;
    e.id = require_string(j, "id", at);
    if (!ids.insert(e.id).second) throw Error(ErrorKind::kConfig, at + ": duplicate id '" + e.id + "'");
    e.case_id = j.contains("case") ? require_string(j, "case", at) : e.id;
    e.image = resolve(base, require_string(j, "image", at));
    for (auto [key, slot] : {std::pair{"endo", &e.endo}, std::pair{"epi", &e.epi}, std::pair{"mask", &e.mask}}) {
      if (j.contains(key)) *slot = resolve(base, require_string(j, key, at));
    }
    if (!e.mask && !e.endo && !e.epi) {
      throw Error(ErrorKind::kConfig, at + " ('" + e.id + "'): needs a mask or contours");
    }
    if (j.contains("spacing")) e.spacing = parse_spacing(j["spacing"], at);
    const std::string split = j.contains("split") ? require_string(j, "split", at) : "train";
    if (split == "train") {
      e.split = Split::kTrain;
    } else if (split == "test") {
      e.split = Split::kTest;
    } else {
      throw Error(ErrorKind::kConfig, at + ": split must be 'train' or 'test', got '" + split + "'");
    }
    if (opt.check_files) {
      std::vector<fs::path> files = {e.image};
      for (const auto* p : {&e.endo, &e.epi, &e.mask}) {
        if (*p) files.push_back(**p);
      }
      for (const auto& f : files) {
        if (!fs::exists(f)) throw_io(at + " ('" + e.id + "'): file not found: " + f.string());
      }
    }
    m.entries.push_back(std::move(e));
  }
  return m;
}

void write_manifest(const Manifest& manifest, const fs::path& path) {
  const fs::path base = fs::absolute(path).parent_path();
  json doc;
  doc["defaults"]["spacing"] = {manifest.default_spacing.row_mm, manifest.default_spacing.col_mm};
  doc["entries"] = json::array();
  for (const auto& e : manifest.entries) {
    json j;
    j["id"] = e.id;
    j["case"] = e.case_id;
    j["image"] = relative_to(e.image, base);
    if (e.mask) j["mask"] = relative_to(*e.mask, base);
    if (e.endo) j["endo"] = relative_to(*e.endo, base);
    if (e.epi) j["epi"] = relative_to(*e.epi, base);
    if (e.spacing) j["spacing"] = {e.spacing->row_mm, e.spacing->col_mm};
    j["split"] = std::string(to_string(e.split));
    doc["entries"].push_back(std::move(j));
  }
  write_bytes(path, doc.dump(2) + "\n");
}

Manifest write_phantom_dataset(const std::vector<Phantom>& phantoms, const fs::path& dir, Split split) {
  std::vector<Sample> samples;
  samples.reserve(phantoms.size());
  for (const Phantom& p : phantoms) samples.push_back(p.sample);
  Manifest m = write_sample_dataset(samples, dir, split);
  for (std::size_t i = 0; i < phantoms.size(); ++i) {
    const ContourSet cs = phantoms[i].contours();
    ManifestEntry& e = m.entries[i];
    e.endo = (dir / "contours" / (e.id + "_endo.txt")).lexically_normal();
    e.epi = (dir / "contours" / (e.id + "_epi.txt")).lexically_normal();
    fs::create_directories(e.endo->parent_path());
    save_contour_text(*cs.endo, *e.endo);
    save_contour_text(*cs.epi, *e.epi);
  }
  return m;
}

Manifest write_sample_dataset(const std::vector<Sample>& samples, const fs::path& dir, Split split) {
  Manifest m;
  if (!samples.empty()) m.default_spacing = samples.front().spacing;
  std::set<std::string> ids;
  for (const Sample& s : samples) {
    s.validate();
    if (!ids.insert(s.id).second) throw_invalid("write_sample_dataset: duplicate sample id '" + s.id + "'");
    ManifestEntry e;
    e.id = s.id;
    e.case_id = s.case_id.empty() ? s.id : s.case_id;
    e.image = (dir / "images" / (s.id + ".pgm")).lexically_normal();
    e.mask = (dir / "masks" / (s.id + ".pgm")).lexically_normal();
    if (!(s.spacing == m.default_spacing)) e.spacing = s.spacing;
    e.split = split;
    save_image_pgm(s.image, e.image);
    save_mask_pgm(s.mask, *e.mask);
    m.entries.push_back(std::move(e));
  }
  return m;
}

namespace {

std::optional<Polygon> optional_contour(const std::optional<fs::path>& p) {
  if (!p) return std::nullopt;
  return load_contour_text(*p);
}

}  // namespace

Sample load_sample(const Manifest& manifest, const ManifestEntry& entry, int classes) {
  Sample s;
  s.id = entry.id;
  s.case_id = entry.case_id;
  s.spacing = manifest.spacing_of(entry);
  s.image = load_image_pgm(entry.image);
  if (entry.mask) {
    s.mask = load_mask_pgm(*entry.mask, classes);
  } else {
    s.mask = contour_to_mask(optional_contour(entry.endo), optional_contour(entry.epi), s.image.rows, s.image.cols);
  }
  if (s.mask.rows != s.image.rows || s.mask.cols != s.image.cols) {
    throw Error(ErrorKind::kConfig, "sample '" + entry.id + "': mask " + std::to_string(s.mask.rows) + "x" +
                                        std::to_string(s.mask.cols) + " does not match image " +
                                        std::to_string(s.image.rows) + "x" + std::to_string(s.image.cols));
  }
  s.validate(classes);
  return s;
}

ContourSet load_contours(const Manifest& manifest, const ManifestEntry& entry, int classes) {
  ContourSet cs;
  cs.slice_id = entry.id;
  cs.spacing = manifest.spacing_of(entry);
  if (entry.endo || entry.epi) {
    cs.endo = optional_contour(entry.endo);
    cs.epi = optional_contour(entry.epi);
    return cs;
  }
  const Mask m = load_mask_pgm(*entry.mask, classes);
  cs.endo = mask_to_contour(m, Region::kCavity);
  cs.epi = mask_to_contour(m, Region::kCavityAndMyocardium);
  return cs;
}

}  // namespace msfcn
