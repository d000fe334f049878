#include "msfcn/augment.hpp"

#include <cstdlib>
#include <string>

namespace msfcn {

void Sample::validate(int classes) const {
  if (image.rows != mask.rows || image.cols != mask.cols) {
    throw_invalid("sample '" + id + "': image " + std::to_string(image.rows) + "x" +
                  std::to_string(image.cols) + " and mask " + std::to_string(mask.rows) + "x" +
                  std::to_string(mask.cols) + " differ in shape");
  }
  if (image.data.size() != static_cast<std::size_t>(image.rows) * image.cols ||
      mask.data.size() != static_cast<std::size_t>(mask.rows) * mask.cols) {
    throw_invalid("sample '" + id + "': grid storage does not match its dimensions");
  }
  for (auto v : mask.data) {
    if (v >= classes) {
      throw_invalid("sample '" + id + "': mask label " + std::to_string(v) + " >= classes " +
                    std::to_string(classes));
    }
  }
  if (!(spacing.row_mm > 0.0 && spacing.col_mm > 0.0)) {
    throw_invalid("sample '" + id + "': spacing must be positive");
  }
}

namespace {

struct Signed {
  bool swap;
  bool flip_r;
  bool flip_c;
};

constexpr Signed kTable[8] = {
    {false, false, false},  // identity
    {true, false, true},    // rot90 (counter-clockwise)
    {false, true, true},    // rot180
    {true, true, false},    // rot270
    {false, false, true},   // flipH (mirror columns)
    {false, true, false},   // flipV (mirror rows)
    {true, false, false},   // transpose
    {true, true, true},     // anti-transpose
};

std::string suffix(int v) { return (v >= 0 ? "+" : "") + std::to_string(v); }

}  // namespace

std::string_view to_string(Dihedral e) noexcept {
  switch (e) {
    case Dihedral::kIdentity: return "id";
    case Dihedral::kRot90: return "rot90";
    case Dihedral::kRot180: return "rot180";
    case Dihedral::kRot270: return "rot270";
    case Dihedral::kFlipH: return "flipH";
    case Dihedral::kFlipV: return "flipV";
    case Dihedral::kTranspose: return "transpose";
    case Dihedral::kAntiTranspose: return "antitranspose";
  }
  return "?";
}

std::pair<int, int> dihedral_source(Dihedral e, int n, int r, int c) noexcept {
  const Signed& s = kTable[static_cast<int>(e)];
  int a = s.swap ? c : r;
  int b = s.swap ? r : c;
  if (s.flip_r) a = n - 1 - a;
  if (s.flip_c) b = n - 1 - b;
  return {a, b};
}

Dihedral compose(Dihedral a, Dihedral b) noexcept {
  // Applying b then a reads input at src_b(src_a(r, c)); probe a 3x3 grid.
  for (Dihedral e : kAllDihedral) {
    bool match = true;
    for (int r = 0; r < 3 && match; ++r) {
      for (int c = 0; c < 3 && match; ++c) {
        const auto [ar, ac] = dihedral_source(a, 3, r, c);
        match = dihedral_source(b, 3, ar, ac) == dihedral_source(e, 3, r, c);
      }
    }
    if (match) return e;
  }
  return Dihedral::kIdentity;  // unreachable: D4 is closed
}

Dihedral inverse(Dihedral e) noexcept {
  for (Dihedral f : kAllDihedral) {
    if (compose(f, e) == Dihedral::kIdentity) return f;
  }
  return Dihedral::kIdentity;
}

std::pair<int, int> dihedral_target(Dihedral e, int n, int r, int c) noexcept {
  return dihedral_source(inverse(e), n, r, c);
}

template <typename T>
Grid<T> dihedral(const Grid<T>& g, Dihedral e) {
  if (g.rows != g.cols) {
    throw_invalid("dihedral: grid must be square, got " + std::to_string(g.rows) + "x" +
                  std::to_string(g.cols));
  }
  const int n = g.rows;
  Grid<T> out(n, n);
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      const auto [sr, sc] = dihedral_source(e, n, r, c);
      out(r, c) = g(sr, sc);
    }
  }
  return out;
}

template Grid<double> dihedral<double>(const Grid<double>&, Dihedral);
template Grid<std::uint8_t> dihedral<std::uint8_t>(const Grid<std::uint8_t>&, Dihedral);

Sample displace(const Sample& s, int dx, int dy) {
  s.validate();
  if (std::abs(dx) >= s.image.cols || std::abs(dy) >= s.image.rows) {
    throw_invalid("displace: shift (" + std::to_string(dx) + ", " + std::to_string(dy) +
                  ") not smaller than image " + std::to_string(s.image.rows) + "x" +
                  std::to_string(s.image.cols) + " of sample '" + s.id + "'");
  }
  Sample out;
  out.image = Image(s.image.rows, s.image.cols, 0.0);
  out.mask = Mask(s.mask.rows, s.mask.cols, kBackground);
  for (int r = 0; r < s.image.rows; ++r) {
    for (int c = 0; c < s.image.cols; ++c) {
      const int sr = r - dy;
      const int sc = c - dx;
      if (!s.image.contains(sr, sc)) continue;
      out.image(r, c) = s.image(sr, sc);
      out.mask(r, c) = s.mask(sr, sc);
    }
  }
  out.spacing = s.spacing;
  out.id = s.id + "_d" + suffix(dx) + suffix(dy);
  out.case_id = s.case_id;
  return out;
}

Sample center_crop(const Sample& s, int size) {
  s.validate();
  if (size <= 0 || size > s.image.rows || size > s.image.cols) {
    throw_invalid("center_crop: size " + std::to_string(size) + " does not fit image " +
                  std::to_string(s.image.rows) + "x" + std::to_string(s.image.cols) + " of sample '" +
                  s.id + "'");
  }
  const int r0 = (s.image.rows - size) / 2;
  const int c0 = (s.image.cols - size) / 2;
  Sample out;
  out.image = Image(size, size);
  out.mask = Mask(size, size);
  for (int r = 0; r < size; ++r) {
    for (int c = 0; c < size; ++c) {
      out.image(r, c) = s.image(r0 + r, c0 + c);
      out.mask(r, c) = s.mask(r0 + r, c0 + c);
    }
  }
  out.spacing = s.spacing;
  out.id = s.id;
  out.case_id = s.case_id;
  return out;
}

Sample dihedral(const Sample& s, Dihedral e) {
  s.validate();
  if (s.image.rows != s.image.cols) {
    throw_invalid("dihedral: sample '" + s.id + "' is not square");
  }
  Sample out;
  out.image = dihedral(s.image, e);
  out.mask = dihedral(s.mask, e);
  // Axis-swapping elements exchange row and column spacing.
  out.spacing = kTable[static_cast<int>(e)].swap ? Spacing{s.spacing.col_mm, s.spacing.row_mm}
                                                 : s.spacing;
  out.id = s.id + "_" + std::string(to_string(e));
  out.case_id = s.case_id;
  return out;
}

std::vector<Sample> augment_dataset(const std::vector<Sample>& samples, const AugmentOptions& opt) {
  std::vector<Sample> out;
  out.reserve(samples.size() * kDisplacements.size() * kAllDihedral.size());
  for (const Sample& s : samples) {
    try {
      for (const auto& [dx, dy] : kDisplacements) {
        const Sample cropped = center_crop(displace(s, dx, dy), opt.crop_size);
        for (Dihedral e : kAllDihedral) out.push_back(dihedral(cropped, e));
      }
    } catch (const Error& e) {
      throw Error(e.kind(), "augment: sample '" + s.id + "': " + e.what());
    }
  }
  return out;
}

}  // namespace msfcn
