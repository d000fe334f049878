#pragma once

#include <array>
#include <string_view>
#include <utility>
#include <vector>

#include "msfcn/image.hpp"

namespace msfcn {

/// The eight symmetries of the square.
enum class Dihedral {
  kIdentity,
  kRot90,
  kRot180,
  kRot270,
  kFlipH,
  kFlipV,
  kTranspose,
  kAntiTranspose,
};

inline constexpr std::array<Dihedral, 8> kAllDihedral = {
    Dihedral::kIdentity, Dihedral::kRot90,  Dihedral::kRot180,    Dihedral::kRot270,
    Dihedral::kFlipH,    Dihedral::kFlipV,  Dihedral::kTranspose, Dihedral::kAntiTranspose};

std::string_view to_string(Dihedral e) noexcept;

/// `a` applied after `b`.
Dihedral compose(Dihedral a, Dihedral b) noexcept;
Dihedral inverse(Dihedral e) noexcept;

/// Source index of output pixel (r, c) in an n x n grid under `e`.
std::pair<int, int> dihedral_source(Dihedral e, int n, int r, int c) noexcept;
/// Where input pixel (r, c) lands under `e`.
std::pair<int, int> dihedral_target(Dihedral e, int n, int r, int c) noexcept;

/// Shifts image and mask by (dx, dy) pixels: output(r, c) = input(r - dy, c - dx).
/// Vacated pixels become 0 / background.
Sample displace(const Sample& s, int dx, int dy);

/// Crop of `size` x `size` at offset floor((H - size) / 2), floor((W - size) / 2).
Sample center_crop(const Sample& s, int size = 108);

/// Exact index permutation of a square sample.
Sample dihedral(const Sample& s, Dihedral e);

template <typename T>
Grid<T> dihedral(const Grid<T>& g, Dihedral e);

/// The five displacements: identity and the four (+-5, +-5) diagonals.
inline constexpr std::array<std::pair<int, int>, 5> kDisplacements = {
    std::pair{0, 0}, std::pair{5, 5}, std::pair{5, -5}, std::pair{-5, 5}, std::pair{-5, -5}};

struct AugmentOptions {
  int crop_size = 108;
};

/// For every sample, 5 displacements x 8 dihedral elements, each cropped:
/// 40 outputs per input in a fixed order. Ids encode the transform chain.
std::vector<Sample> augment_dataset(const std::vector<Sample>& samples, const AugmentOptions& opt = {});

}  // namespace msfcn
