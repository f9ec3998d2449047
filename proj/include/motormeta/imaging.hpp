#pragma once
// Segment -> grayscale image conversion and flat grayscale morphology.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "motormeta/error.hpp"
#include "motormeta/signalgen.hpp"

namespace motormeta {

/// Square row-major image. Pixels live in [0,1] once normalized.
struct GrayImage {
  int n = 0;
  std::vector<double> pixels;

  GrayImage() = default;
  GrayImage(int side, double fill) : n(side), pixels(static_cast<std::size_t>(side) * side, fill) {}

  double& at(int r, int c) { return pixels[static_cast<std::size_t>(r) * n + c]; }
  double at(int r, int c) const { return pixels[static_cast<std::size_t>(r) * n + c]; }

  friend bool operator==(const GrayImage&, const GrayImage&) = default;
};

struct StructuringElement {
  int k = 3;
  std::vector<std::uint8_t> mask;  // k*k, row-major; origin at the center

  static StructuringElement square(int k) {
    StructuringElement se;
    se.k = k;
    se.mask.assign(static_cast<std::size_t>(k) * k, 1);
    se.validate();
    return se;
  }

  static StructuringElement cross(int k) {
    StructuringElement se;
    se.k = k;
    se.mask.assign(static_cast<std::size_t>(k) * k, 0);
    for (int i = 0; i < k; ++i) {
      se.mask[static_cast<std::size_t>(k / 2) * k + i] = 1;
      se.mask[static_cast<std::size_t>(i) * k + k / 2] = 1;
    }
    se.validate();
    return se;
  }

  void validate() const {
    require(k >= 1 && k % 2 == 1, "structuring element size must be odd");
    require(mask.size() == static_cast<std::size_t>(k) * k, "structuring element mask has wrong size");
    require(std::any_of(mask.begin(), mask.end(), [](auto m) { return m != 0; }),
            "structuring element must contain at least one cell");
  }

  bool has(int dr, int dc) const {
    const int h = k / 2;
    return mask[static_cast<std::size_t>(dr + h) * k + (dc + h)] != 0;
  }

  StructuringElement reflected() const {
    StructuringElement r = *this;
    std::reverse(r.mask.begin(), r.mask.end());
    return r;
  }
};

/// Row-major fill: row r holds values [r*n, (r+1)*n).
inline GrayImage reshape_to_image(std::span<const double> values) {
  const auto len = values.size();
  const auto n = static_cast<int>(std::llround(std::sqrt(static_cast<double>(len))));
  require(len >= 1 && static_cast<std::size_t>(n) * static_cast<std::size_t>(n) == len,
          "segment length " + std::to_string(len) + " is not a perfect square");
  GrayImage img;
  img.n = n;
  img.pixels.assign(values.begin(), values.end());
  return img;
}

inline GrayImage reshape_to_image(const SignalSegment& seg) { return reshape_to_image(seg.values); }

inline std::vector<double> flatten(const GrayImage& img) { return img.pixels; }

/// Affine min-max map onto [0,1]; a constant image maps to 0.5 everywhere.
inline GrayImage normalize(const GrayImage& img) {
  require(std::all_of(img.pixels.begin(), img.pixels.end(), [](double v) { return std::isfinite(v); }),
          "normalize: non-finite pixel");
  GrayImage out = img;
  if (img.pixels.empty()) return out;
  const auto [lo_it, hi_it] = std::minmax_element(img.pixels.begin(), img.pixels.end());
  const double lo = *lo_it, hi = *hi_it;
  if (!(hi > lo)) {
    std::fill(out.pixels.begin(), out.pixels.end(), 0.5);
    return out;
  }
  const double range = hi - lo;
  for (auto& v : out.pixels) v = std::clamp((v - lo) / range, 0.0, 1.0);
  return out;
}

// Flat morphology. The neighbourhood of a pixel is clipped to the image; for square and cross
// elements this is the same as edge replication.

inline GrayImage erode(const GrayImage& img, const StructuringElement& se) {
  se.validate();
  const int n = img.n, h = se.k / 2;
  GrayImage out(n, 0.0);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) {
      double m = std::numeric_limits<double>::infinity();
      for (int dr = -h; dr <= h; ++dr)
        for (int dc = -h; dc <= h; ++dc) {
          const int rr = r + dr, cc = c + dc;
          if (rr < 0 || rr >= n || cc < 0 || cc >= n || !se.has(dr, dc)) continue;
          m = std::min(m, img.at(rr, cc));
        }
      // An element without the origin can miss the image entirely near a corner; fall back to the pixel.
      out.at(r, c) = std::isinf(m) ? img.at(r, c) : m;
    }
  return out;
}

inline GrayImage dilate(const GrayImage& img, const StructuringElement& se) {
  se.validate();
  const int n = img.n, h = se.k / 2;
  GrayImage out(n, 0.0);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) {
      double m = -std::numeric_limits<double>::infinity();
      for (int dr = -h; dr <= h; ++dr)
        for (int dc = -h; dc <= h; ++dc) {
          const int rr = r - dr, cc = c - dc;
          if (rr < 0 || rr >= n || cc < 0 || cc >= n || !se.has(dr, dc)) continue;
          m = std::max(m, img.at(rr, cc));
        }
      out.at(r, c) = std::isinf(m) ? img.at(r, c) : m;
    }
  return out;
}

inline GrayImage open(const GrayImage& img, const StructuringElement& se) { return dilate(erode(img, se), se); }
inline GrayImage close(const GrayImage& img, const StructuringElement& se) { return erode(dilate(img, se), se); }

// ---------------------------------------------------------------------------
// Configurable preprocessing chain

enum class MorphOp { erode, dilate, open, close };

struct MorphStep {
  MorphOp op = MorphOp::open;
  int size = 3;
  bool cross = false;

  StructuringElement element() const {
    return cross ? StructuringElement::cross(size) : StructuringElement::square(size);
  }
};

/// Parses "open3", "close5", "erode3x" (trailing x = cross-shaped element).
inline MorphStep parse_morph_step(std::string_view token) {
  MorphStep step;
  std::string_view rest;
  auto starts = [&](std::string_view p) {
    if (token.substr(0, p.size()) != p) return false;
    rest = token.substr(p.size());
    return true;
  };
  if (starts("erode")) step.op = MorphOp::erode;
  else if (starts("dilate")) step.op = MorphOp::dilate;
  else if (starts("open")) step.op = MorphOp::open;
  else if (starts("close")) step.op = MorphOp::close;
  else throw ValidationError("unknown morphology step '" + std::string(token) + "'");
  if (!rest.empty() && rest.back() == 'x') {
    step.cross = true;
    rest.remove_suffix(1);
  }
  require(!rest.empty() && std::all_of(rest.begin(), rest.end(), [](char ch) { return ch >= '0' && ch <= '9'; }),
          "morphology step '" + std::string(token) + "' needs an element size");
  step.size = std::stoi(std::string(rest));
  require(step.size >= 1 && step.size % 2 == 1, "morphology element size must be odd");
  return step;
}

inline std::string to_string(const MorphStep& s) {
  static constexpr std::string_view names[] = {"erode", "dilate", "open", "close"};
  return std::string(names[static_cast<int>(s.op)]) + std::to_string(s.size) + (s.cross ? "x" : "");
}

inline GrayImage apply(const MorphStep& step, const GrayImage& img) {
  const auto se = step.element();
  switch (step.op) {
    case MorphOp::erode: return erode(img, se);
    case MorphOp::dilate: return dilate(img, se);
    case MorphOp::open: return open(img, se);
    case MorphOp::close: return close(img, se);
  }
  throw ValidationError("unknown morphology op");
}

struct MorphChain {
  std::vector<MorphStep> steps{MorphStep{}};  // default: one opening with a 3x3 square

  static MorphChain identity() { return MorphChain{{}}; }
};

/// reshape -> normalize -> morphology chain -> normalize.
inline GrayImage preprocess(std::span<const double> segment_values, const MorphChain& chain = {}) {
  GrayImage img = normalize(reshape_to_image(segment_values));
  if (chain.steps.empty()) return img;
  for (const auto& s : chain.steps) img = apply(s, img);
  return normalize(img);
}

inline GrayImage preprocess(const SignalSegment& seg, const MorphChain& chain = {}) {
  return preprocess(std::span<const double>(seg.values), chain);
}

/// ASCII PGM (P2) with 8-bit quantization, for eyeballing images.
inline void write_pgm(const GrayImage& img, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw RuntimeFailure("cannot open " + path + " for writing");
  os << "P2\n" << img.n << ' ' << img.n << "\n255\n";
  for (int r = 0; r < img.n; ++r) {
    for (int c = 0; c < img.n; ++c) {
      const auto q = static_cast<int>(std::lround(std::clamp(img.at(r, c), 0.0, 1.0) * 255.0));
      os << q << (c + 1 < img.n ? ' ' : '\n');
    }
  }
}

}  // namespace motormeta
