#pragma once

// Deterministic rasterization of stimuli into 8-bit grayscale images.
// Coverage anti-aliasing uses a cell-centered n x n supersample grid per
// pixel, which makes the output exactly mirror-symmetric and independent of
// inducer ordering.

#include <cstdint>
#include <vector>

#include "kanizsa/common.hpp"
#include "kanizsa/geometry.hpp"

namespace kanizsa {

struct Image {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> pixels;  // row-major, 0 = ink, 255 = background

    std::uint8_t at(int x, int y) const { return pixels[static_cast<size_t>(y) * width + x]; }
};

struct RasterConfig {
    int width = 256;
    int height = 256;
    int supersample = 4;          // one of {1, 2, 4, 8}
    std::uint8_t ink = 0;
    std::uint8_t background = 255;
};

namespace detail {

// Precomputed membership test. A point is inside the inducer iff it lies in
// the disc (<= on radius) and outside the removed wedge; wedge membership
// uses <= on the half-angle, so points on a boundary ray count as removed.
// The angular test is dot-product based: |dev| <= half  <=>  u.b >= |u|*cos(half),
// which also makes the disc center itself count as in-mouth (|u| = 0).
struct InducerGeom {
    double cx, cy, r2, bx, by, cos_half;

    explicit InducerGeom(const InducerSpec& ind)
        : cx(ind.center.x),
          cy(ind.center.y),
          r2(ind.radius * ind.radius),
          bx(std::cos(ind.mouth_bisector)),
          by(std::sin(ind.mouth_bisector)),
          cos_half(std::cos(ind.opening_angle / 2.0)) {}

    bool contains(double x, double y) const {
        double dx = x - cx;
        double dy = y - cy;
        double d2 = dx * dx + dy * dy;
        if (d2 > r2) return false;
        double along = dx * bx + dy * by;
        return along < std::sqrt(d2) * cos_half;
    }
};

}  // namespace detail

/// True iff p lies in the disc of `ind` but not in its removed wedge.
/// The disc center itself is treated as in-mouth and returns false.
inline bool point_in_inducer(Point2 p, const InducerSpec& ind) {
    return detail::InducerGeom(ind).contains(p.x, p.y);
}

/// Coverage rasterization: each pixel's intensity is
/// round(background*(1-c) + ink*c) where c is the fraction of the pixel's
/// supersample points inside any inducer. Deterministic and independent of
/// inducer ordering.
inline Image rasterize(const StimulusSpec& stim, const RasterConfig& cfg) {
    if (cfg.width < 32 || cfg.height < 32) throw InvalidGeometry("image dimensions below 32");
    if (cfg.supersample != 1 && cfg.supersample != 2 && cfg.supersample != 4 &&
        cfg.supersample != 8) {
        throw InvalidGeometry("supersample must be one of {1,2,4,8}");
    }

    const int n = cfg.supersample;
    const double inv_w = 1.0 / cfg.width;
    const double inv_h = 1.0 / cfg.height;
    const double samples = static_cast<double>(n) * n;

    const detail::InducerGeom geoms[3] = {detail::InducerGeom(stim.inducers[0]),
                                          detail::InducerGeom(stim.inducers[1]),
                                          detail::InducerGeom(stim.inducers[2])};

    // A pixel can only be touched by a disc whose center is within
    // radius + half the pixel diagonal of the pixel center.
    const double half_diag = 0.5 * std::hypot(inv_w, inv_h);
    double skip_r2[3];
    for (int g = 0; g < 3; ++g) {
        double r = stim.inducers[g].radius + half_diag;
        skip_r2[g] = r * r;
    }

    // Cell-centered sample offsets within a pixel; dyadic for n in {1,2,4,8}.
    double offs[8];
    for (int s = 0; s < n; ++s) offs[s] = (s + 0.5) / n;

    Image img{cfg.width, cfg.height,
              std::vector<std::uint8_t>(static_cast<size_t>(cfg.width) * cfg.height)};

    for (int row = 0; row < cfg.height; ++row) {
        double yc = (row + 0.5) * inv_h;
        std::uint8_t* out = img.pixels.data() + static_cast<size_t>(row) * cfg.width;
        for (int col = 0; col < cfg.width; ++col) {
            double xc = (col + 0.5) * inv_w;
            bool near = false;
            for (int g = 0; g < 3 && !near; ++g) {
                double dx = xc - geoms[g].cx;
                double dy = yc - geoms[g].cy;
                near = dx * dx + dy * dy <= skip_r2[g];
            }
            if (!near) {
                out[col] = cfg.background;
                continue;
            }
            int count = 0;
            for (int sy = 0; sy < n; ++sy) {
                double y = (row + offs[sy]) * inv_h;
                for (int sx = 0; sx < n; ++sx) {
                    double x = (col + offs[sx]) * inv_w;
                    if (geoms[0].contains(x, y) || geoms[1].contains(x, y) ||
                        geoms[2].contains(x, y)) {
                        ++count;
                    }
                }
            }
            double coverage = count / samples;
            out[col] = static_cast<std::uint8_t>(
                std::lround(cfg.background * (1.0 - coverage) + cfg.ink * coverage));
        }
    }
    return img;
}

}  // namespace kanizsa
