#pragma once

// Parametric model of Kanizsa-triangle stimuli: three wedge-cut discs
// ("Pac-Men") whose mouths induce an illusory triangle. A stimulus is valid
// when every wedge boundary ray points exactly at another inducer's center;
// the perturbations below each break that property in a distinct way.
//
// All coordinates are normalized image coordinates in [0,1]^2. Triangles are
// equilateral; circumradius and inducer radius are fractions of image width.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "kanizsa/common.hpp"
#include "kanizsa/rng.hpp"

namespace kanizsa {

struct Point2 {
    double x = 0.0;
    double y = 0.0;

    Point2 operator+(Point2 o) const { return {x + o.x, y + o.y}; }
    Point2 operator-(Point2 o) const { return {x - o.x, y - o.y}; }
    Point2 operator*(double s) const { return {x * s, y * s}; }
    double norm() const { return std::hypot(x, y); }
};

inline double dot(Point2 a, Point2 b) { return a.x * b.x + a.y * b.y; }

inline Point2 normalized(Point2 v) {
    double n = v.norm();
    if (n == 0.0) throw InvalidGeometry("cannot normalize zero vector");
    return {v.x / n, v.y / n};
}

/// Direction of v as an angle in [0, 2pi).
inline double direction_of(Point2 v) { return wrap_two_pi(std::atan2(v.y, v.x)); }

struct TrianglePose {
    Point2 centroid;
    double circumradius = 0.0;  // fraction of image width, in (0, 0.5)
    double orientation = 0.0;   // radians in [0, 2pi)
};

/// Side length of the equilateral triangle implied by a pose.
inline double side_length(const TrianglePose& pose) {
    return pose.circumradius * std::sqrt(3.0);
}

struct InducerSpec {
    Point2 center;
    double radius = 0.0;         // fraction of image width
    double mouth_bisector = 0.0; // direction the removed wedge opens toward, [0, 2pi)
    double opening_angle = 0.0;  // angular width of the removed wedge, (0, pi)
};

enum class PerturbKind : std::uint8_t { None, Offset, Angle, Rot };
enum class Label : std::uint8_t { Valid, Invalid };

/// OFFS | ANGLE | ROT | COMB: which perturbation family an invalid sample draws from.
enum class DatasetKind : std::uint8_t { Offs, Angle, Rot, Comb };

inline const char* to_string(DatasetKind k) {
    switch (k) {
        case DatasetKind::Offs: return "offs";
        case DatasetKind::Angle: return "angle";
        case DatasetKind::Rot: return "rot";
        case DatasetKind::Comb: return "comb";
    }
    return "?";
}

inline const char* to_string(PerturbKind k) {
    switch (k) {
        case PerturbKind::None: return "none";
        case PerturbKind::Offset: return "offset";
        case PerturbKind::Angle: return "angle";
        case PerturbKind::Rot: return "rot";
    }
    return "?";
}

struct PerturbationRecord {
    PerturbKind kind = PerturbKind::None;
    std::vector<int> targets;            // sorted subset of {0,1,2}; empty iff kind=None
    double offset_distance = 0.0;        // fraction of side length (Offset only)
    int offset_sign = 0;                 // +-1 (Offset only)
    double angle_delta = 0.0;            // radians (Angle only)
    std::vector<double> rotation_deltas; // radians, parallel to targets (Rot only)
};

struct StimulusSpec {
    std::array<InducerSpec, 3> inducers;
    Label label = Label::Valid;
    PerturbationRecord record;
    TrianglePose pose;
};

struct OracleTolerance {
    double angle_tol = deg_to_rad(2.0);
};

/// How an Offset perturbation moves the target inducer relative to the
/// segment joining the other two centers. `Parallel` is the literal reading
/// of "in the direction of the connecting line"; `TowardLine` moves along
/// the perpendicular instead.
enum class OffsetDirection : std::uint8_t { Parallel, TowardLine };

/// Sampling ranges for poses and perturbations. Minimum magnitudes are chosen
/// so the oracle's measured misalignment always exceeds angle_tol.
struct GeometryRanges {
    double margin = 0.02;           // min distance of any inducer disc to the frame
    double circumradius_min = 0.22;
    double circumradius_max = 0.34;
    double r_ratio_min = 0.18;      // inducer radius as fraction of side length
    double r_ratio_max = 0.24;
    double offset_min = 0.06;       // |d| as fraction of side length
    double offset_max = 0.20;
    double angle_min = deg_to_rad(8.0);
    double angle_max = deg_to_rad(35.0);
    double rot_min = deg_to_rad(12.0);
    double rot_max = deg_to_rad(180.0);
    OffsetDirection offset_direction = OffsetDirection::Parallel;
    bool rot_single_vertex = false; // one-vertex ROT variant
};

/// Vertex k = centroid + R * (cos(orientation + 2*pi*k/3), sin(...)).
inline std::array<Point2, 3> vertices_of(const TrianglePose& pose) {
    std::array<Point2, 3> v;
    for (int k = 0; k < 3; ++k) {
        double a = pose.orientation + two_pi * k / 3.0;
        v[k] = {pose.centroid.x + pose.circumradius * std::cos(a),
                pose.centroid.y + pose.circumradius * std::sin(a)};
    }
    return v;
}

namespace detail {

/// Throws InvalidGeometry unless all discs keep `margin` to the frame and
/// pairwise center distances exceed r_i + r_j + 0.01.
inline void check_inducer_layout(const std::array<InducerSpec, 3>& ind, double margin) {
    for (const auto& i : ind) {
        if (!(i.radius > 0.0)) throw InvalidGeometry("inducer radius must be positive");
        if (i.center.x - i.radius < margin || i.center.x + i.radius > 1.0 - margin ||
            i.center.y - i.radius < margin || i.center.y + i.radius > 1.0 - margin) {
            throw InvalidGeometry("inducer leaves the image margin");
        }
    }
    for (int a = 0; a < 3; ++a) {
        for (int b = a + 1; b < 3; ++b) {
            double d = (ind[a].center - ind[b].center).norm();
            if (!(d > ind[a].radius + ind[b].radius + 0.01)) {
                throw InvalidGeometry("inducers overlap");
            }
        }
    }
}

inline std::pair<int, int> other_two(int k) {
    switch (k) {
        case 0: return {1, 2};
        case 1: return {0, 2};
        default: return {0, 1};
    }
}

}  // namespace detail

/// Builds a valid stimulus: one inducer per vertex, mouth bisector along the
/// interior-angle bisector, opening angle equal to the interior angle, so both
/// wedge boundary rays point exactly at the other two inducer centers.
inline StimulusSpec make_valid(const TrianglePose& pose, double r_ratio,
                               double margin = 0.02) {
    auto verts = vertices_of(pose);
    double radius = r_ratio * side_length(pose);

    StimulusSpec stim;
    stim.pose = pose;
    stim.label = Label::Valid;
    for (int k = 0; k < 3; ++k) {
        auto [i, j] = detail::other_two(k);
        Point2 ui = normalized(verts[i] - verts[k]);
        Point2 uj = normalized(verts[j] - verts[k]);
        double theta_i = direction_of(ui);
        double theta_j = direction_of(uj);
        stim.inducers[k].center = verts[k];
        stim.inducers[k].radius = radius;
        stim.inducers[k].mouth_bisector = direction_of(normalized(ui + uj));
        stim.inducers[k].opening_angle = std::fabs(wrap_pi(theta_i - theta_j));
    }
    detail::check_inducer_layout(stim.inducers, margin);
    return stim;
}

/// OFFS: translate inducer k by sign*d*side_length along the unit vector of
/// the segment joining the other two inducer centers (or perpendicular to it,
/// toward/away from that line, for OffsetDirection::TowardLine). The mouth is
/// not re-aimed; bisector and opening angle stay fixed in the world frame.
inline StimulusSpec perturb_offset(const StimulusSpec& stim, int k, double d, int sign,
                                   OffsetDirection dir = OffsetDirection::Parallel,
                                   double margin = 0.02) {
    if (stim.label != Label::Valid) throw InvalidGeometry("perturb_offset needs a valid stimulus");
    if (k < 0 || k > 2) throw InvalidGeometry("vertex index out of range");
    if (!(d > 0.0)) throw InvalidGeometry("offset distance must be positive");
    if (sign != 1 && sign != -1) throw InvalidGeometry("offset sign must be +-1");

    auto [i, j] = detail::other_two(k);
    Point2 u = normalized(stim.inducers[j].center - stim.inducers[i].center);
    if (dir == OffsetDirection::TowardLine) {
        u = {-u.y, u.x};  // unit normal of the connecting line
    }
    StimulusSpec out = stim;
    double step = sign * d * side_length(stim.pose);
    out.inducers[k].center = stim.inducers[k].center + u * step;
    detail::check_inducer_layout(out.inducers, margin);

    out.label = Label::Invalid;
    out.record = PerturbationRecord{PerturbKind::Offset, {k}, d, sign, 0.0, {}};
    return out;
}

/// ANGLE: widen or narrow the removed wedge of inducer k by delta, keeping
/// the bisector fixed.
inline StimulusSpec perturb_angle(const StimulusSpec& stim, int k, double delta) {
    if (stim.label != Label::Valid) throw InvalidGeometry("perturb_angle needs a valid stimulus");
    if (k < 0 || k > 2) throw InvalidGeometry("vertex index out of range");
    if (delta == 0.0) throw InvalidGeometry("zero angle delta would keep the stimulus valid");
    double angle = stim.inducers[k].opening_angle + delta;
    if (!(angle > 0.0) || !(angle < pi)) {
        throw InvalidGeometry("resulting opening angle outside (0, pi)");
    }
    StimulusSpec out = stim;
    out.inducers[k].opening_angle = angle;
    out.label = Label::Invalid;
    out.record = PerturbationRecord{PerturbKind::Angle, {k}, 0.0, 0, delta, {}};
    return out;
}

/// ROT: rotate the mouths of one to three inducers in place. Deltas are
/// wrapped to (-pi, pi]; a wrapped delta of zero (a full turn) is rejected.
inline StimulusSpec perturb_rot(const StimulusSpec& stim, const std::vector<int>& targets,
                                const std::vector<double>& deltas) {
    if (stim.label != Label::Valid) throw InvalidGeometry("perturb_rot needs a valid stimulus");
    if (targets.empty() || targets.size() > 3 || targets.size() != deltas.size()) {
        throw InvalidGeometry("rot needs 1-3 targets with matching deltas");
    }
    std::vector<int> sorted = targets;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end() ||
        sorted.front() < 0 || sorted.back() > 2) {
        throw InvalidGeometry("rot targets must be distinct vertex indices");
    }

    StimulusSpec out = stim;
    std::vector<double> wrapped;
    wrapped.reserve(targets.size());
    for (size_t t = 0; t < targets.size(); ++t) {
        double delta = wrap_pi(deltas[t]);
        if (delta == 0.0) throw InvalidGeometry("rot delta is a full turn (identity)");
        out.inducers[targets[t]].mouth_bisector =
            wrap_two_pi(out.inducers[targets[t]].mouth_bisector + delta);
        wrapped.push_back(delta);
    }
    out.label = Label::Invalid;
    out.record = PerturbationRecord{PerturbKind::Rot, targets, 0.0, 0, 0.0, wrapped};
    return out;
}

/// Applies one perturbation of the requested family with parameters drawn
/// uniformly from `ranges`. COMB draws the error kind once, uniformly from
/// {Offset, Angle, Rot}, then resamples parameters of that kind on geometry
/// violations. Throws GenerationExhausted after 100 failed attempts.
inline StimulusSpec make_invalid(const StimulusSpec& stim, DatasetKind kind, SplitMix64& rng,
                                 const GeometryRanges& ranges) {
    if (stim.label != Label::Valid) throw InvalidGeometry("make_invalid needs a valid stimulus");

    PerturbKind chosen;
    switch (kind) {
        case DatasetKind::Offs: chosen = PerturbKind::Offset; break;
        case DatasetKind::Angle: chosen = PerturbKind::Angle; break;
        case DatasetKind::Rot: chosen = PerturbKind::Rot; break;
        case DatasetKind::Comb: {
            constexpr PerturbKind pool[3] = {PerturbKind::Offset, PerturbKind::Angle,
                                             PerturbKind::Rot};
            chosen = pool[rng.next_below(3)];
            break;
        }
        default: throw InvalidGeometry("unknown dataset kind");
    }

    for (int attempt = 0; attempt < 100; ++attempt) {
        try {
            switch (chosen) {
                case PerturbKind::Offset: {
                    int k = static_cast<int>(rng.next_below(3));
                    double d = rng.uniform(ranges.offset_min, ranges.offset_max);
                    return perturb_offset(stim, k, d, rng.sign(), ranges.offset_direction,
                                          ranges.margin);
                }
                case PerturbKind::Angle: {
                    int k = static_cast<int>(rng.next_below(3));
                    double mag = rng.uniform(ranges.angle_min, ranges.angle_max);
                    return perturb_angle(stim, k, rng.sign() * mag);
                }
                case PerturbKind::Rot: {
                    int n = ranges.rot_single_vertex ? 1 : rng.uniform_int(1, 3);
                    std::array<int, 3> idx = {0, 1, 2};
                    for (int t = 0; t < 2; ++t) {  // partial Fisher-Yates
                        int swap_with = t + static_cast<int>(rng.next_below(3 - t));
                        std::swap(idx[t], idx[swap_with]);
                    }
                    std::vector<int> targets(idx.begin(), idx.begin() + n);
                    std::sort(targets.begin(), targets.end());
                    std::vector<double> deltas;
                    deltas.reserve(targets.size());
                    for (int t = 0; t < n; ++t) {
                        deltas.push_back(rng.sign() * rng.uniform(ranges.rot_min, ranges.rot_max));
                    }
                    return perturb_rot(stim, targets, deltas);
                }
                default: break;
            }
        } catch (const InvalidGeometry&) {
            // parameter draw broke the layout; redraw
        }
    }
    throw GenerationExhausted("make_invalid: no admissible perturbation in 100 attempts");
}

/// Largest angular mismatch the oracle measures on a stimulus: for each
/// inducer, both wedge boundary rays are matched against the directions to
/// the other two centers (rays must match distinct centers); the inducer's
/// error is the best assignment's worst ray, and the stimulus misalignment
/// is the worst inducer. A valid construction measures ~0.
inline double oracle_misalignment(const StimulusSpec& stim) {
    double worst = 0.0;
    for (int k = 0; k < 3; ++k) {
        auto [i, j] = detail::other_two(k);
        const InducerSpec& ind = stim.inducers[k];
        double di = direction_of(stim.inducers[i].center - ind.center);
        double dj = direction_of(stim.inducers[j].center - ind.center);
        double ray_a = ind.mouth_bisector + ind.opening_angle / 2.0;
        double ray_b = ind.mouth_bisector - ind.opening_angle / 2.0;
        double straight = std::max(std::fabs(wrap_pi(ray_a - di)), std::fabs(wrap_pi(ray_b - dj)));
        double crossed = std::max(std::fabs(wrap_pi(ray_a - dj)), std::fabs(wrap_pi(ray_b - di)));
        worst = std::max(worst, std::min(straight, crossed));
    }
    return worst;
}

/// Ground-truth validity: every wedge boundary ray points at one of the other
/// two inducer centers within tol.angle_tol, the two rays of each inducer
/// matching distinct centers.
inline bool oracle_is_valid(const StimulusSpec& stim, OracleTolerance tol = {}) {
    return oracle_misalignment(stim) <= tol.angle_tol;
}

}  // namespace kanizsa
