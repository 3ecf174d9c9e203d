#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

namespace kanizsa {

inline constexpr double pi = 3.14159265358979323846;
inline constexpr double two_pi = 2.0 * pi;

inline constexpr double deg_to_rad(double deg) { return deg * pi / 180.0; }
inline constexpr double rad_to_deg(double rad) { return rad * 180.0 / pi; }

/// Wrap an angle to [0, 2pi).
inline double wrap_two_pi(double a) {
    a = std::fmod(a, two_pi);
    if (a < 0) a += two_pi;
    if (a >= two_pi) a = 0;  // fmod can land exactly on 2pi after the add
    return a;
}

/// Wrap an angle to (-pi, pi].
inline double wrap_pi(double a) {
    a = std::fmod(a, two_pi);
    if (a > pi) a -= two_pi;
    if (a <= -pi) a += two_pi;
    return a;
}

// Error taxonomy shared across modules. Each maps to one failure mode of the
// public contracts; the CLI translates them to exit codes.

struct InvalidGeometry : std::runtime_error {
    explicit InvalidGeometry(const std::string& what) : std::runtime_error(what) {}
};

struct GenerationExhausted : std::runtime_error {
    explicit GenerationExhausted(const std::string& what) : std::runtime_error(what) {}
};

struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

struct ShapeMismatch : std::runtime_error {
    explicit ShapeMismatch(const std::string& what) : std::runtime_error(what) {}
};

struct NumericalDivergence : std::runtime_error {
    explicit NumericalDivergence(const std::string& what) : std::runtime_error(what) {}
};

struct MissingDataset : std::runtime_error {
    explicit MissingDataset(const std::string& what) : std::runtime_error(what) {}
};

struct InsufficientClassCount : std::runtime_error {
    explicit InsufficientClassCount(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace kanizsa
