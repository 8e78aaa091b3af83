#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace trajcal {

// Error taxonomy shared by all modules.
struct invalid_action_error : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct insufficient_data_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct unobservable_motion_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct episode_finished_error : std::logic_error {
  using std::logic_error::logic_error;
};
struct training_divergence_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kGravity = 9.81;  // world -Z

// Wraps an angle to (-pi, pi]. In-range values pass through unchanged.
inline double wrap_angle(double a) {
  if (a > -kPi && a <= kPi) return a;
  a = std::fmod(a + kPi, 2.0 * kPi);
  if (a <= 0.0) a += 2.0 * kPi;
  return a - kPi;
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// All randomness in a run flows from one root seed through named sub-streams,
// so individual components (sensor sampling, PSO, model init, action
// selection) can be re-seeded or perturbed independently.
class SeedStreams {
 public:
  explicit SeedStreams(std::uint64_t root) : root_(root) {}

  std::mt19937_64 stream(std::string_view name, std::uint64_t index = 0) const {
    std::seed_seq seq{static_cast<std::uint32_t>(root_),
                      static_cast<std::uint32_t>(root_ >> 32),
                      static_cast<std::uint32_t>(fnv1a64(name)),
                      static_cast<std::uint32_t>(fnv1a64(name) >> 32),
                      static_cast<std::uint32_t>(index),
                      static_cast<std::uint32_t>(index >> 32)};
    return std::mt19937_64(seq);
  }

  std::uint64_t root() const { return root_; }

 private:
  std::uint64_t root_;
};

}  // namespace trajcal
