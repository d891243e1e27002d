#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

namespace vqmoe {

// Deterministic draws on top of mt19937_64. The distribution helpers are
// hand-rolled so values do not depend on the standard library build.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : gen_(seed) {}

  uint64_t next_raw() { return gen_(); }

  // uniform in [0, 1), 53-bit mantissa
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller pair, second value cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925287 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  // integer in [0, n), rejection sampled to avoid modulo bias
  int64_t uniform_int(int64_t n) {
    if (n <= 0) throw std::runtime_error("rng: uniform_int needs n > 0");
    const uint64_t un = static_cast<uint64_t>(n);
    const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    uint64_t v = gen_();
    while (v >= limit) v = gen_();
    return static_cast<int64_t>(v % un);
  }

  std::string state() const {
    std::ostringstream os;
    os.precision(17);
    os << gen_ << " " << (has_spare_ ? 1 : 0) << " " << spare_;
    return os.str();
  }

  void set_state(const std::string& s) {
    std::istringstream is(s);
    int spare_flag = 0;
    is >> gen_ >> spare_flag >> spare_;
    if (is.fail()) throw std::runtime_error("rng: malformed state string");
    has_spare_ = spare_flag != 0;
  }

 private:
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace vqmoe
