#ifndef KRRST_RNG_HPP_
#define KRRST_RNG_HPP_

#include <cstdint>
#include <vector>

#include "krrst/tensor.hpp"

namespace krrst {

// Counter-based generator: output k of stream `seed` is mix(seed, k), so a
// (seed, counter) pair fully determines everything that follows. Only
// integer arithmetic feeds the raw stream; the float transforms below use
// correctly rounded IEEE operations plus log/cos/sin.
struct RngState {
  std::uint64_t seed = 0;
  std::uint64_t counter = 0;

  friend bool operator==(const RngState&, const RngState&) = default;
};

class Rng {
 public:
  Rng() = default;
  explicit Rng(std::uint64_t seed) : state_{seed, 0} {}
  explicit Rng(RngState state) : state_(state) {}

  const RngState& state() const { return state_; }

  std::uint64_t next_u64();
  // Uniform on [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer on [0, n), unbiased.
  std::uint64_t below(std::uint64_t n);
  double normal();
  bool bernoulli(double p) { return uniform() < p; }

  // Independent child stream; advances this stream by one draw.
  Rng split();

  Tensor normal_tensor(Shape shape, double mean = 0.0, double stddev = 1.0);
  Tensor uniform_tensor(Shape shape, double lo = 0.0, double hi = 1.0);
  // k distinct indices from [0, n) in sampling order.
  std::vector<std::int64_t> sample_without_replacement(std::int64_t n, std::int64_t k);
  std::vector<std::int64_t> permutation(std::int64_t n);

 private:
  RngState state_;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace krrst

#endif  // KRRST_RNG_HPP_
