#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace director {

// All randomness in the project flows from one experiment seed through named
// sub-streams (data/init/decode/...), so that changing e.g. the decode seed
// never perturbs dataset generation.
uint64_t substream_seed(uint64_t root_seed, std::string_view stream_name);

class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // uniform in [0, 1)
  double uniform();

  // uniform integer in [0, n)
  int64_t uniform_int(int64_t n);

  // standard normal via Box-Muller; engine-independent of libstdc++
  // distribution internals so streams are reproducible everywhere.
  double gaussian();

  // index sampled proportionally to non-negative weights
  size_t weighted_index(const std::vector<double>& weights);

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace director
