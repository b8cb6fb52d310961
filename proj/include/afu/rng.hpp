#pragma once

#include <cstdint>
#include <initializer_list>

namespace afu {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Independent sub-stream seed for (seed, tag, indices...). Every random draw in
// the simulator goes through one of these so results depend only on the seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
  std::uint64_t h = splitmix64(seed);
  for (std::uint64_t p : path) h = splitmix64(h ^ splitmix64(p + 0x632be59bd9b4e019ULL));
  return h;
}

// Stream tags.
namespace stream {
inline constexpr std::uint64_t kData = 1;
inline constexpr std::uint64_t kSplit = 2;
inline constexpr std::uint64_t kPartition = 3;
inline constexpr std::uint64_t kPoison = 4;
inline constexpr std::uint64_t kInit = 5;
inline constexpr std::uint64_t kTrain = 6;
inline constexpr std::uint64_t kAscent = 7;
inline constexpr std::uint64_t kCalibration = 8;
inline constexpr std::uint64_t kCalibrationData = 9;
inline constexpr std::uint64_t kPostLearning = 10;
inline constexpr std::uint64_t kRetrain = 11;
inline constexpr std::uint64_t kProvisional = 12;
}  // namespace stream

}  // namespace afu
