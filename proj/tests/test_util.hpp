#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <string>
#include <vector>

#include "stage/codec.hpp"
#include "stage/rng.hpp"

namespace stage::test {

inline codec::TokenGrid random_grid(Rng& rng, std::size_t frames, std::size_t lanes,
                                    std::int32_t vocab) {
  codec::TokenGrid g(frames, lanes);
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t k = 0; k < lanes; ++k) {
      g.at(t, k) = static_cast<std::int32_t>(uniform_index(rng, static_cast<std::uint64_t>(vocab)));
    }
  }
  return g;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("stage_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace stage::test
